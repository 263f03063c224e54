"""A small reverse-mode autograd tensor and the 3D CNN operations built on it."""
from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """64-bit array with an optional gradient and a backward closure.

    ``grad`` is filled by :meth:`backward` on every tensor of the graph, so
    intermediate activations (e.g. for Grad-CAM) can be inspected afterwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}{', ' + self.name if self.name else ''})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad=None):
        """Propagate ``grad`` (default ones, i.e. d self / d self) to every ancestor."""
        if grad is None:
            grad = np.ones_like(self.data)
        order, seen = [], set()

        def visit(t):
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                stack.extend((p, False) for p in node._parents if p.requires_grad)

        visit(self)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                grads = node._backward(node.grad)
                for p, g in zip(node._parents, grads):
                    if p.requires_grad and g is not None:
                        p._accumulate(g)

    # elementwise arithmetic; broadcasting reduced back to the operand shape
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return Tensor(self.data + other.data, parents=(self, other),
                      backward=lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return Tensor(self.data * other.data, parents=(self, other),
                      backward=lambda g: (_unbroadcast(g * other.data, self.shape),
                                          _unbroadcast(g * self.data, other.shape)))

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else Tensor(-np.asarray(other)))

    def sum(self):
        return Tensor(self.data.sum(), parents=(self,), backward=lambda g: (np.broadcast_to(g, self.shape).copy(),))

    def reshape(self, *shape):
        return Tensor(self.data.reshape(*shape), parents=(self,), backward=lambda g: (g.reshape(self.shape),))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.maximum(x.data, 0.0), parents=(x,), backward=lambda g: (g * mask,))


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape (out, in)."""
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=backward)


def _im2col_conv(x_cl: np.ndarray, wmat: np.ndarray, k: tuple[int, int, int]):
    """'Same' correlation of channels-last (N, D, H, W, C) input with a
    (kd*kh*kw*C, O) weight matrix; returns the (N*D*H*W, O) result and the
    column matrix (columns ordered kd, kh, kw, C)."""
    N, D, H, W, C = x_cl.shape
    kd, kh, kw = k
    pad = ((0, 0), (kd // 2, kd // 2), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0))
    win = sliding_window_view(np.pad(x_cl, pad), k, axis=(1, 2, 3)).transpose(0, 1, 2, 3, 5, 6, 7, 4)
    cols = win.reshape(N * D * H * W, kd * kh * kw * C)
    return cols @ wmat, cols


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) of (N, C, D, H, W) input
    with an (O, C, k, k, k) kernel, zero padding ``k // 2``.

    im2col plus one matrix product. The input gradient is the same operation
    applied to the output gradient with the flipped, channel-swapped kernel.
    """
    N, C, D, H, W = x.shape
    O, Cw, kd, kh, kw = w.shape
    if Cw != C:
        raise ValueError(f"kernel expects {Cw} input channels, got {C}")
    k = (kd, kh, kw)
    wmat = w.data.transpose(2, 3, 4, 1, 0).reshape(-1, O)
    out, cols = _im2col_conv(x.data.transpose(0, 2, 3, 4, 1), wmat, k)
    if b is not None:
        out += b.data
    result = np.ascontiguousarray(out.reshape(N, D, H, W, O).transpose(0, 4, 1, 2, 3))

    def backward(g):
        g_cl = g.transpose(0, 2, 3, 4, 1)
        gflat = np.ascontiguousarray(g_cl).reshape(-1, O)
        dw = (gflat.T @ cols).reshape(O, kd, kh, kw, C).transpose(0, 4, 1, 2, 3)
        grads = [None, np.ascontiguousarray(dw)]
        if x.requires_grad:
            wflip = w.data[:, :, ::-1, ::-1, ::-1].transpose(2, 3, 4, 0, 1).reshape(-1, C)
            dx, _ = _im2col_conv(g_cl, wflip, k)
            grads[0] = np.ascontiguousarray(dx.reshape(N, D, H, W, C).transpose(0, 4, 1, 2, 3))
        if b is not None:
            grads.append(gflat.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(result, parents=parents, backward=backward)


def batch_norm3d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (N, D, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the output is an
    affine function of the input.
    """
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    if training:
        m = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        xhat = x.data - mu.reshape(shape)
        var = np.einsum("ncdhw,ncdhw->c", xhat, xhat) / m
        inv = 1.0 / np.sqrt(var + eps)
        xhat *= inv.reshape(shape)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))

        def backward(g):
            dbeta = g.sum(axis=axes)
            dgamma = np.einsum("ncdhw,ncdhw->c", g, xhat)
            # dx = gamma * inv * (g - mean(g) - xhat * mean(g * xhat))
            dx = xhat * (-dgamma / m).reshape(shape)
            dx += g
            dx -= (dbeta / m).reshape(shape)
            dx *= (gamma.data * inv).reshape(shape)
            return dx, dgamma, dbeta

    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv.reshape(shape)

        def backward(g):
            return g * (gamma.data * inv).reshape(shape), np.einsum("ncdhw,ncdhw->c", g, xhat), g.sum(axis=axes)

    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    return Tensor(out, parents=(x, gamma, beta), backward=backward)


def max_pool3d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k^3 max pooling with floor semantics (first max wins ties)."""
    N, C, D, H, W = x.shape
    d, h, w = D // k, H // k, W // k
    if min(d, h, w) == 0:
        raise ValueError(f"cannot pool spatial dims {(D, H, W)} by {k}")
    offsets = list(itertools.product(range(k), repeat=3))

    def view(a, o):
        return a[:, :, o[0] : d * k : k, o[1] : h * k : k, o[2] : w * k : k]

    out = view(x.data, offsets[0]).copy()
    for o in offsets[1:]:
        np.maximum(out, view(x.data, o), out=out)

    def backward(g):
        gx = np.zeros_like(x.data)
        free = np.ones(out.shape, dtype=bool)
        for o in offsets:
            hit = free & (view(x.data, o) == out)
            view(gx, o)[...] = np.where(hit, g, 0.0)
            free &= ~hit
        return (gx,)

    return Tensor(out, parents=(x,), backward=backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, D, H, W) -> (N, C)."""
    z = float(np.prod(x.shape[2:]))
    return Tensor(x.data.mean(axis=(2, 3, 4)), parents=(x,),
                  backward=lambda g: (np.broadcast_to(g[:, :, None, None, None] / z, x.shape).copy(),))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor(x.data * mask, parents=(x,), backward=lambda g: (g * mask,))


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(z, dtype=np.float64)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must be in 0..{k - 1}")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return Tensor(loss, parents=(logits,), backward=backward)
