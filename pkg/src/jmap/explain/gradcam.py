"""3D Grad-CAM over the cached conv-block activations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..net.model import Model
from ..net.tensor import Tensor
from ..volume import Volume, trilinear, write_nifti

DEFAULT_LAYER = "block3"


@dataclass(frozen=True)
class Heatmap:
    """Normalised CAM on the input grid (a (W, H, D) Volume), plus the raw
    pre-normalisation CAM at the layer's resolution in (D, H, W) order."""

    volume: Volume
    class_index: int
    layer: str
    raw: np.ndarray

    @property
    def data(self) -> np.ndarray:
        return self.volume.data

    def save(self, path) -> None:
        write_nifti(self.volume, path)


def normalize_map(cam: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all ones if positive, else zeros."""
    cam = np.asarray(cam, dtype=np.float64)
    lo, hi = float(cam.min()), float(cam.max())
    if hi > lo:
        return (cam - lo) / (hi - lo)
    return np.full_like(cam, 1.0 if hi > 0 else 0.0)


def upsample(cam: np.ndarray, shape) -> np.ndarray:
    """Trilinear resize aligning voxel centres, edge-clamped (constants stay constant)."""
    axes = []
    for n_in, n_out in zip(cam.shape, shape):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        axes.append(np.clip(c, 0, n_in - 1))
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return trilinear(cam, coords)


def class_activation(model: Model, x: np.ndarray, class_index: int, layer: str = DEFAULT_LAYER):
    """Raw CAM ``ReLU(sum_u lambda_u A_u)`` at the layer's resolution.

    ``lambda_u`` is the mean over the feature map of d logit_C / d A_u.
    Returns ``(cam, activations, gradients)`` for one (C, D, H, W) input.
    """
    k = model.config.num_classes
    if not 0 <= class_index < k:
        raise ValueError(f"class index {class_index} out of range 0..{k - 1}")
    if layer not in model.block_names:
        raise ValueError(f"layer {layer!r} is not a cached conv block; choose from {model.block_names}")
    x = np.asarray(x, dtype=np.float64)
    logits, cache = model.forward(Tensor(x[None]), training=False)
    model.zero_grad()
    seed = np.zeros_like(logits.data)
    seed[0, class_index] = 1.0
    logits.backward(seed)
    feats = cache[layer]
    A = feats.data[0]
    G = feats.grad[0] if feats.grad is not None else np.zeros_like(A)
    lam = G.mean(axis=(1, 2, 3))
    cam = np.maximum(np.tensordot(lam, A, axes=(0, 0)), 0.0)
    model.zero_grad()
    return cam, A, G


def grad_cam_3d(model: Model, x: np.ndarray, class_index: int, layer: str = DEFAULT_LAYER,
                like: Volume | None = None) -> Heatmap:
    """Grad-CAM heatmap for one (C, D, H, W) input, upsampled to the input
    grid and returned as a (W, H, D) Volume (geometry from ``like``)."""
    cam, _, _ = class_activation(model, x, class_index, layer)
    up = normalize_map(upsample(cam, np.asarray(x).shape[1:]))
    data = up.transpose(2, 1, 0)
    vol = like.with_data(data) if like is not None else Volume(data)
    return Heatmap(vol, int(class_index), layer, cam)
