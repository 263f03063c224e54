"""Configurable 3D CNN: conv blocks, a flatten or GAP head and FC layers."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    Tensor,
    batch_norm3d,
    conv3d,
    cross_entropy,
    dropout,
    flatten,
    global_avg_pool,
    linear,
    max_pool3d,
    relu,
    softmax,
)

CHECKPOINT_MAGIC = b"JMNET1\0"


@dataclass
class ConvBlock:
    out_channels: int = 10
    kernel: int = 3
    batch_norm: bool = True
    relu: bool = True
    pool: bool = False

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd size")


def default_blocks(multimodal: bool = False) -> list[ConvBlock]:
    """conv(10) x5 with 2x pooling after the first three; two extra blocks when fused."""
    blocks = [ConvBlock(pool=True), ConvBlock(pool=True), ConvBlock(pool=True), ConvBlock(), ConvBlock()]
    if multimodal:
        blocks += [ConvBlock(), ConvBlock()]
    return blocks


@dataclass
class ModelConfig:
    in_channels: int = 1
    input_shape: tuple = (32, 32, 32)  # (D, H, W)
    conv_blocks: list = field(default_factory=default_blocks)
    fc: list = field(default_factory=lambda: [360, 4])
    dropout_p: float = 0.5
    num_classes: int = 4
    head: str = "flatten"  # or "gap"
    conv_bias: bool = True  # only for blocks without batch norm, which would cancel it

    def __post_init__(self):
        self.conv_blocks = [b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.conv_blocks]
        self.input_shape = tuple(int(n) for n in self.input_shape)
        self.fc = [int(n) for n in self.fc]
        if not self.conv_blocks:
            raise ValueError("need at least one conv block")
        if not self.fc or self.fc[-1] != self.num_classes:
            raise ValueError(f"final fc width must equal num_classes={self.num_classes}")
        if self.head not in ("flatten", "gap"):
            raise ValueError(f"head must be 'flatten' or 'gap', got {self.head!r}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (D, H, W)")

    @classmethod
    def default(cls, in_channels: int = 1, input_shape=(32, 32, 32)) -> "ModelConfig":
        return cls(in_channels=in_channels, input_shape=input_shape, conv_blocks=default_blocks(in_channels > 1))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["conv_blocks"] = [ConvBlock(**b) for b in d["conv_blocks"]]
        return cls(**d)


class Model:
    """Parameters in declaration order plus batch-norm running buffers."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        self.shapes = self._plan()
        c = config.in_channels
        for i, blk in enumerate(config.conv_blocks, 1):
            k = blk.kernel
            fan_in = c * k**3
            self._param(f"conv{i}.weight", _he_uniform(rng, (blk.out_channels, c, k, k, k), fan_in))
            if config.conv_bias and not blk.batch_norm:
                self._param(f"conv{i}.bias", np.zeros(blk.out_channels))
            if blk.batch_norm:
                self._param(f"bn{i}.gamma", np.ones(blk.out_channels))
                self._param(f"bn{i}.beta", np.zeros(blk.out_channels))
                self.buffers[f"bn{i}.running_mean"] = np.zeros(blk.out_channels)
                self.buffers[f"bn{i}.running_var"] = np.ones(blk.out_channels)
            c = blk.out_channels
        width = self.shapes["features"]
        for j, out in enumerate(config.fc, 1):
            self._param(f"fc{j}.weight", _he_uniform(rng, (out, width), width))
            self._param(f"fc{j}.bias", np.zeros(out))
            width = out

    def _param(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _plan(self) -> dict:
        """Spatial shape after every block; fails early naming the block."""
        cfg = self.config
        shape = cfg.input_shape
        shapes = {"input": shape}
        for i, blk in enumerate(cfg.conv_blocks, 1):
            if blk.pool:
                shape = tuple(n // 2 for n in shape)
                if min(shape) == 0:
                    raise ValueError(f"block{i}: pooling reduces input {cfg.input_shape} to an empty map")
            shapes[f"block{i}"] = shape
        last = cfg.conv_blocks[-1].out_channels
        shapes["features"] = last if cfg.head == "gap" else last * int(np.prod(shape))
        return shapes

    @property
    def block_names(self) -> list[str]:
        return [f"block{i}" for i in range(1, len(self.config.conv_blocks) + 1)]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None):
        """Logits (N, num_classes) and the post-activation output of every conv
        block before its pooling (the Grad-CAM feature maps)."""
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x)
        expect = (cfg.in_channels, *cfg.input_shape)
        if x.ndim != 5 or tuple(x.shape[1:]) != expect:
            raise ValueError(f"input: expected (N, {', '.join(map(str, expect))}), got {tuple(x.shape)}")
        cache = {}
        p = self.params
        for i, blk in enumerate(cfg.conv_blocks, 1):
            x = conv3d(x, p[f"conv{i}.weight"], p.get(f"conv{i}.bias"))
            if blk.batch_norm:
                x = batch_norm3d(x, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.buffers[f"bn{i}.running_mean"],
                                 self.buffers[f"bn{i}.running_var"], training)
            if blk.relu:
                x = relu(x)
            cache[f"block{i}"] = x
            if blk.pool:
                x = max_pool3d(x, 2)
        x = global_avg_pool(x) if cfg.head == "gap" else flatten(x)
        n_fc = len(cfg.fc)
        for j in range(1, n_fc + 1):
            x = linear(x, p[f"fc{j}.weight"], p[f"fc{j}.bias"])
            if j < n_fc:
                x = relu(x)
                x = dropout(x, cfg.dropout_p, rng, training)
        return x, cache

    def loss_and_backward(self, x, labels, rng: np.random.Generator | None = None, training: bool = True):
        """Mean cross-entropy; parameter gradients are left in ``p.grad``."""
        self.zero_grad()
        logits, _ = self.forward(x, training=training, rng=rng)
        loss = cross_entropy(logits, labels)
        loss.backward()
        return float(loss.data), {k: v.grad for k, v in self.params.items()}

    def predict_proba(self, x, batch_size: int = 16) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = [softmax(self.forward(x[i : i + batch_size])[0].data) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))

    def state(self) -> dict[str, np.ndarray]:
        s = {k: v.data.copy() for k, v in self.params.items()}
        s.update({k: v.copy() for k, v in self.buffers.items()})
        return s

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in self.params.items():
            v.data = np.array(state[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=np.float64)


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class CheckpointError(ValueError):
    pass


def _write_array(f, a: np.ndarray):
    a = np.asarray(a, dtype="<f8")
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.tobytes(order="C"))


def _read_array(buf: memoryview, pos: int):
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    if pos + 8 * n > len(buf):
        raise CheckpointError("checkpoint truncated")
    a = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
    return a, pos + 8 * n


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Magic, u64 JSON length + JSON, then every parameter and buffer tensor
    (declaration order) as u32 ndim, u32 dims, little-endian f64 values."""
    doc = {"model": json.loads(model.config.to_json()), "tensors": list(model.params) + list(model.buffers)}
    if extra:
        doc["extra"] = extra
    blob = json.dumps(doc, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        state = model.state()
        for name in doc["tensors"]:
            _write_array(f, state[name])


def load_checkpoint(path) -> tuple[Model, dict]:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[: len(CHECKPOINT_MAGIC)]) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    doc = json.loads(bytes(buf[pos : pos + n]).decode())
    pos += n
    cfg = ModelConfig.from_json(json.dumps(doc["model"]))
    model = Model(cfg)
    state = {}
    expected = model.state()
    if list(doc["tensors"]) != list(expected):
        raise CheckpointError("checkpoint tensors do not match the architecture")
    for name in doc["tensors"]:
        a, pos = _read_array(buf, pos)
        if a.shape != expected[name].shape:
            raise CheckpointError(f"{name}: shape {a.shape} != architecture {expected[name].shape}")
        state[name] = a
    model.load_state(state)
    return model, doc.get("extra", {})
