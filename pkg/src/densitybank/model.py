"""Small fully-convolutional density predictor with hand-written backward pass.

    image (1, H, W)
      -> conv 3x3, 1->8, ReLU
      -> conv 3x3, 8->16, ReLU      = features (16, H, W)
      -> conv 1x1, 16->1, softplus  = density (H, W)

Convolutions use zero "same" padding, so every map keeps the input
resolution. Parameters are stored as float32; arithmetic runs in float64.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, NumericError, ParameterError, StateError

CHECKPOINT_MAGIC = b"C2DP"
CHECKPOINT_VERSION = 1
MIN_SIZE = 8
FEATURE_DIM = 16

# name -> shape, in checkpoint order
LAYOUT = {
    "conv1.weight": (8, 1, 3, 3),
    "conv1.bias": (8,),
    "conv2.weight": (FEATURE_DIM, 8, 3, 3),
    "conv2.bias": (FEATURE_DIM,),
    "head.weight": (1, FEATURE_DIM, 1, 1),
    "head.bias": (1,),
}


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    _cache: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        for name, shape in LAYOUT.items():
            if name not in self.tensors:
                raise ParameterError(f"missing tensor {name!r}")
            if self.tensors[name].shape != shape:
                raise ParameterError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")
        if not self.grads:
            self.zero_grad()

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.tensors.items()}

    def copy(self) -> ModelParams:
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in LAYOUT:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name], dtype="<f4").tobytes())
        return h.hexdigest()


def init_params(seed: int) -> ModelParams:
    """Glorot-uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in LAYOUT.items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = rng.uniform(-1.0, 1.0, size=shape).astype(np.float32) * np.float32(
                glorot_bound(shape)
            )
    return ModelParams(tensors)


def glorot_bound(shape) -> float:
    out_ch, in_ch, kh, kw = shape
    return float(np.sqrt(6.0 / (in_ch * kh * kw + out_ch * kh * kw)))


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, H*W) patches of the zero-padded input."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * 9, h * w)


def _col2im3(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`_im2col3`."""
    cols = cols.reshape(c, 3, 3, h, w)
    xp = np.zeros((c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            xp[:, i : i + h, j : j + w] += cols[:, i, j]
    return xp[:, 1:-1, 1:-1]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def forward(image, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features (16, H, W), density (H, W))`` and cache intermediates on ``params``."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < MIN_SIZE:
        raise ParameterError(f"image must be 2-D and at least {MIN_SIZE}x{MIN_SIZE}, got {x.shape}")
    h, w = x.shape
    t = {k: v.astype(np.float64) for k, v in params.tensors.items()}

    cols1 = _im2col3(x[None])
    pre1 = t["conv1.weight"].reshape(8, -1) @ cols1 + t["conv1.bias"][:, None]
    act1 = np.maximum(pre1, 0.0)
    cols2 = _im2col3(act1.reshape(8, h, w))
    pre2 = t["conv2.weight"].reshape(FEATURE_DIM, -1) @ cols2 + t["conv2.bias"][:, None]
    feats = np.maximum(pre2, 0.0)
    logit = t["head.weight"].reshape(1, -1) @ feats + t["head.bias"][:, None]
    density = np.logaddexp(0.0, logit[0])

    params._cache = {
        "image": x,
        "cols1": cols1,
        "pre1": pre1,
        "cols2": cols2,
        "pre2": pre2,
        "feats": feats,
        "logit": logit[0],
        "weights": t,
    }
    return feats.reshape(FEATURE_DIM, h, w), density.reshape(h, w)


def backward(image, params: ModelParams, density_grad, feature_grad=None) -> None:
    """Accumulate dLoss/dparams given upstream gradients on density and features."""
    cache = params._cache
    if cache is None:
        raise StateError("backward called before forward")
    x = np.asarray(image, dtype=np.float64)
    if x.shape != cache["image"].shape or not np.array_equal(x, cache["image"]):
        raise StateError("backward image does not match the cached forward pass")
    h, w = x.shape
    t = cache["weights"]
    g = params.grads

    d_logit = np.asarray(density_grad, dtype=np.float64).reshape(1, -1) * _sigmoid(cache["logit"])
    g["head.weight"] += (d_logit @ cache["feats"].T).reshape(LAYOUT["head.weight"])
    g["head.bias"] += d_logit.sum(axis=1)

    d_feats = t["head.weight"].reshape(1, -1).T @ d_logit
    if feature_grad is not None:
        d_feats = d_feats + np.asarray(feature_grad, dtype=np.float64).reshape(FEATURE_DIM, -1)
    d_pre2 = d_feats * (cache["pre2"] > 0)
    g["conv2.weight"] += (d_pre2 @ cache["cols2"].T).reshape(LAYOUT["conv2.weight"])
    g["conv2.bias"] += d_pre2.sum(axis=1)

    d_cols2 = t["conv2.weight"].reshape(FEATURE_DIM, -1).T @ d_pre2
    d_act1 = _col2im3(d_cols2, 8, h, w).reshape(8, -1)
    d_pre1 = d_act1 * (cache["pre1"] > 0)
    g["conv1.weight"] += (d_pre1 @ cache["cols1"].T).reshape(LAYOUT["conv1.weight"])
    g["conv1.bias"] += d_pre1.sum(axis=1)


def sgd_step(params: ModelParams, learning_rate: float, weight_decay: float = 0.0) -> None:
    """params <- params - lr * (grad + wd * params); gradients are zeroed afterwards."""
    for name, grad in params.grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient in {name}; step refused")
    for name, grad in params.grads.items():
        p = params.tensors[name].astype(np.float64)
        params.tensors[name] = (p - learning_rate * (grad + weight_decay * p)).astype(np.float32)
    params.zero_grad()


@dataclass
class AdamState:
    """First/second moment estimates for :func:`adam_step`."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: ModelParams, state: AdamState, learning_rate: float, weight_decay: float = 0.0
) -> None:
    """Adam update with L2 weight decay folded into the gradient; gradients are zeroed afterwards."""
    for name, grad in params.grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient in {name}; step refused")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, grad in params.grads.items():
        p = params.tensors[name].astype(np.float64)
        g = grad + weight_decay * p
        m = state.m.get(name, 0.0) * state.beta1 + (1.0 - state.beta1) * g
        v = state.v.get(name, 0.0) * state.beta2 + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p = p - learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params.tensors[name] = p.astype(np.float32)
    params.zero_grad()


def save_checkpoint(path, params: ModelParams, extra: dict[str, np.ndarray] | None = None) -> None:
    """Binary checkpoint: magic, version, tensor count, then (name, rank, dims, f32 data) records."""
    records = [(k, params.tensors[k]) for k in LAYOUT]
    records += [(k, np.asarray(v, dtype=np.float32)) for k, v in (extra or {}).items()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<2I", CHECKPOINT_VERSION, len(records)))
        for name, arr in records:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<2I", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4, "name length"))
        name = take(n, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"{name} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size, f"{name} data"), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float32)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    learned = {k: tensors.pop(k) for k in LAYOUT if k in tensors}
    missing = [k for k in LAYOUT if k not in learned]
    if missing:
        raise FormatError(f"{path}: missing tensor {missing[0]!r}")
    return ModelParams(learned), tensors
