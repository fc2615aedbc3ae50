"""Small convolutional classifier: init, prediction, Adam updates, and
bit-exact parameter serialization on top of the DPT container."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import DptLengthError, DptMagicError, DptVersionError, tensor_from_bytes, tensor_to_bytes

__all__ = [
    "Architecture",
    "ClassifierParams",
    "OptimizerState",
    "ArchitectureError",
    "init_model",
    "predict_logits",
    "predict_class",
    "init_optimizer",
    "adam_step",
    "adam_update",
    "save_params",
    "load_params",
]

MODEL_MAGIC = b"DPTM"
MODEL_VERSION = 1


class ArchitectureError(ValueError):
    """Parameter file or tensor list inconsistent with an architecture."""


@dataclass(frozen=True)
class Architecture:
    """conv-relu-pool blocks followed by one hidden dense layer and a head.

    `dense_width=0` drops the hidden layer, leaving a single linear map
    (handy for closed-form checks). The reference task uses the defaults.
    """

    in_shape: tuple[int, int, int] = (3, 32, 32)
    conv_channels: tuple[int, ...] = (16, 32)
    kernel_size: int = 3
    dense_width: int = 128
    classes: int = 4

    def __post_init__(self):
        c, h, w = self.in_shape
        if self.classes < 2:
            raise ArchitectureError(f"need at least 2 classes, got {self.classes}")
        if self.kernel_size % 2 != 1:
            raise ArchitectureError("kernel size must be odd to preserve extents")
        factor = 2 ** len(self.conv_channels)
        if h % factor or w % factor:
            raise ArchitectureError(
                f"{h}x{w} input not divisible by pooling factor {factor}"
            )

    @property
    def flat_dim(self) -> int:
        c, h, w = self.in_shape
        factor = 2 ** len(self.conv_channels)
        channels = self.conv_channels[-1] if self.conv_channels else c
        return channels * (h // factor) * (w // factor)

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        prev = self.in_shape[0]
        for out in self.conv_channels:
            shapes.append((out, prev, self.kernel_size, self.kernel_size))
            shapes.append((out,))
            prev = out
        if self.dense_width:
            shapes.append((self.flat_dim, self.dense_width))
            shapes.append((self.dense_width,))
            shapes.append((self.dense_width, self.classes))
        else:
            shapes.append((self.flat_dim, self.classes))
        shapes.append((self.classes,))
        return shapes

    def to_json(self) -> str:
        payload = {
            "in_shape": list(self.in_shape),
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "dense_width": self.dense_width,
            "classes": self.classes,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "Architecture":
        try:
            raw = json.loads(text)
            return Architecture(
                in_shape=tuple(raw["in_shape"]),
                conv_channels=tuple(raw["conv_channels"]),
                kernel_size=raw["kernel_size"],
                dense_width=raw["dense_width"],
                classes=raw["classes"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchitectureError(f"malformed architecture header: {exc}") from None


@dataclass
class ClassifierParams:
    arch: Architecture
    tensors: list[T.Tensor]

    def __post_init__(self):
        expected = self.arch.param_shapes()
        got = [t.shape for t in self.tensors]
        if got != expected:
            raise ArchitectureError(
                f"parameter shapes {got} do not match architecture {expected}"
            )


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_model(arch: Architecture, seed: int, dtype=np.float32) -> ClassifierParams:
    """Uniform fan-in-scaled weights, zero biases; bitwise-deterministic per seed."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    tensors: list[T.Tensor] = []
    for shape in arch.param_shapes():
        if len(shape) == 1:
            tensors.append(T.Tensor(np.zeros(shape, dtype=dtype)))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            tensors.append(T.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype)))
    return ClassifierParams(arch, tensors)


def _as_batch(batch) -> T.Tensor:
    if isinstance(batch, T.Tensor):
        return batch
    arr = np.asarray(batch)
    if arr.ndim == 3:
        arr = arr[None]
    return T.Tensor(arr)


def predict_logits(params: ClassifierParams, batch) -> T.Tensor:
    """Forward pass to N x k logits; recorded when a tape is active."""
    arch = params.arch
    x = _as_batch(batch)
    if x.ndim != 4 or x.shape[1:] != arch.in_shape:
        raise ArchitectureError(
            f"batch shape {x.shape} does not match input {arch.in_shape}"
        )
    ts = params.tensors
    pos = 0
    pad = arch.kernel_size // 2
    h = x
    for _ in arch.conv_channels:
        kern, bias = ts[pos], ts[pos + 1]
        pos += 2
        h = T.conv2d(h, kern, stride=1, pad=pad)
        h = T.add(h, T.reshape(bias, (1, bias.shape[0], 1, 1)))
        h = T.relu(h)
        h = T.avg_pool2(h)
    h = T.reshape(h, (h.shape[0], arch.flat_dim))
    if arch.dense_width:
        h = T.relu(T.dense(h, ts[pos], ts[pos + 1]))
        pos += 2
    return T.dense(h, ts[pos], ts[pos + 1])


def predict_class(params: ClassifierParams, batch) -> list[int]:
    """Argmax per row; ties resolve to the lowest class index."""
    logits = predict_logits(params, batch)
    return [int(i) for i in np.argmax(logits.data, axis=1)]


def init_optimizer(
    params: ClassifierParams,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    zeros = [np.zeros(t.shape, dtype=t.dtype) for t in params.tensors]
    return OptimizerState(
        m=zeros,
        v=[z.copy() for z in zeros],
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_update(
    tensors: list[T.Tensor], grads: list[np.ndarray], state: OptimizerState
) -> tuple[list[T.Tensor], OptimizerState]:
    """One Adam step with bias correction over an arbitrary tensor list."""
    if len(tensors) != len(grads):
        raise ValueError(f"{len(tensors)} tensors but {len(grads)} gradients")
    t = state.step + 1
    b1 = np.float32(state.beta1)
    b2 = np.float32(state.beta2)
    corr1 = np.float32(1.0 - state.beta1**t)
    corr2 = np.float32(1.0 - state.beta2**t)
    lr = np.float32(state.lr)
    eps = np.float32(state.eps)
    new_tensors: list[T.Tensor] = []
    new_m: list[np.ndarray] = []
    new_v: list[np.ndarray] = []
    for tensor, grad, m, v in zip(tensors, grads, state.m, state.v):
        g = np.asarray(grad, dtype=tensor.dtype)
        if g.shape != tensor.shape:
            raise ValueError(f"gradient shape {g.shape} vs parameter {tensor.shape}")
        m2 = b1 * m + (np.float32(1.0) - b1) * g
        v2 = b2 * v + (np.float32(1.0) - b2) * (g * g)
        update = lr * (m2 / corr1) / (np.sqrt(v2 / corr2) + eps)
        new_tensors.append(T.Tensor(tensor.data - update))
        new_m.append(m2)
        new_v.append(v2)
    return new_tensors, replace(state, m=new_m, v=new_v, step=t)


def adam_step(
    params: ClassifierParams, grads: T.GradientSet, state: OptimizerState
) -> tuple[ClassifierParams, OptimizerState]:
    grad_arrays = []
    for tensor in params.tensors:
        g = grads.get(tensor)
        grad_arrays.append(np.zeros(tensor.shape, tensor.dtype) if g is None else g.data)
    new_tensors, new_state = adam_update(params.tensors, grad_arrays, state)
    return ClassifierParams(params.arch, new_tensors), new_state


# ---------------------------------------------------------------------------
# serialization: DPTM = magic, version, arch JSON, tensor count, DPT blobs

def save_params(path, params: ClassifierParams) -> None:
    arch_bytes = params.arch.to_json().encode("utf-8")
    parts = [
        MODEL_MAGIC,
        struct.pack("<I", MODEL_VERSION),
        struct.pack("<I", len(arch_bytes)),
        arch_bytes,
        struct.pack("<I", len(params.tensors)),
    ]
    for tensor in params.tensors:
        blob = tensor_to_bytes(tensor.data)
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_params(path, expect: Architecture | None = None) -> ClassifierParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise DptLengthError(f"model file too short ({len(blob)} bytes)")
    if blob[:4] != MODEL_MAGIC:
        raise DptMagicError(f"bad model magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != MODEL_VERSION:
        raise DptVersionError(f"unsupported model version {version}")
    (arch_len,) = struct.unpack("<I", blob[8:12])
    pos = 12
    if len(blob) < pos + arch_len + 4:
        raise DptLengthError("truncated architecture header")
    arch = Architecture.from_json(blob[pos : pos + arch_len].decode("utf-8"))
    pos += arch_len
    (count,) = struct.unpack("<I", blob[pos : pos + 4])
    pos += 4
    tensors: list[T.Tensor] = []
    for _ in range(count):
        if len(blob) < pos + 4:
            raise DptLengthError("truncated tensor table")
        (blob_len,) = struct.unpack("<I", blob[pos : pos + 4])
        pos += 4
        if len(blob) < pos + blob_len:
            raise DptLengthError("truncated tensor payload")
        tensors.append(T.Tensor(tensor_from_bytes(blob[pos : pos + blob_len])))
        pos += blob_len
    if pos != len(blob):
        raise DptLengthError(f"{len(blob) - pos} trailing bytes after tensor table")
    if expect is not None and arch != expect:
        raise ArchitectureError(
            f"file architecture {arch} does not match expected {expect}"
        )
    return ClassifierParams(arch, tensors)
