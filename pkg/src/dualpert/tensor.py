"""Dense float tensors with tape-based reverse-mode differentiation.

Storage is float32 (float64 is accepted everywhere for high-precision
checks); reductions accumulate in float64 and round once on output.
Layout is row-major and every loop/summation order is fixed, so forward
results are bitwise reproducible for identical inputs.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "GradientSet",
    "ShapeError",
    "TapeError",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "reshape",
    "reduce_sum",
    "conv2d",
    "dense",
    "avg_pool2",
    "gaussian_blur",
    "softmax_cross_entropy",
    "backward",
]

_STORAGE_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested operation."""


class TapeError(RuntimeError):
    """Backward pass requested for a value that was not produced on the tape."""


class Tensor:
    """N-dimensional array of 32-bit reals (or 64-bit for verification runs)."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float32):
        arr = np.asarray(data)
        if arr.dtype not in _STORAGE_DTYPES:
            arr = arr.astype(dtype)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


_tapes = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tapes, "stack", None)
    if stack is None:
        stack = []
        _tapes.stack = stack
    return stack


class Tape:
    """Ordered record of the primitive operations of one forward pass.

    Used as a context manager; every op executed while the tape is active
    is appended, and backward() replays the record in exact reverse order.
    """

    def __init__(self):
        self._entries = []  # (out, inputs, pull) in forward order

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._entries)


def _record(out: Tensor, inputs: tuple[Tensor, ...], pull) -> Tensor:
    stack = _tape_stack()
    if stack:
        stack[-1]._entries.append((out, inputs, pull))
    return out


class GradientSet:
    """Gradients of one scalar root keyed by the tensors they differentiate."""

    def __init__(self, grads: dict):
        self._grads = grads  # id(tensor) -> (tensor, ndarray)

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __getitem__(self, tensor: Tensor) -> Tensor:
        entry = self._grads.get(id(tensor))
        if entry is None:
            raise KeyError("no gradient recorded for this tensor")
        return Tensor(entry[1])

    def get(self, tensor: Tensor) -> Tensor | None:
        entry = self._grads.get(id(tensor))
        return None if entry is None else Tensor(entry[1])


def backward(tape: Tape, root: Tensor) -> GradientSet:
    """Gradients of a scalar `root` with respect to every tensor on `tape`."""
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    entries = tape._entries
    if not any(out is root for out, _, _ in entries):
        raise TapeError("root was not produced under this tape")

    grads: dict = {id(root): (root, np.ones_like(root.data))}
    for out, inputs, pull in reversed(entries):
        slot = grads.get(id(out))
        if slot is None:
            continue
        contribs = pull(slot[1])
        for tensor, contrib in zip(inputs, contribs):
            if contrib is None:
                continue
            contrib = np.asarray(contrib, dtype=tensor.data.dtype)
            prev = grads.get(id(tensor))
            if prev is None:
                grads[id(tensor)] = (tensor, contrib)
            else:
                grads[id(tensor)] = (tensor, prev[1] + contrib)
    return GradientSet(grads)


# ---------------------------------------------------------------------------
# elementwise ops

def _f64(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64, copy=False)


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reverse numpy broadcasting: reduce `grad` back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64).astype(grad.dtype)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64).astype(grad.dtype)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def pull(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _record(out, (a, b), pull)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def pull(g):
        return _sum_to(g, a.shape), _sum_to(-g, b.shape)

    return _record(out, (a, b), pull)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def pull(g):
        return _sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)

    return _record(out, (a, b), pull)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b; b must be nonzero everywhere."""
    out = Tensor(a.data / b.data)

    def pull(g):
        ga = _sum_to(g / b.data, a.shape)
        gb = _sum_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), pull)


def scale(x: Tensor, c: float) -> Tensor:
    c_ = x.data.dtype.type(c)
    out = Tensor(x.data * c_)

    def pull(g):
        return (g * c_,)

    return _record(out, (x,), pull)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the gradient at exactly 0 is defined as 0."""
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, x.data.dtype.type(0)))

    def pull(g):
        return (g * mask,)

    return _record(out, (x,), pull)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def pull(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), pull)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over `axis` (all axes by default), accumulated in float64."""
    out_np = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Tensor(out_np.astype(x.data.dtype))
    axes = axis if axis is None or isinstance(axis, tuple) else (axis,)

    def pull(g):
        if axes is not None and not keepdims:
            expand = sorted(a % x.ndim for a in axes)
            for a in expand:
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False),)

    return _record(out, (x,), pull)


# ---------------------------------------------------------------------------
# structured ops

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIHW kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be OIHW, got {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"channel mismatch: input C={x.shape[1]} vs kernel I={kernel.shape[1]}"
        )
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if h + 2 * pad < kh or w + 2 * pad < kw or oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} does not fit padded input {h + 2 * pad}x{w + 2 * pad}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    dtype = np.result_type(x.data.dtype, kernel.data.dtype)
    out_np = np.einsum(
        "nchwkl,ockl->nohw", _f64(win), _f64(kernel.data), optimize=True
    ).astype(dtype)
    out = Tensor(out_np)

    def pull(g):
        g64 = _f64(g)
        dk = np.einsum("nchwkl,nohw->ockl", _f64(win), g64, optimize=True)
        dcols = np.einsum("nohw,ockl->nchwkl", g64, _f64(kernel.data), optimize=True)
        dxp = np.zeros(xp.shape, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                    ..., i, j
                ]
        dx = dxp[:, :, pad : pad + h, pad : pad + w]
        return dx.astype(x.data.dtype), dk.astype(kernel.data.dtype)

    return _record(out, (x, kernel), pull)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W + b with row-vector samples."""
    if x.ndim != 2 or weights.ndim != 2 or bias.ndim != 1:
        raise ShapeError(
            f"dense expects 2D input/weights and 1D bias, got {x.shape}, "
            f"{weights.shape}, {bias.shape}"
        )
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"inner dimensions disagree: input D={x.shape[1]} vs weights D={weights.shape[0]}"
        )
    if bias.shape[0] != weights.shape[1]:
        raise ShapeError(
            f"bias length {bias.shape[0]} vs weights M={weights.shape[1]}"
        )
    dtype = np.result_type(x.data.dtype, weights.data.dtype, bias.data.dtype)
    out_np = (_f64(x.data) @ _f64(weights.data) + _f64(bias.data)).astype(dtype)
    out = Tensor(out_np)

    def pull(g):
        g64 = _f64(g)
        dx = (g64 @ _f64(weights.data).T).astype(x.data.dtype)
        dw = (_f64(x.data).T @ g64).astype(weights.data.dtype)
        db = g64.sum(axis=0).astype(bias.data.dtype)
        return dx, dw, db

    return _record(out, (x, weights, bias), pull)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on an NCHW batch."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2 input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out_np = (blocks.sum(axis=(3, 5), dtype=np.float64) * 0.25).astype(x.data.dtype)
    out = Tensor(out_np)

    def pull(g):
        gq = (g * x.data.dtype.type(0.25)).astype(x.data.dtype)
        return (np.repeat(np.repeat(gq, 2, axis=2), 2, axis=3),)

    return _record(out, (x,), pull)


def _gauss_kernel(sigma: float, radius: int) -> np.ndarray:
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-(taps * taps) / (2.0 * sigma * sigma))
    return kern / kern.sum()


def _corr1d(arr: np.ndarray, kern: np.ndarray, radius: int, axis: int) -> np.ndarray:
    """Valid correlation along `axis` after replicate-padding by `radius`."""
    pads = [(0, 0)] * arr.ndim
    pads[axis] = (radius, radius)
    padded = np.pad(arr, pads, mode="edge")
    win = sliding_window_view(padded, 2 * radius + 1, axis=axis)
    return np.tensordot(_f64(win), kern, axes=([-1], [0]))


def _corr1d_adjoint(g: np.ndarray, kern: np.ndarray, radius: int, axis: int) -> np.ndarray:
    """Adjoint of _corr1d: full correlation with the flipped kernel, then the
    replicate-pad transpose folds the overhang onto the two edge samples."""
    pads = [(0, 0)] * g.ndim
    pads[axis] = (2 * radius, 2 * radius)
    padded = np.pad(g, pads)
    win = sliding_window_view(padded, 2 * radius + 1, axis=axis)
    u = np.tensordot(_f64(win), kern[::-1].copy(), axes=([-1], [0]))
    n = g.shape[axis]
    sl = [slice(None)] * u.ndim
    sl[axis] = slice(radius, radius + n)
    core = u[tuple(sl)].copy()
    sl[axis] = slice(0, radius)
    head = u[tuple(sl)].sum(axis=axis)
    sl[axis] = slice(radius + n, None)
    tail = u[tuple(sl)].sum(axis=axis)
    first = [slice(None)] * core.ndim
    first[axis] = 0
    core[tuple(first)] += head
    last = [slice(None)] * core.ndim
    last[axis] = n - 1
    core[tuple(last)] += tail
    return core


def gaussian_blur(x: Tensor, sigma: float, radius: int) -> Tensor:
    """Separable Gaussian blur over the last two axes.

    The kernel is the sampled Gaussian truncated at `radius`, renormalized
    to sum to 1; the border uses replicate padding so constant images are
    preserved exactly.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if x.ndim < 2:
        raise ShapeError(f"gaussian_blur needs at least 2 axes, got {x.shape}")
    kern = _gauss_kernel(sigma, radius)
    y64 = _corr1d(_corr1d(x.data, kern, radius, x.ndim - 2), kern, radius, x.ndim - 1)
    out = Tensor(y64.astype(x.data.dtype))

    def pull(g):
        d = _corr1d_adjoint(_f64(g), kern, radius, x.ndim - 1)
        d = _corr1d_adjoint(d, kern, radius, x.ndim - 2)
        return (d.astype(x.data.dtype),)

    return _record(out, (x,), pull)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample -log softmax(logits)[label], stabilized by max-subtraction."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N x k, got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise ShapeError(f"need at least 2 classes, got {k}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{n} samples but {y.shape[0]} labels")
    if (y < 0).any() or (y >= k).any():
        raise ValueError(f"labels must lie in [0, {k}), got {y.min()}..{y.max()}")

    z = _f64(logits.data)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    logsumexp = zmax[:, 0] + np.log(denom[:, 0])
    rows = np.arange(n)
    out = Tensor((logsumexp - z[rows, y]).astype(logits.data.dtype))
    soft = ez / denom

    def pull(g):
        d = soft.copy()
        d[rows, y] -= 1.0
        return ((d * _f64(g)[:, None]).astype(logits.data.dtype),)

    return _record(out, (logits,), pull)
