"""Differentiable salience density, foreground score, and foreground /
background mask extraction.

The density is a difference-of-Gaussians contrast energy normalized to sum
to 1 per image (optionally a tiny learned fixation net), so it keeps the
two properties the attack objective needs: a per-pixel density summing to
1 and differentiability in the input image.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, load_tensor
from .model import OptimizerState, adam_update

__all__ = [
    "SalienceMap",
    "MaskPair",
    "FixationNet",
    "salience_map",
    "foreground_score",
    "fixation_masks",
    "threshold_masks",
    "masks_from_segmentation",
    "init_fixation_net",
    "train_fixation_net",
    "DOG_SIGMA_NARROW",
    "DOG_SIGMA_WIDE",
    "DENSITY_FLOOR",
]

log = logging.getLogger(__name__)

DOG_SIGMA_NARROW = 1.0
DOG_SIGMA_WIDE = 4.0
DENSITY_FLOOR = 1e-8


def _blur_radius(sigma: float) -> int:
    return int(np.ceil(3.0 * sigma))


@dataclass
class SalienceMap:
    """Per-pixel nonnegative density over H x W, summing to 1 per image.

    `density` stays a live autodiff value so gradients can flow back to the
    image it was computed from.
    """

    density: T.Tensor

    def __post_init__(self):
        if self.density.ndim not in (2, 3):
            raise T.ShapeError(f"density must be HW or NHW, got {self.density.shape}")

    @property
    def values(self) -> np.ndarray:
        return self.density.data


@dataclass
class MaskPair:
    """Binary foreground/background partition of the pixel grid."""

    foreground: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.foreground, dtype=np.float32)
        b = np.asarray(self.background, dtype=np.float32)
        if f.shape != b.shape or f.ndim != 2:
            raise T.ShapeError(
                f"masks must be matching HxW arrays, got {f.shape} and {b.shape}"
            )
        if not (np.isin(f, (0.0, 1.0)).all() and np.isin(b, (0.0, 1.0)).all()):
            raise ValueError("masks must be exactly binary")
        if (f * b).any() or not np.array_equal(f + b, np.ones_like(f)):
            raise ValueError("masks must partition the grid: F*B = 0 and F+B = 1")
        self.foreground = f
        self.background = b

    @classmethod
    def from_foreground(cls, fg) -> "MaskPair":
        f = (np.asarray(fg) > 0.5).astype(np.float32)
        return cls(f, 1.0 - f)

    @property
    def shape(self) -> tuple[int, int]:
        return self.foreground.shape


@dataclass
class FixationNet:
    """Two-conv score net used by the learned salience method."""

    tensors: list[T.Tensor]  # k1 (8,C,3,3), b1, k2 (1,8,3,3), b2


def _as_image_batch(x, channels_expected: int | None = None) -> tuple[T.Tensor, bool]:
    """Promote CHW input to NCHW; remember whether to squeeze on the way out."""
    t = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x))
    if t.ndim == 3:
        return T.reshape(t, (1,) + t.shape), True
    if t.ndim != 4:
        raise T.ShapeError(f"expected CHW or NCHW image, got {t.shape}")
    return t, False


def _check_pixel_range(t: T.Tensor) -> None:
    lo = float(t.data.min())
    hi = float(t.data.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ValueError(f"pixel values must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")


def _fixation_scores(net: FixationNet, x: T.Tensor) -> T.Tensor:
    k1, b1, k2, b2 = net.tensors
    h = T.conv2d(x, k1, stride=1, pad=1)
    h = T.add(h, T.reshape(b1, (1, b1.shape[0], 1, 1)))
    h = T.relu(h)
    h = T.conv2d(h, k2, stride=1, pad=1)
    h = T.add(h, T.reshape(b2, (1, 1, 1, 1)))
    return h  # (N,1,H,W) raw scores


def _normalize_energy(energy: T.Tensor) -> T.Tensor:
    """(e + floor) / sum(e + floor) per sample; keeps the map strictly positive."""
    floored = T.add(energy, T.Tensor(np.float32(DENSITY_FLOOR)))
    totals = T.reduce_sum(floored, axis=(1, 2), keepdims=True)
    return T.div(floored, totals)


def salience_map(
    x, method: str = "dog", fixnet: FixationNet | None = None, check_range: bool = True
) -> T.Tensor:
    """Per-pixel salience density of an image (or batch), differentiable in x.

    dog: squared difference of two Gaussian blurs summed over channels.
    learned: squared scores of a trained FixationNet.
    Both pass through the same floor-and-normalize step. check_range=False
    skips the [0,1] precondition for callers that evaluate the density on
    noise-shifted inputs.
    """
    xb, squeeze = _as_image_batch(x)
    if check_range:
        _check_pixel_range(xb)
    if method == "dog":
        narrow = T.gaussian_blur(xb, DOG_SIGMA_NARROW, _blur_radius(DOG_SIGMA_NARROW))
        wide = T.gaussian_blur(xb, DOG_SIGMA_WIDE, _blur_radius(DOG_SIGMA_WIDE))
        diff = T.sub(narrow, wide)
        energy = T.reduce_sum(T.mul(diff, diff), axis=1)  # (N,H,W)
    elif method == "learned":
        if fixnet is None:
            raise ValueError("learned salience needs a trained FixationNet")
        scores = _fixation_scores(fixnet, xb)
        energy = T.reduce_sum(T.mul(scores, scores), axis=1)
    else:
        raise ValueError(f"unknown salience method {method!r}")
    density = _normalize_energy(energy)
    if squeeze:
        density = T.reshape(density, density.shape[1:])
    return density


def foreground_score(
    x,
    mask,
    method: str = "dog",
    fixnet: FixationNet | None = None,
    check_range: bool = True,
) -> T.Tensor:
    """Total salience density inside the foreground; scalar in [0, 1] per image.

    Taped, so the gradient with respect to x is available to the attack
    objective's salience term.
    """
    density = salience_map(x, method=method, fixnet=fixnet, check_range=check_range)
    fg = mask.foreground if isinstance(mask, MaskPair) else np.asarray(mask, dtype=np.float32)
    if density.ndim == 2:
        if fg.shape != density.shape:
            raise T.ShapeError(f"mask {fg.shape} does not match density {density.shape}")
        return T.reduce_sum(T.mul(density, T.Tensor(fg)))
    if fg.shape != density.shape:
        raise T.ShapeError(f"mask {fg.shape} does not match density {density.shape}")
    return T.reduce_sum(T.mul(density, T.Tensor(fg)), axis=(1, 2))


def threshold_masks(density: np.ndarray) -> MaskPair:
    """Split a density map at t = 0.5*(min + max); strictly greater wins
    foreground. A constant map has no strictly-greater pixels and falls back
    to all-foreground (logged)."""
    density = np.asarray(density)
    if density.ndim != 2:
        raise T.ShapeError(f"density must be HxW, got {density.shape}")
    t = 0.5 * (float(density.min()) + float(density.max()))
    fg = density > t
    if not fg.any():
        log.warning(
            "constant salience map: fixation threshold %.3g separates nothing; "
            "treating the whole image as foreground",
            t,
        )
        fg = np.ones_like(density, dtype=bool)
    return MaskPair.from_foreground(fg)


def fixation_masks(x, method: str = "dog", fixnet: FixationNet | None = None) -> MaskPair:
    """Foreground/background masks from the fixation threshold on the salience map."""
    density = salience_map(x, method=method, fixnet=fixnet)
    if density.ndim != 2:
        raise T.ShapeError("fixation_masks expects a single CHW image")
    return threshold_masks(density.data)


def masks_from_segmentation(path, expect_hw: tuple[int, int] | None = None) -> MaskPair:
    """Load an HxW mask tensor; values > 0.5 coerce to foreground."""
    arr = load_tensor(Path(path))
    if arr.ndim != 2:
        raise T.ShapeError(f"segmentation mask must be HxW, got {arr.shape}")
    if expect_hw is not None and arr.shape != tuple(expect_hw):
        raise T.ShapeError(
            f"segmentation mask {arr.shape} does not match expected {tuple(expect_hw)}"
        )
    return MaskPair.from_foreground(arr > 0.5)


# ---------------------------------------------------------------------------
# learned fixation net

def init_fixation_net(channels: int = 3, seed: int = 0) -> FixationNet:
    rng = np.random.default_rng(np.random.PCG64(seed))
    hidden = 8
    shapes = [(hidden, channels, 3, 3), (hidden,), (1, hidden, 3, 3), (1,)]
    tensors = []
    for shape in shapes:
        if len(shape) == 1:
            tensors.append(T.Tensor(np.zeros(shape, dtype=np.float32)))
        else:
            bound = 1.0 / np.sqrt(np.prod(shape[1:]))
            tensors.append(
                T.Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32))
            )
    return FixationNet(tensors)


def train_fixation_net(
    dataset: Dataset,
    seed: int = 0,
    epochs: int = 20,
    batch_size: int = 32,
    lr: float = 1e-2,
) -> FixationNet:
    """Fit the score net to the dataset's ground-truth masks by squared error."""
    if dataset.masks is None:
        raise ValueError("training the fixation net needs ground-truth masks")
    net = init_fixation_net(dataset.images.shape[1], seed)
    state = OptimizerState(
        m=[np.zeros(t.shape, np.float32) for t in net.tensors],
        v=[np.zeros(t.shape, np.float32) for t in net.tensors],
        step=0,
        lr=lr,
    )
    rng = np.random.default_rng(np.random.PCG64(seed + 1))
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = T.Tensor(dataset.images[idx])
            target = T.Tensor(dataset.masks[idx][:, None])
            with T.Tape() as tape:
                scores = _fixation_scores(net, xb)
                err = T.sub(scores, target)
                loss = T.scale(T.reduce_sum(T.mul(err, err)), 1.0 / idx.size)
            grads = T.backward(tape, loss)
            arrays = [grads[t].data for t in net.tensors]
            new_tensors, state = adam_update(net.tensors, arrays, state)
            net = FixationNet(new_tensors)
    return net
