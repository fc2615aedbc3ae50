"""Attack procedures: per-region projections, normalized steepest ascent,
the dual-perturbation iteration (init / split / masked step / project /
merge), plain PGD as its degenerate case, a noise-expectation variant for
smoothed classifiers, and a greedy sparse-pixel baseline.

All attacks are deterministic functions of (inputs, config, seed) and every
returned image satisfies the masked norm budgets and the [0,1] pixel box.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .model import ClassifierParams, predict_class, predict_logits
from .salience import FixationNet, MaskPair, foreground_score

__all__ = [
    "AttackConfig",
    "project",
    "steepest_dir",
    "init_dual",
    "objective_value",
    "objective_grad",
    "smoothed_objective_grad",
    "dual_step",
    "dual_attack",
    "pgd_attack",
    "rs_dual_attack",
    "jsma_attack",
]

NORMS = ("l2", "linf")
_ZERO_GRAD_EPS = 1e-12
_PROJECT_SLACK = 1e-6  # keeps l2 projection bitwise idempotent


@dataclass(frozen=True)
class AttackConfig:
    """Budgets and schedule for one attack.

    `eps_f`/`eps_b` bound the foreground/background perturbation under
    `norm`; `lam` weights the salience term of the objective. Step sizes
    default to 2*eps/steps per region. `pgd_attack` reads its single budget
    from `eps_f`.
    """

    norm: str = "l2"
    eps_f: float = 0.5
    eps_b: float = 2.5
    lam: float = 0.0
    steps: int = 20
    alpha_f: float | None = None
    alpha_b: float | None = None
    random_start: bool = True
    seed: int = 0
    salience_method: str = "dog"

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        for name in ("eps_f", "eps_b", "lam"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        for name in ("alpha_f", "alpha_b"):
            value = getattr(self, name)
            if value is not None and (not np.isfinite(value) or value <= 0):
                raise ValueError(f"{name} must be positive, got {value}")

    @property
    def step_f(self) -> float:
        return self.alpha_f if self.alpha_f is not None else 2.0 * self.eps_f / self.steps

    @property
    def step_b(self) -> float:
        return self.alpha_b if self.alpha_b is not None else 2.0 * self.eps_b / self.steps


# ---------------------------------------------------------------------------
# projections and step directions

def _l2_norms(v: np.ndarray) -> np.ndarray:
    """Per-sample l2 norms over all but the leading axis, in float64."""
    flat = v.reshape(v.shape[0], -1).astype(np.float64)
    return np.sqrt((flat * flat).sum(axis=1))


def project(v: np.ndarray, eps: float, norm: str) -> np.ndarray:
    """Project one tensor onto the eps-ball: clamp for linf, rescale for l2."""
    if eps < 0:
        raise ValueError(f"projection budget must be >= 0, got {eps}")
    if norm == "linf":
        return np.clip(v, -eps, eps).astype(v.dtype, copy=False)
    if norm != "l2":
        raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")
    nrm = float(np.sqrt((v.astype(np.float64) ** 2).sum()))
    if nrm <= eps * (1.0 + _PROJECT_SLACK):
        return v
    return (v.astype(np.float64) * (eps / nrm)).astype(v.dtype)


def _project_batch(v: np.ndarray, eps: float, norm: str) -> np.ndarray:
    if eps < 0:
        raise ValueError(f"projection budget must be >= 0, got {eps}")
    if norm == "linf":
        return np.clip(v, -eps, eps).astype(np.float32, copy=False)
    norms = _l2_norms(v)
    factors = np.where(norms > eps * (1.0 + _PROJECT_SLACK), eps / np.maximum(norms, 1e-300), 1.0)
    out = v.astype(np.float64) * factors.reshape(-1, 1, 1, 1)
    return out.astype(np.float32)


def steepest_dir(g: np.ndarray, norm: str) -> np.ndarray:
    """Unit ascent step under the norm: sign for linf, g/||g|| for l2.

    A (numerically) zero gradient maps to the zero direction.
    """
    if norm == "linf":
        return np.sign(g).astype(g.dtype, copy=False)
    if norm != "l2":
        raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")
    nrm = float(np.sqrt((g.astype(np.float64) ** 2).sum()))
    if nrm < _ZERO_GRAD_EPS:
        return np.zeros_like(g)
    return (g.astype(np.float64) / nrm).astype(g.dtype)


def _steepest_batch(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g).astype(np.float32, copy=False)
    norms = _l2_norms(g)
    factors = np.where(norms < _ZERO_GRAD_EPS, 0.0, 1.0 / np.maximum(norms, _ZERO_GRAD_EPS))
    return (g.astype(np.float64) * factors.reshape(-1, 1, 1, 1)).astype(np.float32)


# ---------------------------------------------------------------------------
# batch promotion helpers

def _promote_images(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim != 4:
        raise T.ShapeError(f"expected CHW or NCHW images, got {arr.shape}")
    return arr, False


def _promote_labels(y, n: int) -> np.ndarray:
    arr = np.asarray(y, dtype=np.int64).reshape(-1)
    if arr.shape[0] != n:
        raise T.ShapeError(f"{n} images but {arr.shape[0]} labels")
    return arr


def _stack_masks(masks, n: int, hw: tuple[int, int]) -> np.ndarray:
    """Normalize MaskPair / sequence / array input to an (N,H,W) foreground array."""
    if isinstance(masks, MaskPair):
        fg = np.broadcast_to(masks.foreground, (n,) + masks.foreground.shape)
    elif isinstance(masks, (list, tuple)):
        if len(masks) != n:
            raise T.ShapeError(f"{n} images but {len(masks)} masks")
        fg = np.stack([m.foreground if isinstance(m, MaskPair) else np.asarray(m) for m in masks])
    else:
        fg = np.asarray(masks, dtype=np.float32)
        if fg.ndim == 2:
            fg = np.broadcast_to(fg, (n,) + fg.shape)
    fg = np.ascontiguousarray(fg, dtype=np.float32)
    if fg.shape != (n,) + hw:
        raise T.ShapeError(f"masks shape {fg.shape} does not match images {(n,) + hw}")
    return fg


def _sample_unit_ball(rng: np.random.Generator, shape: tuple[int, ...], norm: str) -> np.ndarray:
    """Uniform draw from the unit ball; scaling by eps keeps starts proportional."""
    if norm == "linf":
        return rng.uniform(-1.0, 1.0, size=shape)
    v = rng.standard_normal(shape)
    nrm = np.sqrt((v * v).sum())
    if nrm < _ZERO_GRAD_EPS:
        return np.zeros(shape)
    radius = rng.random() ** (1.0 / v.size)
    return v * (radius / nrm)


def _init_delta(
    x: np.ndarray, fg: np.ndarray, cfg: AttackConfig, rng: np.random.Generator
) -> np.ndarray:
    n = x.shape[0]
    if not cfg.random_start:
        return np.zeros_like(x)
    delta = np.empty_like(x)
    shape = x.shape[1:]
    for i in range(n):
        df = cfg.eps_f * _sample_unit_ball(rng, shape, cfg.norm)
        db = cfg.eps_b * _sample_unit_ball(rng, shape, cfg.norm)
        mask = fg[i][None]
        delta[i] = (df * mask + db * (1.0 - mask)).astype(np.float32)
    return (np.clip(x + delta, 0.0, 1.0) - x).astype(np.float32)


def init_dual(x, masks, cfg: AttackConfig) -> np.ndarray:
    """Feasible random start (or zeros); deterministic for a fixed cfg.seed."""
    xb, squeeze = _promote_images(x)
    fg = _stack_masks(masks, xb.shape[0], xb.shape[2:])
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    delta = _init_delta(xb, fg, cfg, rng)
    return delta[0] if squeeze else delta


# ---------------------------------------------------------------------------
# objective

def _objective(
    model: ClassifierParams,
    x: np.ndarray,
    y: np.ndarray,
    delta: T.Tensor,
    fg: np.ndarray,
    cfg: AttackConfig,
    fixnet: FixationNet | None,
    check_range: bool,
) -> tuple[T.Tensor, T.Tensor]:
    """Taped J = sum_i [ CE_i + lam * FS_i ]; returns (scalar J, per-sample J)."""
    adv = T.add(T.Tensor(x), delta)
    logits = predict_logits(model, adv)
    per = T.softmax_cross_entropy(logits, y)
    if cfg.lam != 0.0:
        fs = foreground_score(
            adv, fg, method=cfg.salience_method, fixnet=fixnet, check_range=check_range
        )
        per = T.add(per, T.scale(fs, cfg.lam))
    return T.reduce_sum(per), per


def objective_value(model, x, y, delta, masks, cfg: AttackConfig, fixnet=None) -> np.ndarray:
    """Per-sample attack objective J at x + delta (no gradients)."""
    xb, squeeze = _promote_images(x)
    yb = _promote_labels(y, xb.shape[0])
    db = np.asarray(delta, dtype=np.float32).reshape(xb.shape)
    fg = _stack_masks(masks, xb.shape[0], xb.shape[2:])
    _, per = _objective(model, xb, yb, T.Tensor(db), fg, cfg, fixnet, check_range=False)
    return per.data[0] if squeeze else per.data


def objective_grad(
    model, x, y, delta, masks, cfg: AttackConfig, fixnet=None, check_range: bool = True
) -> np.ndarray:
    """Gradient of the attack objective with respect to the perturbation."""
    xb, squeeze = _promote_images(x)
    yb = _promote_labels(y, xb.shape[0])
    db = np.asarray(delta, dtype=np.float32).reshape(xb.shape)
    fg = _stack_masks(masks, xb.shape[0], xb.shape[2:])
    delta_t = T.Tensor(db)
    with T.Tape() as tape:
        total, _ = _objective(model, xb, yb, delta_t, fg, cfg, fixnet, check_range)
    grad = T.backward(tape, total)[delta_t].data
    return grad[0] if squeeze else grad


def smoothed_objective_grad(
    model,
    x,
    y,
    delta,
    masks,
    cfg: AttackConfig,
    sigma: float,
    m: int,
    rng: np.random.Generator,
    fixnet=None,
) -> np.ndarray:
    """Mean objective gradient over m Gaussian noise draws (noise std sigma).

    The noise enters only the gradient estimate, never the perturbation.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if m < 1:
        raise ValueError(f"sample count must be >= 1, got {m}")
    xb, squeeze = _promote_images(x)
    if sigma == 0.0:
        grad = objective_grad(model, xb, y, delta, masks, cfg, fixnet)
        return grad[0] if squeeze else grad
    acc = np.zeros(xb.shape, dtype=np.float64)
    for _ in range(m):
        eta = rng.standard_normal(xb.shape) * sigma
        shifted = (xb.astype(np.float64) + eta).astype(np.float32)
        acc += objective_grad(model, shifted, y, delta, masks, cfg, fixnet, check_range=False)
    grad = (acc / m).astype(np.float32)
    return grad[0] if squeeze else grad


# ---------------------------------------------------------------------------
# the dual-perturbation iteration

def _apply_step(
    x: np.ndarray, delta: np.ndarray, grad: np.ndarray, fg: np.ndarray, cfg: AttackConfig
) -> np.ndarray:
    """Split by region, make a normalized ascent step, project each region,
    merge, and pull the result back inside the pixel box."""
    mask_f = fg[:, None]
    mask_b = 1.0 - mask_f
    g_f = _steepest_batch(mask_f * grad, cfg.norm)
    g_b = _steepest_batch(mask_b * grad, cfg.norm)
    d_f = _project_batch(
        (delta * mask_f + np.float32(cfg.step_f) * g_f).astype(np.float32), cfg.eps_f, cfg.norm
    )
    d_b = _project_batch(
        (delta * mask_b + np.float32(cfg.step_b) * g_b).astype(np.float32), cfg.eps_b, cfg.norm
    )
    merged = d_f + d_b
    merged = (np.clip(x + merged, 0.0, 1.0) - x).astype(np.float32)
    return _project_batch(merged * mask_f, cfg.eps_f, cfg.norm) + _project_batch(
        merged * mask_b, cfg.eps_b, cfg.norm
    )


def dual_step(model, x, y, delta, masks, cfg: AttackConfig, fixnet=None) -> np.ndarray:
    """One iteration: taped objective gradient, then the masked update."""
    xb, squeeze = _promote_images(x)
    yb = _promote_labels(y, xb.shape[0])
    db = np.asarray(delta, dtype=np.float32).reshape(xb.shape)
    fg = _stack_masks(masks, xb.shape[0], xb.shape[2:])
    grad = objective_grad(model, xb, yb, db, fg, cfg, fixnet)
    out = _apply_step(xb, db, grad, fg, cfg)
    return out[0] if squeeze else out


def dual_attack(model, x, y, masks, cfg: AttackConfig, fixnet=None) -> np.ndarray:
    """K dual-perturbation steps from the random start; returns x + delta.

    The final iterate is returned (no best-loss tracking) and both region
    budgets plus the pixel box hold on the output.
    """
    xb, squeeze = _promote_images(x)
    yb = _promote_labels(y, xb.shape[0])
    fg = _stack_masks(masks, xb.shape[0], xb.shape[2:])
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    delta = _init_delta(xb, fg, cfg, rng)
    for _ in range(cfg.steps):
        grad = objective_grad(model, xb, yb, delta, fg, cfg, fixnet)
        delta = _apply_step(xb, delta, grad, fg, cfg)
    adv = np.clip(xb + delta, 0.0, 1.0).astype(np.float32)
    return adv[0] if squeeze else adv


def pgd_attack(model, x, y, cfg: AttackConfig) -> np.ndarray:
    """Plain PGD: the dual attack with an all-foreground partition and no
    salience term; the budget is cfg.eps_f."""
    xb, squeeze = _promote_images(x)
    fg = np.ones((xb.shape[0],) + xb.shape[2:], dtype=np.float32)
    adv = dual_attack(model, xb, y, fg, replace(cfg, lam=0.0))
    return adv[0] if squeeze else adv


def rs_dual_attack(
    model, x, y, masks, cfg: AttackConfig, sigma: float, m: int, fixnet=None
) -> np.ndarray:
    """Dual attack against a smoothed classifier: each step uses the mean
    gradient over m Gaussian draws, resampled every iteration. sigma = 0
    reduces exactly to dual_attack."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if m < 1:
        raise ValueError(f"sample count must be >= 1, got {m}")
    xb, squeeze = _promote_images(x)
    yb = _promote_labels(y, xb.shape[0])
    fg = _stack_masks(masks, xb.shape[0], xb.shape[2:])
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    delta = _init_delta(xb, fg, cfg, rng)
    for _ in range(cfg.steps):
        grad = smoothed_objective_grad(model, xb, yb, delta, fg, cfg, sigma, m, rng, fixnet)
        delta = _apply_step(xb, delta, grad, fg, cfg)
    adv = np.clip(xb + delta, 0.0, 1.0).astype(np.float32)
    return adv[0] if squeeze else adv


# ---------------------------------------------------------------------------
# sparse-pixel baseline

def jsma_attack(
    model, x, y, budget: int, theta_step: float = 1.0
) -> tuple[np.ndarray, int]:
    """Greedy untargeted sparse attack: repeatedly move the feasible
    pixel-channel with the largest loss gradient by theta_step toward higher
    loss, touching at most `budget` distinct pixel positions.

    Returns (perturbed image, number of modified pixel positions).
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if not 0.0 < theta_step <= 1.0:
        raise ValueError(f"theta_step must lie in (0, 1], got {theta_step}")
    adv = np.array(x, dtype=np.float32, copy=True)
    if adv.ndim != 3:
        raise T.ShapeError(f"jsma_attack expects one CHW image, got {adv.shape}")
    label = int(y)
    c, h, w = adv.shape
    touched: set[tuple[int, int]] = set()
    stuck = np.zeros(adv.shape, dtype=bool)
    max_iter = 2 * budget * c * int(np.ceil(1.0 / theta_step)) + 8
    for _ in range(max_iter):
        if predict_class(model, adv[None])[0] != label:
            break
        xt = T.Tensor(adv[None])
        with T.Tape() as tape:
            loss = T.reduce_sum(T.softmax_cross_entropy(predict_logits(model, xt), [label]))
        grad = T.backward(tape, loss)[xt].data[0]
        direction = np.sign(grad)
        feasible = ((direction > 0) & (adv < 1.0)) | ((direction < 0) & (adv > 0.0))
        feasible &= ~stuck
        if len(touched) >= budget:
            allowed = np.zeros((h, w), dtype=bool)
            for pos in touched:
                allowed[pos] = True
            feasible &= allowed[None]
        magnitude = np.abs(grad)
        magnitude[~feasible] = -1.0
        ci, hi, wi = np.unravel_index(int(np.argmax(magnitude)), adv.shape)
        if magnitude[ci, hi, wi] <= 0.0:
            break
        moved = np.float32(np.clip(adv[ci, hi, wi] + direction[ci, hi, wi] * theta_step, 0.0, 1.0))
        if moved == adv[ci, hi, wi]:
            stuck[ci, hi, wi] = True
            continue
        adv[ci, hi, wi] = moved
        touched.add((int(hi), int(wi)))
    return adv, len(touched)
