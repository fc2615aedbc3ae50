"""Training procedures (clean, adversarial with PGD or dual-perturbation
inner attacks, Gaussian-augmented for smoothing) and smoothed prediction
with abstention.

All loops are deterministic given the config seed: the shuffle stream, the
noise stream, and the per-batch attack seeds are derived independently, so
a zero-budget attack or zero noise reduces bitwise to clean training.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.stats import binomtest

from . import tensor as T
from .attack import AttackConfig, dual_attack, pgd_attack
from .data import Dataset, DatasetError
from .model import (
    Architecture,
    ClassifierParams,
    adam_step,
    init_model,
    init_optimizer,
    predict_class,
    predict_logits,
)
from .salience import fixation_masks

__all__ = [
    "ABSTAIN",
    "TrainConfig",
    "SmoothedClassifier",
    "default_architecture",
    "accuracy",
    "clean_train",
    "adv_train",
    "rs_train",
    "smoothed_votes",
    "vote_decision",
    "rs_predict",
    "smoothed_accuracy",
]

ABSTAIN = -1

ProgressFn = Callable[[int, float, float], None]  # (epoch, mean loss, train acc)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.1
    decay_epochs: tuple[int, ...] = ()
    attack: str = "none"  # none | pgd | dual
    attack_cfg: AttackConfig | None = None
    seed: int = 0
    arch: Architecture | None = None  # None derives the reference net from the data

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.attack not in ("none", "pgd", "dual"):
            raise ValueError(f"attack must be none/pgd/dual, got {self.attack!r}")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError("decay_epochs must be strictly increasing")


def default_architecture(dataset: Dataset) -> Architecture:
    c, h, w = dataset.images.shape[1:]
    return Architecture(in_shape=(c, h, w), classes=dataset.classes)


def accuracy(params: ClassifierParams, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    """Plain top-1 accuracy, evaluated in deterministic index order."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels).reshape(-1)
    hits = 0
    for start in range(0, len(labels), batch_size):
        chunk = images[start : start + batch_size]
        preds = predict_class(params, chunk)
        hits += int((np.asarray(preds) == labels[start : start + len(preds)]).sum())
    return hits / len(labels)


def _train_loop(
    dataset: Dataset,
    cfg: TrainConfig,
    transform=None,
    progress: ProgressFn | None = None,
) -> ClassifierParams:
    if len(dataset) == 0:
        raise DatasetError("cannot train on an empty dataset")
    arch = cfg.arch if cfg.arch is not None else default_architecture(dataset)
    params = init_model(arch, cfg.seed)
    state = init_optimizer(params, lr=cfg.lr)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    n = len(dataset)
    for epoch in range(cfg.epochs):
        drops = sum(1 for at in cfg.decay_epochs if epoch >= at)
        state = replace(state, lr=cfg.lr * cfg.lr_decay**drops)
        order = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            if transform is not None:
                xb = transform(params, xb, yb, idx, epoch, bi)
            xt = T.Tensor(xb)
            with T.Tape() as tape:
                logits = predict_logits(params, xt)
                ce = T.softmax_cross_entropy(logits, yb)
                loss = T.scale(T.reduce_sum(ce), 1.0 / idx.size)
            grads = T.backward(tape, loss)
            params, state = adam_step(params, grads, state)
            losses.append(loss.item())
        if progress is not None:
            progress(epoch, float(np.mean(losses)), accuracy(params, dataset.images, dataset.labels))
    return params


def clean_train(dataset: Dataset, cfg: TrainConfig, progress: ProgressFn | None = None) -> ClassifierParams:
    """Minibatch Adam on the cross-entropy loss of the raw images."""
    return _train_loop(dataset, cfg, transform=None, progress=progress)


def _batch_attack_seed(base: int, epoch: int, batch_index: int) -> int:
    seq = np.random.SeedSequence(entropy=base, spawn_key=(epoch, batch_index))
    return int(seq.generate_state(1)[0])


def adv_train(dataset: Dataset, cfg: TrainConfig, progress: ProgressFn | None = None) -> ClassifierParams:
    """Adversarial training: each batch is replaced by attack examples crafted
    against the current parameters before the optimizer step.

    Dual training partitions every image once from its clean pixels (ground
    truth when present, fixation masks otherwise) and caches the partition
    across epochs.
    """
    if cfg.attack not in ("pgd", "dual"):
        raise ValueError("adv_train needs attack = pgd or dual")
    if cfg.attack_cfg is None:
        raise ValueError("adv_train needs an embedded AttackConfig")
    acfg = cfg.attack_cfg
    mask_cache: dict[int, np.ndarray] = {}

    def fg_rows(idx) -> np.ndarray:
        rows = []
        for i in idx:
            i = int(i)
            row = mask_cache.get(i)
            if row is None:
                if dataset.masks is not None:
                    row = dataset.masks[i]
                else:
                    row = fixation_masks(dataset.images[i], method=acfg.salience_method).foreground
                mask_cache[i] = row
            rows.append(row)
        return np.stack(rows)

    def transform(params, xb, yb, idx, epoch, bi):
        cfg_b = replace(acfg, seed=_batch_attack_seed(acfg.seed, epoch, bi))
        if cfg.attack == "pgd":
            return pgd_attack(params, xb, yb, cfg_b)
        return dual_attack(params, xb, yb, fg_rows(idx), cfg_b)

    return _train_loop(dataset, cfg, transform=transform, progress=progress)


def rs_train(dataset: Dataset, cfg: TrainConfig, sigma: float,
             progress: ProgressFn | None = None) -> ClassifierParams:
    """Clean training with i.i.d. Gaussian noise N(0, sigma^2) added to each
    batch image, clamped back to [0,1]. sigma = 0 is bitwise clean_train."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    noise_rng = np.random.default_rng(
        np.random.PCG64(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0x6E,)))
    )

    def transform(params, xb, yb, idx, epoch, bi):
        if sigma == 0.0:
            return xb
        noise = noise_rng.standard_normal(xb.shape) * sigma
        return np.clip(xb.astype(np.float64) + noise, 0.0, 1.0).astype(np.float32)

    return _train_loop(dataset, cfg, transform=transform, progress=progress)


# ---------------------------------------------------------------------------
# smoothed prediction

@dataclass
class SmoothedClassifier:
    params: ClassifierParams
    sigma: float
    n: int = 100
    abstain_alpha: float = 0.001

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not 0.0 < self.abstain_alpha < 1.0:
            raise ValueError("abstain_alpha must lie in (0, 1)")


def smoothed_votes(
    smoothed: SmoothedClassifier, x, rng: np.random.Generator, batch_size: int = 256
) -> np.ndarray:
    """Class counts over n noise-corrupted copies of one image."""
    x = np.asarray(x, dtype=np.float32)
    counts = np.zeros(smoothed.params.arch.classes, dtype=np.int64)
    remaining = smoothed.n
    while remaining > 0:
        take = min(batch_size, remaining)
        remaining -= take
        copies = np.broadcast_to(x, (take,) + x.shape).astype(np.float64)
        if smoothed.sigma > 0.0:
            copies = copies + rng.standard_normal(copies.shape) * smoothed.sigma
        preds = predict_class(smoothed.params, copies.astype(np.float32))
        counts += np.bincount(preds, minlength=counts.size)
    return counts


def vote_decision(counts: np.ndarray, alpha: float) -> int:
    """Majority class if an exact two-sided binomial test on the top-two
    counts rejects a fair split at level alpha; ABSTAIN otherwise."""
    order = np.argsort(-np.asarray(counts), kind="stable")
    top, runner = int(order[0]), int(order[1])
    m1, m2 = int(counts[top]), int(counts[runner])
    pvalue = binomtest(m1, m1 + m2, 0.5).pvalue
    return top if pvalue < alpha else ABSTAIN


def rs_predict(smoothed: SmoothedClassifier, x, rng: np.random.Generator | None = None) -> int:
    """Majority vote over noise-corrupted copies; n = 1 never abstains."""
    if rng is None:
        rng = np.random.default_rng()
    counts = smoothed_votes(smoothed, x, rng)
    if smoothed.n == 1:
        return int(np.argmax(counts))
    return vote_decision(counts, smoothed.abstain_alpha)


def smoothed_accuracy(
    smoothed: SmoothedClassifier, images, labels, rng: np.random.Generator
) -> float:
    """Accuracy of smoothed prediction; an abstention counts as incorrect."""
    labels = np.asarray(labels).reshape(-1)
    hits = 0
    for i in range(len(labels)):
        if rs_predict(smoothed, images[i], rng) == int(labels[i]):
            hits += 1
    return hits / len(labels)
