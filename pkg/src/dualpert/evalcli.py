"""Experiment drivers and the command-line entry point.

Subcommands: gen-data, train, attack, eval, sweep, transfer, gradviz.
Every CSV is self-describing (the resolved configuration rides along as
'#'-prefixed comment lines) and byte-identical across re-runs of the same
config and seed; wall-clock timing is only written when --timing is set.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attack import AttackConfig, dual_attack, jsma_attack, pgd_attack, rs_dual_attack
from .data import (
    Dataset,
    DatasetError,
    SynthConfig,
    gen_synthetic,
    load_dataset,
    save_dataset,
    save_tensor,
)
from .defense import (
    SmoothedClassifier,
    TrainConfig,
    accuracy,
    adv_train,
    clean_train,
    rs_train,
    smoothed_accuracy,
)
from .model import ClassifierParams, load_params, predict_logits, save_params
from .netpbm import write_pgm, write_ppm
from .salience import fixation_masks, foreground_score

__all__ = [
    "MetricsRow",
    "AttackPlan",
    "eval_accuracy",
    "sweep",
    "transfer_matrix",
    "gradviz",
    "gradient_concentration",
    "write_csv",
    "cli_main",
    "main",
]

CSV_FIELDS = ("id", "model", "attack", "axis", "value", "clean_acc", "adv_acc", "mean_fs", "seconds")

SWEEP_AXES = ("eps_f", "eps_b", "eps", "lam", "sigma", "n")


class UsageError(Exception):
    pass


@dataclass
class MetricsRow:
    id: str
    model: str
    attack: str = ""
    axis: str = ""
    value: float | None = None
    clean_acc: float = 0.0
    adv_acc: float | None = None
    mean_fs: float | None = None
    seconds: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.clean_acc <= 1.0:
            raise ValueError(f"clean accuracy out of range: {self.clean_acc}")
        if self.adv_acc is not None and not 0.0 <= self.adv_acc <= 1.0:
            raise ValueError(f"adversarial accuracy out of range: {self.adv_acc}")

    def as_csv(self) -> list[str]:
        return [
            self.id,
            self.model,
            self.attack,
            self.axis,
            _fmt(self.value),
            _fmt(self.clean_acc),
            _fmt(self.adv_acc),
            _fmt(self.mean_fs),
            _fmt(self.seconds),
        ]


@dataclass(frozen=True)
class AttackPlan:
    """What to run against a model during evaluation."""

    kind: str  # pgd | dual | rs_dual | jsma
    cfg: AttackConfig = AttackConfig()
    sigma: float = 0.25  # rs_dual only
    samples: int = 8  # rs_dual gradient draws
    budget: int = 51  # jsma: max pixel positions
    theta: float = 1.0  # jsma step
    mask_source: str = "auto"  # auto | gt | fixation

    def __post_init__(self):
        if self.kind not in ("pgd", "dual", "rs_dual", "jsma"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.mask_source not in ("auto", "gt", "fixation"):
            raise ValueError(f"unknown mask source {self.mask_source!r}")

    @property
    def name(self) -> str:
        return self.kind


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_csv(path, fieldnames, rows, config: dict) -> None:
    """Header + rows preceded by the resolved config as '#' comment lines."""
    lines = [f"# {key}={config[key]}" for key in sorted(config)]
    lines.append(",".join(fieldnames))
    for row in rows:
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


# ---------------------------------------------------------------------------
# mask plumbing

def _foreground_rows(dataset: Dataset, indices, source: str) -> np.ndarray:
    if source == "gt" and dataset.masks is None:
        raise DatasetError("dual attack requested ground-truth masks, dataset has none")
    use_gt = source in ("auto", "gt") and dataset.masks is not None
    rows = []
    for i in indices:
        if use_gt:
            rows.append(dataset.masks[int(i)])
        else:
            rows.append(fixation_masks(dataset.images[int(i)]).foreground)
    return np.stack(rows)


def _craft(plan: AttackPlan, params: ClassifierParams, dataset: Dataset,
           indices: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Adversarial images for the given rows plus the masks used (dual kinds)."""
    adv_chunks = []
    fg_chunks = []
    for start in range(0, len(indices), 64):
        idx = indices[start : start + 64]
        xb = dataset.images[idx]
        yb = dataset.labels[idx]
        if plan.kind == "pgd":
            adv_chunks.append(pgd_attack(params, xb, yb, plan.cfg))
        elif plan.kind == "jsma":
            adv_chunks.append(
                np.stack([jsma_attack(params, x, y, plan.budget, plan.theta)[0] for x, y in zip(xb, yb)])
            )
        else:
            fg = _foreground_rows(dataset, idx, plan.mask_source)
            fg_chunks.append(fg)
            if plan.kind == "dual":
                adv_chunks.append(dual_attack(params, xb, yb, fg, plan.cfg))
            else:
                adv_chunks.append(
                    rs_dual_attack(params, xb, yb, fg, plan.cfg, plan.sigma, plan.samples)
                )
    adv = np.concatenate(adv_chunks)
    fg = np.concatenate(fg_chunks) if fg_chunks else None
    return adv, fg


def eval_accuracy(
    params: ClassifierParams,
    dataset: Dataset,
    plan: AttackPlan | None = None,
    model_name: str = "model",
    row_id: str = "eval",
    timing: bool = False,
) -> MetricsRow:
    """Clean accuracy, plus adversarial accuracy (and mean foreground score
    for dual attacks) when a plan is supplied."""
    started = time.perf_counter()
    clean = accuracy(params, dataset.images, dataset.labels)
    adv_acc = None
    mean_fs = None
    attack_name = ""
    if plan is not None:
        attack_name = plan.name
        indices = np.arange(len(dataset))
        adv, fg = _craft(plan, params, dataset, indices)
        adv_acc = accuracy(params, adv, dataset.labels)
        if fg is not None:
            scores = foreground_score(adv, fg, method=plan.cfg.salience_method)
            mean_fs = float(np.mean(scores.data))
    seconds = time.perf_counter() - started if timing else None
    return MetricsRow(
        id=row_id,
        model=model_name,
        attack=attack_name,
        clean_acc=clean,
        adv_acc=adv_acc,
        mean_fs=mean_fs,
        seconds=seconds,
    )


def _value_seed(base: int, value_index: int) -> int:
    seq = np.random.SeedSequence(entropy=base, spawn_key=(value_index,))
    return int(seq.generate_state(1)[0])


def sweep(
    models: list[tuple[str, ClassifierParams]],
    dataset: Dataset,
    axis: str,
    values,
    plan: AttackPlan,
    timing: bool = False,
    prediction_n: int = 100,
    prediction_sigma: float = 0.25,
) -> list[MetricsRow]:
    """One row per (model, value) along the axis; random starts are shared
    across models at each value so the comparison is paired.

    sigma / n sweep the smoothed-prediction parameters on the given models
    (no attack); the other axes sweep the attack itself.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if len(values) == 0:
        raise ValueError("sweep needs at least one value")
    rows: list[MetricsRow] = []
    for vi, value in enumerate(values):
        seed_v = _value_seed(plan.cfg.seed, vi)
        for name, params in models:
            started = time.perf_counter()
            if axis in ("sigma", "n"):
                sigma = value if axis == "sigma" else prediction_sigma
                copies = prediction_n if axis == "sigma" else int(value)
                smoothed = SmoothedClassifier(params, sigma=sigma, n=copies)
                rng = np.random.default_rng(np.random.PCG64(seed_v))
                clean = smoothed_accuracy(smoothed, dataset.images, dataset.labels, rng)
                row = MetricsRow(
                    id=f"sweep-{axis}",
                    model=name,
                    attack="",
                    axis=axis,
                    value=float(value),
                    clean_acc=clean,
                )
            else:
                cfg = plan.cfg
                if axis == "eps":
                    cfg = replace(cfg, eps_f=float(value), eps_b=float(value), seed=seed_v)
                    plan_v = replace(plan, kind="pgd", cfg=cfg)
                else:
                    cfg = replace(cfg, **{axis: float(value)}, seed=seed_v)
                    plan_v = replace(plan, cfg=cfg)
                row = eval_accuracy(
                    params, dataset, plan_v, model_name=name, row_id=f"sweep-{axis}"
                )
                row = replace_row(row, axis=axis, value=float(value))
            if timing:
                row.seconds = time.perf_counter() - started
            rows.append(row)
    return rows


def replace_row(row: MetricsRow, **kw) -> MetricsRow:
    data = row.__dict__ | kw
    return MetricsRow(**data)


def transfer_matrix(
    models: list[tuple[str, ClassifierParams]],
    dataset: Dataset,
    plan: AttackPlan,
) -> tuple[list[str], np.ndarray]:
    """matrix[source, target] = target accuracy on examples crafted against
    source; higher numbers mean weaker transfer."""
    if len(models) < 2:
        raise ValueError("transfer needs at least two models")
    names = [name for name, _ in models]
    indices = np.arange(len(dataset))
    matrix = np.zeros((len(models), len(models)), dtype=np.float64)
    for si, (_, source) in enumerate(models):
        adv, _ = _craft(plan, source, dataset, indices)
        for ti, (_, target) in enumerate(models):
            matrix[si, ti] = accuracy(target, adv, dataset.labels)
    return names, matrix


# ---------------------------------------------------------------------------
# gradient visualization

def _input_gradients(params: ClassifierParams, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-image loss gradient magnitude, summed over channels: (N,H,W)."""
    out = []
    for start in range(0, len(labels), 64):
        xb = images[start : start + 64]
        yb = labels[start : start + 64]
        xt = T.Tensor(xb)
        with T.Tape() as tape:
            ce = T.softmax_cross_entropy(predict_logits(params, xt), yb)
            loss = T.reduce_sum(ce)
        grad = T.backward(tape, loss)[xt].data
        out.append(np.abs(grad).sum(axis=1))
    return np.concatenate(out)


def gradient_concentration(params: ClassifierParams, dataset: Dataset,
                           limit: int | None = None) -> np.ndarray:
    """Fraction of input-gradient mass on ground-truth foreground pixels."""
    if dataset.masks is None:
        raise DatasetError("gradient concentration needs ground-truth masks")
    count = len(dataset) if limit is None else min(limit, len(dataset))
    mags = _input_gradients(params, dataset.images[:count], dataset.labels[:count])
    fractions = np.zeros(count, dtype=np.float64)
    for i in range(count):
        total = mags[i].sum(dtype=np.float64)
        if total > 0:
            fractions[i] = float((mags[i] * dataset.masks[i]).sum(dtype=np.float64) / total)
    return fractions


def _rescale_u8(arr: np.ndarray) -> np.ndarray:
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return np.full(arr.shape, 128, dtype=np.uint8)
    scaled = (arr - lo) / (hi - lo) * 255.0
    return np.rint(scaled).astype(np.uint8)


def gradviz(params: ClassifierParams, dataset: Dataset, out_dir, count: int = 8) -> list[Path]:
    """Write |loss gradient| maps as PGM plus the inputs as PPM, with a CSV
    of the per-image foreground-concentration statistic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count = min(count, len(dataset))
    mags = _input_gradients(params, dataset.images[:count], dataset.labels[:count])
    written: list[Path] = []
    stats_rows = []
    for i in range(count):
        grad_path = out / f"{i:03d}_grad.pgm"
        write_pgm(grad_path, _rescale_u8(mags[i]))
        rgb = np.rint(dataset.images[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        input_path = out / f"{i:03d}_input.ppm"
        write_ppm(input_path, rgb)
        written.extend([grad_path, input_path])
        if dataset.masks is not None:
            total = mags[i].sum(dtype=np.float64)
            frac = float((mags[i] * dataset.masks[i]).sum(dtype=np.float64) / total) if total > 0 else 0.0
        else:
            frac = None
        stats_rows.append([str(i), str(int(dataset.labels[i])), _fmt(frac)])
    write_csv(out / "gradviz.csv", ("index", "label", "fg_fraction"), stats_rows, {"count": count})
    written.append(out / "gradviz.csv")
    return written


# ---------------------------------------------------------------------------
# command line

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _strs(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _ints(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


# per-subcommand option tables: name -> (converter, default)
_GLOBAL = {
    "config": (str, None),
    "seed": (int, 0),
    "out": (str, "out"),
    "timing": (_bool, False),
}

_ATTACK_OPTS = {
    "norm": (str, "l2"),
    "eps_f": (float, 0.5),
    "eps_b": (float, 2.5),
    "lam": (float, 0.0),
    "steps": (int, 20),
    "alpha_f": (float, None),
    "alpha_b": (float, None),
    "random_start": (_bool, True),
    "sigma": (float, 0.25),
    "samples": (int, 8),
    "budget": (int, 51),
    "theta": (float, 1.0),
    "masks": (str, "auto"),
}

_COMMANDS: dict[str, dict] = {
    "gen-data": {
        "k": (int, 4),
        "n": (int, 400),
        "height": (int, 32),
        "width": (int, 32),
        "texture_amp": (float, 0.12),
        "separation": (float, 0.5),
    },
    "train": {
        "data": (str, None),
        "kind": (str, "clean"),
        "name": (str, None),
        "epochs": (int, 8),
        "batch": (int, 32),
        "lr": (float, 1e-3),
        "lr_decay": (float, 0.1),
        "decay_epochs": (_ints, []),
        **{k: v for k, v in _ATTACK_OPTS.items() if k not in ("budget", "theta", "samples", "masks")},
        "steps": (int, 10),
    },
    "attack": {
        "data": (str, None),
        "model": (str, None),
        "kind": (str, "dual"),
        "count": (int, None),
        **_ATTACK_OPTS,
    },
    "eval": {
        "data": (str, None),
        "model": (str, None),
        "kind": (str, "none"),
        **_ATTACK_OPTS,
    },
    "sweep": {
        "data": (str, None),
        "models": (_strs, None),
        "kind": (str, "dual"),
        "axis": (str, None),
        "values": (_floats, None),
        "prediction_n": (int, 100),
        **_ATTACK_OPTS,
    },
    "transfer": {
        "data": (str, None),
        "models": (_strs, None),
        "kind": (str, "dual"),
        **_ATTACK_OPTS,
    },
    "gradviz": {
        "data": (str, None),
        "model": (str, None),
        "count": (int, 8),
    },
}

_USAGE = """usage: dualpert <command> [--config FILE] [--seed N] [--out DIR] [options]

commands:
  gen-data   write a synthetic dataset directory
  train      train a classifier (clean, pgd, dual, or rs)
  attack     craft adversarial examples and save them as a DPT batch
  eval       clean / adversarial accuracy of one model
  sweep      metric rows across an axis (eps_f, eps_b, eps, lam, sigma, n)
  transfer   cross-model transferability matrix
  gradviz    input-gradient visualizations (PGM/PPM) and statistics

options are command specific; any option can also be given as key=value
lines in the --config file ('#' starts a comment, flags win over the file).
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(message)


def _parse_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} does not exist")
    values: dict[str, str] = {}
    for raw in p.read_text().split("\n"):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"malformed config line {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve_options(command: str, argv: list[str]) -> dict:
    table = dict(_GLOBAL)
    table.update(_COMMANDS[command])
    parser = _Parser(prog=f"dualpert {command}", add_help=False)
    for name, (conv, _default) in table.items():
        if conv is _bool:
            parser.add_argument(f"--{name.replace('_', '-')}", type=str, default=None)
        else:
            parser.add_argument(f"--{name.replace('_', '-')}", type=str, default=None)
    ns = parser.parse_args(argv)
    file_values: dict[str, str] = {}
    if ns.config is not None:
        file_values = _parse_config_file(ns.config)
        unknown = set(file_values) - set(table)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for name, (conv, default) in table.items():
        raw = getattr(ns, name)
        if raw is None:
            raw = file_values.get(name)
        if raw is None:
            resolved[name] = default
        else:
            try:
                resolved[name] = conv(raw)
            except ValueError as exc:
                raise UsageError(f"bad value for --{name.replace('_', '-')}: {exc}")
    return resolved


def _require(opts: dict, *names: str) -> None:
    for name in names:
        if opts[name] is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _attack_config(opts: dict) -> AttackConfig:
    return AttackConfig(
        norm=opts["norm"],
        eps_f=opts["eps_f"],
        eps_b=opts["eps_b"],
        lam=opts["lam"],
        steps=opts["steps"],
        alpha_f=opts["alpha_f"],
        alpha_b=opts["alpha_b"],
        random_start=opts["random_start"],
        seed=opts["seed"],
    )


def _attack_plan(opts: dict, kind: str) -> AttackPlan:
    return AttackPlan(
        kind=kind,
        cfg=_attack_config(opts),
        sigma=opts["sigma"],
        samples=opts["samples"],
        budget=opts["budget"],
        theta=opts["theta"],
        mask_source=opts["masks"],
    )


def _load_dataset_checked(path: str) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"dataset path {p} does not exist")
    return load_dataset(p)


def _load_model_checked(path: str) -> ClassifierParams:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"model path {p} does not exist")
    return load_params(p)


def _public_config(opts: dict) -> dict:
    return {k: v for k, v in sorted(opts.items()) if k != "config" and v is not None}


def _cmd_gen_data(opts: dict) -> int:
    cfg = SynthConfig(
        classes=opts["k"],
        count=opts["n"],
        height=opts["height"],
        width=opts["width"],
        texture_amp=opts["texture_amp"],
        separation=opts["separation"],
        seed=opts["seed"],
    )
    dataset = gen_synthetic(cfg)
    save_dataset(opts["out"], dataset)
    print(f"wrote {len(dataset)} samples, {dataset.classes} classes -> {opts['out']}")
    return 0


def _cmd_train(opts: dict) -> int:
    _require(opts, "data")
    dataset = _load_dataset_checked(opts["data"])
    kind = opts["kind"]
    if kind not in ("clean", "pgd", "dual", "rs"):
        raise UsageError(f"train kind must be clean/pgd/dual/rs, got {kind!r}")
    tcfg = TrainConfig(
        epochs=opts["epochs"],
        batch_size=opts["batch"],
        lr=opts["lr"],
        lr_decay=opts["lr_decay"],
        decay_epochs=tuple(opts["decay_epochs"]),
        attack=kind if kind in ("pgd", "dual") else "none",
        attack_cfg=_attack_config(opts) if kind in ("pgd", "dual") else None,
        seed=opts["seed"],
    )
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    name = opts["name"] or kind
    log_rows: list[list[str]] = []

    def progress(epoch: int, loss: float, acc: float) -> None:
        log_rows.append([str(epoch), _fmt(loss), _fmt(acc)])
        print(f"epoch {epoch}: loss {loss:.4f} train-acc {acc:.3f}")

    if kind == "clean":
        params = clean_train(dataset, tcfg, progress)
    elif kind == "rs":
        params = rs_train(dataset, tcfg, opts["sigma"], progress)
    else:
        params = adv_train(dataset, tcfg, progress)
    model_path = out / f"{name}.dpt"
    save_params(model_path, params)
    write_csv(out / f"{name}_train_log.csv", ("epoch", "loss", "clean_acc"), log_rows, _public_config(opts))
    print(f"wrote {model_path}")
    return 0


def _cmd_attack(opts: dict) -> int:
    _require(opts, "data", "model")
    dataset = _load_dataset_checked(opts["data"])
    params = _load_model_checked(opts["model"])
    kind = opts["kind"].replace("-", "_")
    plan = _attack_plan(opts, kind)
    count = opts["count"] or len(dataset)
    subset = dataset.subset(np.arange(min(count, len(dataset))))
    row = eval_accuracy(params, subset, plan, model_name=Path(opts["model"]).stem,
                        row_id="attack", timing=opts["timing"])
    adv, _ = _craft(plan, params, subset, np.arange(len(subset)))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "adv_images.dpt", adv)
    write_csv(out / "attack.csv", CSV_FIELDS, [row.as_csv()], _public_config(opts))
    print(f"adversarial accuracy {row.adv_acc:.3f} -> {out / 'adv_images.dpt'}")
    return 0


def _cmd_eval(opts: dict) -> int:
    _require(opts, "data", "model")
    dataset = _load_dataset_checked(opts["data"])
    params = _load_model_checked(opts["model"])
    plan = None
    if opts["kind"] != "none":
        plan = _attack_plan(opts, opts["kind"].replace("-", "_"))
    row = eval_accuracy(params, dataset, plan, model_name=Path(opts["model"]).stem,
                        row_id="eval", timing=opts["timing"])
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", CSV_FIELDS, [row.as_csv()], _public_config(opts))
    adv = "" if row.adv_acc is None else f" adv {row.adv_acc:.3f}"
    print(f"clean {row.clean_acc:.3f}{adv} -> {out / 'metrics.csv'}")
    return 0


def _load_models(paths: list[str]) -> list[tuple[str, ClassifierParams]]:
    return [(Path(p).stem, _load_model_checked(p)) for p in paths]


def _cmd_sweep(opts: dict) -> int:
    _require(opts, "data", "models", "axis", "values")
    dataset = _load_dataset_checked(opts["data"])
    models = _load_models(opts["models"])
    plan = _attack_plan(opts, opts["kind"].replace("-", "_"))
    rows = sweep(
        models,
        dataset,
        opts["axis"],
        opts["values"],
        plan,
        timing=opts["timing"],
        prediction_n=opts["prediction_n"],
        prediction_sigma=opts["sigma"],
    )
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", CSV_FIELDS, [r.as_csv() for r in rows], _public_config(opts))
    print(f"{len(rows)} rows -> {out / 'sweep.csv'}")
    return 0


def _cmd_transfer(opts: dict) -> int:
    _require(opts, "data", "models")
    dataset = _load_dataset_checked(opts["data"])
    models = _load_models(opts["models"])
    plan = _attack_plan(opts, opts["kind"].replace("-", "_"))
    names, matrix = transfer_matrix(models, dataset, plan)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for si, source in enumerate(names):
        rows.append([source] + [_fmt(float(v)) for v in matrix[si]])
    write_csv(out / "transfer.csv", tuple(["source"] + names), rows, _public_config(opts))
    print(f"{len(names)}x{len(names)} matrix -> {out / 'transfer.csv'}")
    return 0


def _cmd_gradviz(opts: dict) -> int:
    _require(opts, "data", "model")
    dataset = _load_dataset_checked(opts["data"])
    params = _load_model_checked(opts["model"])
    written = gradviz(params, dataset, opts["out"], count=opts["count"])
    print(f"wrote {len(written)} files -> {opts['out']}")
    return 0


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "transfer": _cmd_transfer,
    "gradviz": _cmd_gradviz,
}


def cli_main(argv=None) -> int:
    """Entry point: 0 on success, 1 on usage errors, 2 on runtime errors."""
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(_USAGE, file=sys.stderr)
        return 1
    command, rest = argv[0], argv[1:]
    if command not in _COMMANDS:
        print(f"unknown command {command!r}\n\n{_USAGE}", file=sys.stderr)
        return 1
    try:
        opts = _resolve_options(command, rest)
    except UsageError as exc:
        print(f"usage error: {exc}\n\n{_USAGE}", file=sys.stderr)
        return 1
    try:
        return _DISPATCH[command](opts)
    except UsageError as exc:
        print(f"usage error: {exc}\n\n{_USAGE}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
