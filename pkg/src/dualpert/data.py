"""Synthetic labeled shape images with ground-truth masks, plus the DPT
tensor container used for every on-disk artifact.

DPT byte layout: magic "DPTF", version u32 LE, dtype u8 (1 = float32),
ndim u8, ndim extents as u32 LE, row-major float32 LE payload, CRC32 of
the payload as u32 LE.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "SynthConfig",
    "SHAPE_NAMES",
    "gen_synthetic",
    "split",
    "save_tensor",
    "load_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_dataset",
    "load_dataset",
    "DptError",
    "DptMagicError",
    "DptVersionError",
    "DptDtypeError",
    "DptLengthError",
    "DptChecksumError",
    "DatasetError",
]

DPT_MAGIC = b"DPTF"
DPT_VERSION = 1
DPT_DTYPE_F32 = 1


class DptError(ValueError):
    """Base class for malformed DPT containers."""


class DptMagicError(DptError):
    pass


class DptVersionError(DptError):
    pass


class DptDtypeError(DptError):
    pass


class DptLengthError(DptError):
    """Truncated file or extent/payload length mismatch."""


class DptChecksumError(DptError):
    pass


class DatasetError(ValueError):
    """Inconsistent dataset directory contents."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    payload = arr.astype("<f4", copy=False).tobytes()
    head = DPT_MAGIC + struct.pack("<IBB", DPT_VERSION, DPT_DTYPE_F32, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    return head + extents + payload + crc


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    """Parse one DPT blob; raises a specific DptError subclass on any defect."""
    if len(blob) < 10:
        raise DptLengthError(f"file too short for a DPT header ({len(blob)} bytes)")
    if blob[:4] != DPT_MAGIC:
        raise DptMagicError(f"bad magic {blob[:4]!r}")
    version, dtype, ndim = struct.unpack("<IBB", blob[4:10])
    if version != DPT_VERSION:
        raise DptVersionError(f"unsupported version {version}")
    if dtype != DPT_DTYPE_F32:
        raise DptDtypeError(f"unsupported dtype code {dtype}")
    pos = 10
    if len(blob) < pos + 4 * ndim:
        raise DptLengthError("truncated extent list")
    shape = struct.unpack(f"<{ndim}I", blob[pos : pos + 4 * ndim]) if ndim else ()
    pos += 4 * ndim
    count = 1
    for extent in shape:
        count *= extent
    if len(blob) != pos + 4 * count + 4:
        raise DptLengthError(
            f"payload length mismatch: extents {shape} need {4 * count} bytes, "
            f"file carries {len(blob) - pos - 4}"
        )
    payload = blob[pos : pos + 4 * count]
    (crc,) = struct.unpack("<I", blob[pos + 4 * count :])
    if crc != zlib.crc32(payload) & 0xFFFFFFFF:
        raise DptChecksumError("payload CRC32 mismatch")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# dataset

@dataclass
class Dataset:
    """Images in [0,1] (N,C,H,W), integer labels, optional foreground masks."""

    images: np.ndarray
    labels: np.ndarray
    classes: int
    masks: np.ndarray | None = None  # (N,H,W) binary, 1 = foreground

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be NCHW, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError(
                f"{self.images.shape[0]} images but {self.labels.shape} labels"
            )
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise DatasetError("image values must lie in [0, 1]")
        if (self.labels < 0).any() or (self.labels >= self.classes).any():
            raise DatasetError(f"labels must lie in [0, {self.classes})")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.float32)
            n, _, h, w = self.images.shape
            if self.masks.shape != (n, h, w):
                raise DatasetError(
                    f"masks shape {self.masks.shape} does not match images"
                )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        masks = None if self.masks is None else self.masks[indices]
        return Dataset(self.images[indices], self.labels[indices], self.classes, masks)


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 4
    count: int = 200
    height: int = 32
    width: int = 32
    texture_amp: float = 0.12
    separation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.classes <= 10:
            raise ValueError(f"classes must lie in [2, 10], got {self.classes}")
        if self.count < 2 * self.classes:
            raise ValueError("need at least two samples per class")
        if self.height < 4 or self.width < 4:
            raise ValueError("image extents too small")


# compact solid shapes first: low class counts then use the figures the
# salience proxy localizes best
SHAPE_NAMES = (
    "disk",
    "square",
    "triangle",
    "ring",
    "bar",
    "diamond",
    "cross",
    "wedge",
    "xmark",
    "frame",
)

# one foreground color family per class (jittered per sample); the
# background never depends on the label, so the class signal lives in the
# foreground region
CLASS_COLORS = np.array(
    [
        (0.90, 0.12, 0.12),  # red
        (0.12, 0.80, 0.18),  # green
        (0.15, 0.22, 0.90),  # blue
        (0.92, 0.86, 0.12),  # yellow
        (0.85, 0.12, 0.80),  # magenta
        (0.12, 0.82, 0.86),  # cyan
        (0.95, 0.55, 0.10),  # orange
        (0.50, 0.15, 0.85),  # purple
        (0.55, 0.90, 0.25),  # lime
        (0.60, 0.40, 0.20),  # brown
    ],
    dtype=np.float64,
)


def shape_mask(name: str, h: int, w: int, cy: float, cx: float, s: float) -> np.ndarray:
    """Boolean support of a shape on the pixel grid; the dataset's ground truth."""
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy = yy - cy
    dx = xx - cx
    r2 = dy * dy + dx * dx
    if name == "disk":
        return r2 <= s * s
    if name == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.8 * s
    if name == "triangle":
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= 0.5 * (dy + s))
    if name == "cross":
        arm = 0.34 * s
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= s)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= s)
        )
    if name == "ring":
        return (r2 <= s * s) & (r2 >= (0.55 * s) ** 2)
    if name == "bar":
        return (np.abs(dy) <= 0.35 * s) & (np.abs(dx) <= s)
    if name == "diamond":
        return np.abs(dy) + np.abs(dx) <= s
    if name == "xmark":
        arm = 0.4 * s
        box = np.maximum(np.abs(dy), np.abs(dx)) <= s
        return box & ((np.abs(dy - dx) <= arm) | (np.abs(dy + dx) <= arm))
    if name == "frame":
        m = np.maximum(np.abs(dy), np.abs(dx))
        return (m <= 0.9 * s) & (m >= 0.5 * s)
    if name == "wedge":
        return (r2 <= s * s) & (dy >= 0) & (dx >= 0)
    raise ValueError(f"unknown shape {name!r}")


def _texture(rng: np.random.Generator, h: int, w: int, amp: float) -> np.ndarray:
    """Low-frequency background texture: a sum of 2-4 random sinusoids."""
    yy, xx = np.meshgrid(
        np.arange(h, dtype=np.float64) / h,
        np.arange(w, dtype=np.float64) / w,
        indexing="ij",
    )
    waves = int(rng.integers(2, 5))
    tex = np.zeros((h, w), dtype=np.float64)
    for _ in range(waves):
        fy, fx = rng.uniform(0.7, 2.5, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        weight = rng.uniform(0.5, 1.0)
        tex += weight * np.sin(2.0 * np.pi * (fy * yy + fx * xx) + phase)
    return amp * tex / waves


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic shapes-over-texture dataset with exact foreground masks."""
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    h, w = cfg.height, cfg.width
    images = np.zeros((cfg.count, 3, h, w), dtype=np.float32)
    labels = np.zeros(cfg.count, dtype=np.int64)
    masks = np.zeros((cfg.count, h, w), dtype=np.float32)
    margin = 1.0
    for i in range(cfg.count):
        label = i % cfg.classes
        name = SHAPE_NAMES[label]
        mask = None
        for _ in range(100):
            s = max(rng.uniform(0.12, 0.22) * min(h, w), 3.0)
            if s + margin >= h - 1 - s - margin or s + margin >= w - 1 - s - margin:
                continue  # cannot place the support fully inside; resample
            cy = rng.uniform(s + margin, h - 1 - s - margin)
            cx = rng.uniform(s + margin, w - 1 - s - margin)
            candidate = shape_mask(name, h, w, cy, cx, s)
            if candidate.any():
                mask = candidate
                break
        if mask is None:
            raise ValueError(
                f"shape {name!r} does not fit a {h}x{w} grid after 100 retries"
            )
        base = rng.uniform(0.3, 0.7, size=3)
        tex = _texture(rng, h, w, cfg.texture_amp)
        img = np.empty((3, h, w), dtype=np.float64)
        jitter = rng.uniform(-0.08, 0.08, size=3)
        fg = np.clip(
            0.5 + 2.0 * cfg.separation * (CLASS_COLORS[label] - 0.5) + jitter, 0.02, 0.98
        )
        for c in range(3):
            img[c] = base[c] + tex
            img[c][mask] = fg[c]
        images[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
        labels[i] = label
        masks[i] = mask.astype(np.float32)
    return Dataset(images, labels, cfg.classes, masks)


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; every class keeps at least one sample on each side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    train_idx: list[int] = []
    test_idx: list[int] = []
    for c in range(dataset.classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size < 2:
            raise DatasetError(f"class {c} has {members.size} samples, needs >= 2")
        order = members[rng.permutation(members.size)]
        take = int(round(train_fraction * members.size))
        take = min(max(take, 1), members.size - 1)
        train_idx.extend(order[:take])
        test_idx.extend(order[take:])
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(test_idx))


# ---------------------------------------------------------------------------
# dataset directory I/O

def save_dataset(dirpath, dataset: Dataset) -> None:
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    save_tensor(root / "images.dpt", dataset.images)
    save_tensor(root / "labels.dpt", dataset.labels.astype(np.float32))
    if dataset.masks is not None:
        save_tensor(root / "masks.dpt", dataset.masks)
    meta = (
        "# synthetic dataset metadata\n"
        f"k={dataset.classes}\n"
        f"n={len(dataset)}\n"
    )
    (root / "meta.txt").write_text(meta, newline="\n")


def parse_meta(text: str) -> dict[str, str]:
    """key=value lines; '#' starts a comment; blank lines ignored."""
    values: dict[str, str] = {}
    for raw in text.split("\n"):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"malformed meta line {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_dataset(dirpath) -> Dataset:
    root = Path(dirpath)
    meta_path = root / "meta.txt"
    if not meta_path.exists():
        raise DatasetError(f"missing meta file {meta_path}")
    meta = parse_meta(meta_path.read_text())
    try:
        classes = int(meta["k"])
        declared = int(meta["n"])
    except KeyError as missing:
        raise DatasetError(f"meta file lacks key {missing}") from None
    images_path = root / "images.dpt"
    labels_path = root / "labels.dpt"
    if not images_path.exists():
        raise DatasetError(f"missing required file {images_path}")
    if not labels_path.exists():
        raise DatasetError(f"missing required file {labels_path}")
    images = load_tensor(images_path)
    labels_f = load_tensor(labels_path)
    labels = labels_f.astype(np.int64)
    if (labels_f != labels).any():
        raise DatasetError("labels file holds non-integer values")
    masks = None
    masks_path = root / "masks.dpt"
    if masks_path.exists():
        masks = load_tensor(masks_path)
    counts = {images.shape[0], labels.shape[0]}
    if masks is not None:
        counts.add(masks.shape[0])
    if len(counts) != 1 or declared not in counts:
        raise DatasetError(
            f"inconsistent sample counts: meta n={declared}, images {images.shape[0]}, "
            f"labels {labels.shape[0]}"
            + ("" if masks is None else f", masks {masks.shape[0]}")
        )
    return Dataset(images, labels, classes, masks)
