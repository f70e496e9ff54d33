"""Manifests, preprocessing, augmentation, class weights, patient folds and
the synthetic multi-scale lesion dataset."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import rng as rng_mod

MANIFEST_FIELDS = ("path", "patient_id", "eye", "label")
EYES = ("OD", "OS", "unknown")
SYNTH_CLASSES = ("normal", "small_lesion", "large_lesion")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    patient_id: str
    eye: str
    label: int

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError(f"record {self.path!r} has an empty patient id")
        if self.eye not in EYES:
            raise ValueError(f"record {self.path!r}: eye must be one of {EYES}, got {self.eye!r}")
        if self.label < 0:
            raise ValueError(f"record {self.path!r}: negative label {self.label}")


def read_manifest(path, n_classes: int | None = None) -> list[ManifestRecord]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        records = [ManifestRecord(row["path"], row["patient_id"], row["eye"], int(row["label"]))
                   for row in reader]
    if n_classes is not None:
        for r in records:
            if r.label >= n_classes:
                raise ValueError(f"{path}: label {r.label} of {r.path!r} is not below {n_classes}")
    return records


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_FIELDS)
    for r in records:
        writer.writerow([r.path, r.patient_id, r.eye, r.label])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PNG/PGM as float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1) if arr.shape[-1] >= 3 else arr[..., 0]
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.int16) or arr.dtype.kind in "iu":
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64)


def save_png16(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def save_png8(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a 2-D grid to ``size x size`` (pixel-centre aligned)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if (h, w) == (size, size):
        return image.copy()
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(image, grid, order=1, mode="nearest")


def standardize(image: np.ndarray, std_floor: float = 1e-6) -> np.ndarray:
    """Zero mean, unit variance.  When the std is below ``std_floor`` the image
    is treated as constant and maps to zeros (the centred residue is only
    rounding noise, which dividing by the floor would amplify)."""
    image = np.asarray(image, dtype=np.float64)
    std = image.std()
    if std < std_floor:
        return np.zeros_like(image)
    return (image - image.mean()) / std


def preprocess(image: np.ndarray, size: int = 224, std_floor: float = 1e-6) -> np.ndarray:
    """Resize to ``size`` then standardise per image; returns ``(size, size, 1)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[..., 0]
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"expected a 2-D grayscale image, got shape {image.shape}")
    return standardize(resize_bilinear(image, size), std_floor)[..., None]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    rotation: float = 15.0
    shear: float = 5.0
    brightness: float = 0.2
    zoom: float = 0.2
    horizontal_flip: bool = True

    def __post_init__(self):
        for name in ("rotation", "shear", "brightness", "zoom"):
            if getattr(self, name) < 0:
                raise ValueError(f"augmentation range {name} must be >= 0")
        if self.brightness >= 1 or self.zoom >= 1:
            raise ValueError("brightness and zoom ranges must stay below 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def none(cls) -> "AugmentationConfig":
        return cls(0.0, 0.0, 0.0, 0.0, False)


@dataclass(frozen=True)
class AugmentDraw:
    rotation: float = 0.0
    shear: float = 0.0
    brightness: float = 1.0
    zoom: float = 1.0
    flip: bool = False


def sample_augmentation(config: AugmentationConfig, rng: np.random.Generator) -> AugmentDraw:
    u = rng.uniform(-1.0, 1.0, size=4)
    flip = bool(rng.random() < 0.5) if config.horizontal_flip else False
    return AugmentDraw(
        rotation=float(u[0] * config.rotation),
        shear=float(u[1] * config.shear),
        brightness=float(1.0 + u[2] * config.brightness),
        zoom=float(1.0 + u[3] * config.zoom),
        flip=flip,
    )


def apply_augmentation(image: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Flip, one bilinear affine warp about the centre (zero fill), then intensity scale."""
    image = np.asarray(image)
    squeeze = image.ndim == 3
    grid = image[..., 0] if squeeze else image
    if draw.flip:
        grid = grid[:, ::-1]
    if draw.rotation or draw.shear or draw.zoom != 1.0:
        theta, shear = math.radians(draw.rotation), math.radians(draw.shear)
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        shr = np.array([[1.0, 0.0], [math.tan(shear), 1.0]])
        forward = rot @ shr * draw.zoom  # output = forward @ input, (row, col) coords
        inverse = np.linalg.inv(forward)
        centre = (np.array(grid.shape, dtype=np.float64) - 1) / 2
        offset = centre - inverse @ centre
        grid = ndimage.affine_transform(grid, inverse, offset=offset, order=1, mode="constant", cval=0.0)
    else:
        grid = grid.copy()
    if draw.brightness != 1.0:
        grid = grid * draw.brightness
    return grid[..., None] if squeeze else grid


def augment(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    return apply_augmentation(image, sample_augmentation(config, rng))


# ---------------------------------------------------------------------------
# class weights
# ---------------------------------------------------------------------------

WEIGHT_SCHEMES = ("proportional", "inverse-frequency", "uniform")


@dataclass(frozen=True)
class ClassWeights:
    scheme: str
    weights: tuple[float, ...]

    def display(self, decimals: int = 2) -> tuple[float, ...]:
        """Weights rounded to ``decimals`` with largest-remainder apportionment,
        so the displayed values still sum to exactly 1."""
        unit = 10 ** decimals
        scaled = np.asarray(self.weights) / np.sum(self.weights) * unit
        floors = np.floor(scaled).astype(int)
        short = unit - int(floors.sum())
        order = np.argsort(-(scaled - floors), kind="stable")
        floors[order[:short]] += 1
        return tuple(int(v) / unit for v in floors)


def compute_class_weights(counts: Sequence[int], scheme: str = "proportional") -> ClassWeights:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a non-empty vector")
    if np.any(counts <= 0):
        raise ValueError(f"every class needs a positive count, got {counts.astype(int).tolist()}")
    if scheme == "proportional":
        w = counts / counts.sum()
    elif scheme == "inverse-frequency":
        inv = 1.0 / counts
        w = inv / inv.sum()
    elif scheme == "uniform":
        w = np.full(counts.size, 1.0 / counts.size)
    else:
        raise ValueError(f"unknown class weight scheme {scheme!r}; choose from {WEIGHT_SCHEMES}")
    return ClassWeights(scheme, tuple(float(v) for v in w))


# ---------------------------------------------------------------------------
# patient-level folds
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    seed: int
    assignment: dict[str, int]
    validation: dict[int, tuple[str, ...]] = field(default_factory=dict)

    def patients(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.assignment.items() if f == fold)

    def fold_sizes(self) -> list[int]:
        return [len(self.patients(f)) for f in range(self.k)]

    def split(self, fold: int) -> tuple[list[str], list[str], list[str]]:
        """(train, validation, test) patient ids when ``fold`` is held out."""
        test = self.patients(fold)
        val = sorted(self.validation[fold])
        held = set(test) | set(val)
        train = sorted(p for p in self.assignment if p not in held)
        return train, val, test

    def split_records(self, records: Sequence[ManifestRecord], fold: int):
        train, val, test = (set(s) for s in self.split(fold))
        pick = lambda ids: [r for r in records if r.patient_id in ids]  # noqa: E731
        return pick(train), pick(val), pick(test)


def patient_kfold(records: Sequence[ManifestRecord], k: int = 5, seed: int = 0,
                  val_fraction: float = 0.2) -> FoldPlan:
    """Shuffle patients and deal them round-robin into ``k`` folds.

    For every held-out fold, ``ceil(val_fraction * n_train_patients)`` of the
    remaining patients are set aside for validation.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    patients = sorted({r.patient_id for r in records})
    if len(patients) < k:
        raise ValueError(f"{len(patients)} patients cannot fill {k} folds")
    order = rng_mod.stream(seed, "folds").permutation(len(patients))
    assignment = {patients[j]: pos % k for pos, j in enumerate(order)}
    validation = {}
    for fold in range(k):
        pool = sorted(p for p, f in assignment.items() if f != fold)
        n_val = math.ceil(val_fraction * len(pool)) if val_fraction > 0 else 0
        n_val = min(n_val, len(pool) - 1)
        picked = rng_mod.stream(seed, "validation", fold).permutation(len(pool))[:n_val]
        validation[fold] = tuple(sorted(pool[j] for j in picked))
    return FoldPlan(k, seed, assignment, validation)


def holdout_split(records: Sequence[ManifestRecord], seed: int = 0, test_fraction: float = 0.2,
                  val_fraction: float = 0.2):
    """Single patient-level (train, validation, test) split of the records."""
    patients = sorted({r.patient_id for r in records})
    order = [patients[j] for j in rng_mod.stream(seed, "holdout").permutation(len(patients))]
    n_test = max(1, math.ceil(test_fraction * len(order)))
    test, rest = set(order[:n_test]), order[n_test:]
    n_val = max(1, math.ceil(val_fraction * len(rest)))
    val, train = set(rest[:n_val]), set(rest[n_val:])
    pick = lambda ids: [r for r in records if r.patient_id in ids]  # noqa: E731
    return pick(train), pick(val), pick(test)


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthStyle:
    """Appearance knobs of the synthetic generator."""

    background: float = 0.1
    band_level: float = 0.45
    rpe_level: float = 0.75
    small_level: float = 0.35
    large_level: float = 0.3
    noise: float = 0.1
    small_count: tuple[int, int] = (2, 4)
    small_span: tuple[float, float] = (0.03, 0.06)
    large_span: tuple[float, float] = (0.25, 0.40)


@dataclass
class SynthDataset:
    records: list[ManifestRecord]
    images: list[np.ndarray]
    masks: list[np.ndarray]

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records])


def _patient_sizes(total: int, rng: np.random.Generator) -> list[int]:
    sizes = []
    remaining = total
    while remaining > 0:
        if remaining <= 8:
            size = remaining
        else:
            size = int(rng.integers(3, 9))
            if remaining - size < 3:
                size = remaining - 3
        sizes.append(size)
        remaining -= size
    return sizes


def disk_stamp(diameter: int) -> np.ndarray:
    c = (diameter - 1) / 2
    yy, xx = np.mgrid[:diameter, :diameter]
    return (yy - c) ** 2 + (xx - c) ** 2 <= (diameter / 2) ** 2


def _render(label: int, size: int, rng: np.random.Generator, style: SynthStyle):
    s = size
    cols = np.arange(s)
    rows = np.arange(s)[:, None]
    centre = s * rng.uniform(0.45, 0.6)
    amplitude = s * rng.uniform(0.0, 0.04)
    phase = rng.uniform(0, 2 * np.pi)
    thickness = s * rng.uniform(0.15, 0.22)
    top = centre - thickness / 2 + amplitude * np.sin(2 * np.pi * cols / s + phase)
    bottom = top + thickness
    rpe = max(1.0, s / 32)
    image = np.full((s, s), style.background)
    band = (rows >= top) & (rows < bottom)
    image[band] = style.band_level
    image[(rows >= bottom - rpe) & (rows < bottom)] = style.rpe_level
    mask = np.zeros((s, s), dtype=bool)
    if label == 1:
        for _ in range(int(rng.integers(style.small_count[0], style.small_count[1] + 1))):
            d = int(np.clip(round(s * rng.uniform(*style.small_span)), 1, s))
            stamp = disk_stamp(d)
            x0 = int(rng.integers(0, s - d + 1))
            y_mid = bottom[min(x0 + d // 2, s - 1)] + rng.uniform(-thickness / 2, rpe)
            y0 = int(np.clip(round(y_mid - d / 2), 0, s - d))
            region = mask[y0:y0 + d, x0:x0 + d]
            region |= stamp
    elif label == 2:
        d = s * rng.uniform(*style.large_span)
        ry, rx = d / 2 * rng.uniform(0.5, 0.8), d / 2
        cx = rng.uniform(rx, s - rx)
        cy = bottom[int(np.clip(cx, 0, s - 1))] - ry * rng.uniform(0.3, 1.0)
        mask = ((rows - cy) / ry) ** 2 + ((cols[None, :] - cx) / rx) ** 2 <= 1.0
    level = style.small_level if label == 1 else style.large_level
    image = image + level * mask
    image = image + rng.normal(0.0, style.noise, size=(s, s))
    return np.clip(image, 0.0, 1.0), mask


def synth_generate(n_per_class: int, size: int = 64, seed: int = 0,
                   style: SynthStyle = SynthStyle()) -> SynthDataset:
    """Three-class surrogate: normal, small bright lesions, one large lesion.

    A curved horizontal band stands in for the retina.  Each synthetic patient
    has 3-8 images of a single class.  Paths in the records are relative
    (``images/<id>.png``) and match what :func:`write_synth` writes.
    """
    records, images, masks = [], [], []
    for label, cls in enumerate(SYNTH_CLASSES):
        sizes = _patient_sizes(n_per_class, rng_mod.stream(seed, "synth", "patients", cls))
        for p, count in enumerate(sizes):
            pid = f"{cls}-{p:04d}"
            eye = EYES[int(rng_mod.stream(seed, "synth", "eye", pid).integers(0, 2))]
            for j in range(count):
                image, mask = _render(label, size, rng_mod.stream(seed, "synth", "image", pid, j), style)
                records.append(ManifestRecord(f"images/{pid}_{j}.png", pid, eye, label))
                images.append(image)
                masks.append(mask)
    return SynthDataset(records, images, masks)


def write_synth(out_dir, dataset: SynthDataset) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for record, image, mask in zip(dataset.records, dataset.images, dataset.masks):
        save_png16(out / record.path, image)
        save_png8(out / "masks" / Path(record.path).name, mask.astype(np.uint8) * 255)
    write_manifest(out / "manifest.csv", dataset.records)


def load_dataset(manifest, size: int, n_classes: int | None = None):
    """Read a manifest and preprocess every image; returns (records, images (N, s, s, 1))."""
    manifest = Path(manifest)
    records = read_manifest(manifest, n_classes)
    root = manifest.parent
    images = np.stack([preprocess(load_image(root / r.path), size) for r in records]) if records else \
        np.zeros((0, size, size, 1))
    return records, images


def load_masks(manifest, records: Sequence[ManifestRecord]) -> list[np.ndarray | None]:
    root = Path(manifest).parent
    out = []
    for r in records:
        p = root / "masks" / Path(r.path).name
        out.append(load_image(p) > 0.5 if p.exists() else None)
    return out


def class_counts(records: Sequence[ManifestRecord], n_classes: int) -> list[int]:
    counts = [0] * n_classes
    for r in records:
        counts[r.label] += 1
    return counts
