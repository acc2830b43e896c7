"""Dataset plumbing: synthetic chest-film-like images, manifest files,
preprocessing, augmentation, deterministic splits, and a linear-probe
learnability gate.

The synthetic generator exists so the whole pipeline can be exercised and
scored end to end on a laptop. Each pathology contributes a distinct localized
primitive (disk, ring, bars, ...) at a fixed grid cell with jittered position,
size, and intensity, over a correlated-noise background. The signal is strong
enough that a linear probe on raw pixels separates every class; if the trained
encoders cannot, the encoders are at fault, not the data.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .core import (
    NIH_PATHOLOGIES,
    NO_FINDING,
    ConfigurationError,
    LabelVector,
    PathologySet,
    Sample,
    make_label_vector,
    rng_stream,
)
from .evaluation import roc_auc

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

MANIFEST_NAME = "manifest.csv"
META_NAME = "dataset.json"
IMAGES_DIR = "images"


# ---------------------------------------------------------------------------
# Manifest

@dataclass(frozen=True)
class ManifestRow:
    image_index: str
    labels: LabelVector
    patient_id: str | None = None


@dataclass(frozen=True)
class Manifest:
    pathologies: PathologySet
    rows: tuple[ManifestRow, ...]

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.image_index in seen:
                raise ConfigurationError(f"duplicate image index {row.image_index!r}")
            seen.add(row.image_index)
        with_pid = sum(1 for r in self.rows if r.patient_id is not None)
        if with_pid not in (0, len(self.rows)):
            raise ConfigurationError("patient ids must be present on all rows or none")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def has_patient_ids(self) -> bool:
        return bool(self.rows) and self.rows[0].patient_id is not None

    def ids(self) -> list[str]:
        return [r.image_index for r in self.rows]

    def label_matrix(self) -> np.ndarray:
        return np.array([r.labels.bits for r in self.rows], dtype=np.float64)

    def subset(self, indices: list[int]) -> "Manifest":
        return Manifest(self.pathologies, tuple(self.rows[i] for i in indices))


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write rows as CSV with |-joined finding labels."""
    header = ["Image Index", "Finding Labels"]
    if manifest.has_patient_ids:
        header.append("Patient ID")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in manifest.rows:
            cells = [row.image_index, "|".join(row.labels.names())]
            if manifest.has_patient_ids:
                cells.append(row.patient_id)
            writer.writerow(cells)


def load_manifest(path: str | Path, pathologies: PathologySet) -> Manifest:
    """Parse a label manifest, failing loudly on anything off-contract."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigurationError(f"manifest {path} is empty") from None
        if header[:2] != ["Image Index", "Finding Labels"]:
            raise ConfigurationError(
                f"manifest {path} has header {header[:2]}, expected "
                "['Image Index', 'Finding Labels']"
            )
        has_pid = len(header) > 2 and header[2] == "Patient ID"
        rows = []
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) < 2:
                raise ConfigurationError(f"manifest row {lineno} has no labels")
            names = [t for t in cells[1].split("|") if t]
            try:
                labels = make_label_vector(names, pathologies)
            except Exception as exc:
                raise ConfigurationError(
                    f"manifest row {lineno} ({cells[0]!r}): {exc}"
                ) from exc
            pid = cells[2] if has_pid and len(cells) > 2 else None
            rows.append(ManifestRow(cells[0], labels, pid))
    return Manifest(pathologies, tuple(rows))


# ---------------------------------------------------------------------------
# Synthetic image generation

# Disease -> (shape kind, size multiplier). Each disease paints its primitive
# twice, at a horizontally mirrored pair of grid cells, so the deposited
# pattern is invariant under the horizontal-flip augmentation. A 4x4 grid has
# eight mirror pairs; diseases 8..13 reuse pairs 0..5, so each reused pair
# hosts two diseases whose shapes stay distinguishable after downsampling.
_PRIMITIVES: dict[str, tuple[str, float]] = {
    "Atelectasis": ("disk", 1.0),
    "Consolidation": ("square", 1.0),
    "Infiltration": ("plus", 1.0),
    "Pneumothorax": ("diamond", 1.0),
    "Edema": ("disk", 0.7),
    "Emphysema": ("diamond", 0.7),
    "Fibrosis": ("square", 0.7),
    "Effusion": ("disk", 0.55),
    "Pneumonia": ("cross", 1.0),
    "Pleural Thickening": ("hbars", 1.0),
    "Cardiomegaly": ("disk", 1.4),
    "Nodule": ("disk", 0.5),
    "Mass": ("square", 1.3),
    "Hernia": ("checker", 1.0),
}


def _draw_primitive(img: np.ndarray, kind: str, cy: float, cx: float,
                    h: float, amp: float) -> None:
    yy, xx = np.ogrid[: img.shape[0], : img.shape[1]]
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        mask = dy ** 2 + dx ** 2 <= h ** 2
    elif kind == "square":
        mask = (np.abs(dy) <= h) & (np.abs(dx) <= h)
    elif kind == "ring":
        r2 = dy ** 2 + dx ** 2
        mask = (r2 <= h ** 2) & (r2 >= (0.55 * h) ** 2)
    elif kind == "frame":
        inside = (np.abs(dy) <= h) & (np.abs(dx) <= h)
        core = (np.abs(dy) <= 0.55 * h) & (np.abs(dx) <= 0.55 * h)
        mask = inside & ~core
    elif kind == "plus":
        arm = max(1.0, 0.3 * h)
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= h)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= h))
    elif kind == "cross":
        arm = max(1.0, 0.35 * h)
        near = (np.abs(dy) <= h) & (np.abs(dx) <= h)
        mask = near & ((np.abs(dy - dx) <= arm) | (np.abs(dy + dx) <= arm))
    elif kind == "hbars":
        period = max(2.0, 0.6 * h)
        stripe = (np.floor((dy + h) / period) % 2 == 0)
        mask = (np.abs(dy) <= h) & (np.abs(dx) <= h) & stripe
    elif kind == "vbars":
        period = max(2.0, 0.6 * h)
        stripe = (np.floor((dx + h) / period) % 2 == 0)
        mask = (np.abs(dy) <= h) & (np.abs(dx) <= h) & stripe
    elif kind == "diamond":
        mask = np.abs(dy) + np.abs(dx) <= h
    elif kind == "hbar":
        mask = (np.abs(dy) <= max(1.0, 0.35 * h)) & (np.abs(dx) <= h)
    elif kind == "vbar":
        mask = (np.abs(dx) <= max(1.0, 0.35 * h)) & (np.abs(dy) <= h)
    elif kind == "checker":
        cell = max(2.0, 0.5 * h)
        parity = (np.floor((dy + h) / cell) + np.floor((dx + h) / cell)) % 2 == 0
        mask = (np.abs(dy) <= h) & (np.abs(dx) <= h) & parity
    else:
        raise ConfigurationError(f"unknown primitive kind {kind!r}")
    img[mask] += amp


def disease_subset(n_diseases: int) -> PathologySet:
    """The first n diseases of the default label set, plus the clear label."""
    diseases = [p for p in NIH_PATHOLOGIES if p != NO_FINDING]
    if not 1 <= n_diseases <= len(diseases):
        raise ConfigurationError(
            f"n_diseases must be in [1, {len(diseases)}], got {n_diseases}"
        )
    return PathologySet(tuple(diseases[:n_diseases]) + (NO_FINDING,))


def _render_image(labels: LabelVector, image_size: int,
                  rng: np.random.Generator) -> np.ndarray:
    noise = gaussian_filter(rng.standard_normal((image_size, image_size)), sigma=3.0)
    sd = noise.std()
    if sd > 0:
        noise = noise / sd
    img = 0.3 + 0.08 * noise
    # The 4x4 primitive grid sits inside the central 60% of the frame, the
    # region every crop at scale >= 0.8 is guaranteed to keep. Disease j
    # occupies mirror pair j mod 8: row (j mod 8) // 2, and either the outer
    # column pair {0, 3} or the inner pair {1, 2}. Both cells of the pair are
    # painted with mirrored jitter, so a horizontal flip reproduces the
    # pattern exactly.
    margin = int(np.ceil(0.2 * image_size))
    cell = (image_size - 2 * margin) // 4
    origin = (image_size - 4 * cell) / 2
    diseases = [p for p in NIH_PATHOLOGIES if p != NO_FINDING]
    for name in labels.names():
        if name == NO_FINDING:
            continue
        kind, scale = _PRIMITIVES[name]
        pair = diseases.index(name) % 8
        row, col_left = pair // 2, (0 if pair % 2 == 0 else 1)
        cy = origin + cell * row + cell / 2 + rng.uniform(-1, 1)
        cx = origin + cell * col_left + cell / 2 + rng.uniform(-1, 1)
        h = scale * max(0.34 * cell, 0.6) * rng.uniform(0.8, 1.0)
        amp = rng.uniform(0.45, 0.65)
        _draw_primitive(img, kind, cy, cx, h, amp)
        _draw_primitive(img, kind, cy, (image_size - 1) - cx, h, amp)
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class DatasetMeta:
    pathology_names: tuple[str, ...]
    image_size: int
    prevalence: float
    seed: int
    n: int

    @property
    def pathologies(self) -> PathologySet:
        return PathologySet(self.pathology_names)


def generate_synthetic_dataset(out_dir: str | Path, n: int,
                               n_diseases: int | None = None,
                               image_size: int = 64,
                               prevalence: float = 0.2,
                               seed: int = 0,
                               images_per_patient: int = 4) -> Manifest:
    """Write n PNG images plus manifest.csv and dataset.json under out_dir.

    Labels are independent Bernoulli(prevalence) draws per disease; a draw
    with no disease becomes the exclusive clear label. Every sample is
    rendered from its own counter-derived rng, so sample i is byte-identical
    no matter how many samples surround it.
    """
    if n < 10:
        raise ConfigurationError(f"n must be >= 10, got {n}")
    if not 0.0 <= prevalence < 1.0:
        raise ConfigurationError(f"prevalence must be in [0, 1), got {prevalence}")
    if image_size < 16 or image_size % 4:
        raise ConfigurationError(
            f"image size must be >= 16 and divisible by 4, got {image_size}"
        )
    pathologies = (PathologySet.nih() if n_diseases is None
                   else disease_subset(n_diseases))
    out_dir = Path(out_dir)
    images_dir = out_dir / IMAGES_DIR
    images_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for i in range(n):
        rng = rng_stream(seed, "data", i)
        draws = rng.random(len(pathologies.diseases)) < prevalence
        names = [d for d, hit in zip(pathologies.diseases, draws) if hit]
        labels = make_label_vector(names or [NO_FINDING], pathologies)
        img = _render_image(labels, image_size, rng)
        name = f"{i:08d}.png"
        pixels = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(images_dir / name)
        rows.append(ManifestRow(name, labels, f"P{i // images_per_patient:06d}"))

    manifest = Manifest(pathologies, tuple(rows))
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    meta = {
        "pathologies": list(pathologies.names),
        "image_size": image_size,
        "prevalence": prevalence,
        "seed": seed,
        "n": n,
    }
    with open(out_dir / META_NAME, "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return manifest


def load_dataset(data_dir: str | Path) -> tuple[Manifest, DatasetMeta]:
    data_dir = Path(data_dir)
    meta_path = data_dir / META_NAME
    if not meta_path.exists():
        raise ConfigurationError(f"no {META_NAME} in {data_dir}")
    with open(meta_path) as fh:
        raw = json.load(fh)
    meta = DatasetMeta(
        pathology_names=tuple(raw["pathologies"]),
        image_size=int(raw["image_size"]),
        prevalence=float(raw["prevalence"]),
        seed=int(raw["seed"]),
        n=int(raw["n"]),
    )
    manifest = load_manifest(data_dir / MANIFEST_NAME, meta.pathologies)
    return manifest, meta


def load_images(data_dir: str | Path, manifest: Manifest) -> np.ndarray:
    """Load the manifest's PNGs as (N, H, W) float64 in [0, 1]."""
    data_dir = Path(data_dir)
    images = []
    for row in manifest.rows:
        path = data_dir / IMAGES_DIR / row.image_index
        if not path.exists():
            raise ConfigurationError(f"image file missing: {path}")
        with Image.open(path) as im:
            images.append(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)
    return np.stack(images) if images else np.zeros((0, 0, 0))


def load_samples(data_dir: str | Path, manifest: Manifest) -> list[Sample]:
    pixels = load_images(data_dir, manifest)
    return [Sample(id=r.image_index, image=pixels[i], labels=r.labels)
            for i, r in enumerate(manifest.rows)]


# ---------------------------------------------------------------------------
# Preprocessing and augmentation

def preprocess(images: np.ndarray | torch.Tensor, size: int) -> torch.Tensor:
    """Resize, replicate to 3 channels, standardize. Returns (N, size, size, 3).

    Bilinear resize without corner alignment; per-channel standardization with
    the usual natural-image statistics so pretrained-scale inputs stay in a
    familiar numeric range.
    """
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float64))
    if images.ndim != 3:
        raise ConfigurationError(
            f"expected (N, H, W) grayscale batch, got shape {tuple(images.shape)}"
        )
    x = images.to(torch.float64).unsqueeze(1)
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    x = x.repeat(1, 3, 1, 1)
    mean = torch.tensor(IMAGENET_MEAN, dtype=torch.float64).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=torch.float64).view(1, 3, 1, 1)
    x = (x - mean) / std
    return x.permute(0, 2, 3, 1).contiguous()


@dataclass(frozen=True)
class AugmentConfig:
    scale_min: float = 0.8
    scale_max: float = 1.0
    flip_prob: float = 0.5
    brightness: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.scale_min <= self.scale_max <= 1.0:
            raise ConfigurationError(
                f"crop scales must satisfy 0 < min <= max <= 1, got "
                f"[{self.scale_min}, {self.scale_max}]"
            )
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.brightness < 1.0:
            raise ConfigurationError(
                f"brightness jitter must be in [0, 1), got {self.brightness}"
            )


def augment(images: torch.Tensor, config: AugmentConfig,
            rng: np.random.Generator) -> torch.Tensor:
    """One stochastic view per image: crop-and-resize, maybe flip, brightness.

    Consumes a fixed number of rng draws per image, so augmentation stays
    reproducible under resume as long as the caller derives rng from the
    step counter.
    """
    if images.ndim != 3:
        raise ConfigurationError(
            f"expected (N, H, W) batch, got shape {tuple(images.shape)}"
        )
    n, hgt, wid = images.shape
    out = torch.empty_like(images)
    for i in range(n):
        s = rng.uniform(config.scale_min, config.scale_max)
        ch = max(1, round(s * hgt))
        cw = max(1, round(s * wid))
        top = int(rng.integers(0, hgt - ch + 1))
        left = int(rng.integers(0, wid - cw + 1))
        flip = rng.random() < config.flip_prob
        delta = rng.uniform(-config.brightness, config.brightness)
        view = images[i, top:top + ch, left:left + cw][None, None]
        view = F.interpolate(view, size=(hgt, wid), mode="bilinear",
                             align_corners=False)[0, 0]
        if flip:
            view = torch.flip(view, dims=[-1])
        out[i] = (view + delta).clamp(0.0, 1.0)
    return out


def augment_views(images: torch.Tensor, config: AugmentConfig,
                  rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Two independent stochastic views of the same batch."""
    return augment(images, config, rng), augment(images, config, rng)


# ---------------------------------------------------------------------------
# Splits

@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        fracs = (self.train, self.val, self.test)
        if any(f < 0 for f in fracs) or self.train <= 0:
            raise ConfigurationError(f"bad split fractions {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions {fracs} do not sum to 1")


def _largest_remainder(n: int, fracs: list[float]) -> list[int]:
    exact = [n * f for f in fracs]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(fracs)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(manifest: Manifest, spec: SplitSpec, seed: int) -> dict[str, Manifest]:
    """Deterministic train/val/test split, grouped by patient when ids exist.

    Grouping assigns whole patients to one split so no patient straddles the
    train/eval boundary; counts then deviate from the exact targets by at most
    a group size.
    """
    names = ["train", "val", "test"]
    fracs = [spec.train, spec.val, spec.test]
    rng = rng_stream(seed, "split")
    n = len(manifest)
    targets = _largest_remainder(n, fracs)

    if manifest.has_patient_ids:
        groups: dict[str, list[int]] = {}
        for i, row in enumerate(manifest.rows):
            groups.setdefault(row.patient_id, []).append(i)
        keys = sorted(groups)
        order = rng.permutation(len(keys))
        buckets: dict[str, list[int]] = {name: [] for name in names}
        cursor = 0
        for k in order:
            while cursor < 2 and len(buckets[names[cursor]]) >= targets[cursor]:
                cursor += 1
            buckets[names[cursor]].extend(groups[keys[k]])
    else:
        order = rng.permutation(n)
        bounds = np.cumsum(targets)
        buckets = {
            "train": list(order[: bounds[0]]),
            "val": list(order[bounds[0]: bounds[1]]),
            "test": list(order[bounds[1]:]),
        }

    result = {}
    for name in names:
        indices = sorted(int(i) for i in buckets[name])
        if not indices:
            warnings.warn(f"split {name!r} is empty", stacklevel=2)
        result[name] = manifest.subset(indices)
    return result


# ---------------------------------------------------------------------------
# Linear-probe learnability gate

def linear_probe_auc(train_pixels: np.ndarray, train_labels: np.ndarray,
                     eval_pixels: np.ndarray, eval_labels: np.ndarray,
                     pathologies: PathologySet, image_size: int = 32,
                     alpha: float = 1.0) -> dict[str, float]:
    """Ridge-regression probe on raw preprocessed pixels, scored per disease.

    A cheap ceiling check that the labels are recoverable from pixels at all.
    Diseases missing a class on either side are skipped with a warning.
    """
    x_train = preprocess(train_pixels, image_size)[..., 0].reshape(len(train_pixels), -1)
    x_eval = preprocess(eval_pixels, image_size)[..., 0].reshape(len(eval_pixels), -1)
    x_train = x_train.numpy()
    x_eval = x_eval.numpy()
    mu = x_train.mean(axis=0)
    xc = x_train - mu
    gram = xc.T @ xc + alpha * np.eye(xc.shape[1])

    aucs = {}
    for j, name in enumerate(pathologies.names):
        if name == NO_FINDING:
            continue
        y_train = train_labels[:, j]
        y_eval = eval_labels[:, j]
        if len(set(y_train.tolist())) < 2 or len(set(y_eval.tolist())) < 2:
            warnings.warn(f"probe skipped {name!r}: single-class labels", stacklevel=2)
            continue
        w = scipy.linalg.solve(gram, xc.T @ (y_train - y_train.mean()),
                               assume_a="pos")
        scores = (x_eval - mu) @ w
        aucs[name] = roc_auc(y_eval, scores)
    return aucs
