"""Synthetic structured images, anomaly injection, and image-directory I/O.

Synthetic samples mimic the recurring layout of a chest radiograph: two
dark lung fields, periodic rib bands and a bright central column, with a
few percent of per-sample jitter. Each sample is a pure function of
``(seed, index, abnormal)``.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import layout as L

log = logging.getLogger(__name__)

ANOMALY_TYPES = ("blob", "shuffle", "bend")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DataError(ValueError):
    """Malformed, empty or unreadable dataset."""


@dataclass(frozen=True)
class AnomalyMeta:
    kind: str
    center: tuple[int, int]
    radius: float


@dataclass
class ImageSample:
    pixels: np.ndarray  # (128, 128) float64 in [-1, 1]
    label: int  # 0 normal, 1 abnormal
    source_id: str
    anomaly: AnomalyMeta | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.pixels.min() < -1.0 or self.pixels.max() > 1.0:
            raise ValueError(f"{self.source_id}: pixels outside [-1, 1]")


@dataclass
class DatasetSplit:
    train: list[ImageSample]
    val: list[ImageSample]
    test: list[ImageSample]
    contamination: float = 0.0
    pool: list[ImageSample] = field(default_factory=list, repr=False)  # spare abnormal samples

    def validate(self) -> "DatasetSplit":
        if not self.train:
            raise DataError("training split is empty")
        for name in ("val", "test"):
            labels = {s.label for s in getattr(self, name)}
            if labels != {0, 1}:
                raise DataError(f"{name} split must contain both classes, has labels {sorted(labels)}")
        ids = [s.source_id for s in self.train + self.val + self.test]
        if len(ids) != len(set(ids)):
            raise DataError("splits share source ids")
        return self


def stack(samples: list[ImageSample]) -> np.ndarray:
    return np.stack([s.pixels for s in samples])


def labels(samples: list[ImageSample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


# -- synthetic generation -------------------------------------------------------


def _soft(inside: np.ndarray) -> np.ndarray:
    """Map a signed distance (positive inside) to a soft [0, 1] mask."""
    return 1.0 / (1.0 + np.exp(-inside / L.EDGE_SOFTNESS))


def _ellipse(rr, cc, center, radii) -> np.ndarray:
    d = np.sqrt(((rr - center[0]) / radii[0]) ** 2 + ((cc - center[1]) / radii[1]) ** 2)
    return _soft((1.0 - d) * min(radii))


def _grid():
    return np.mgrid[0 : L.SIZE, 0 : L.SIZE].astype(np.float64)


def _lung_mask(rr, cc, lungs) -> np.ndarray:
    return np.maximum(*(_ellipse(rr, cc, c, r) for c, r in lungs))


def render_normal(rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """One normal image and the jittered layout it was drawn from."""
    def j() -> float:
        return 1.0 + rng.uniform(-L.JITTER, L.JITTER)

    def shift() -> float:
        return rng.uniform(-L.JITTER, L.JITTER) * L.SIZE

    rr, cc = _grid()
    dy, dx = shift(), shift()

    img = np.full((L.SIZE, L.SIZE), L.BACKGROUND)
    body = _ellipse(rr, cc, (L.BODY_CENTER[0] + dy, L.BODY_CENTER[1] + dx), (L.BODY_RADII[0] * j(), L.BODY_RADII[1] * j()))
    img += body * (L.BODY_LEVEL * j() - L.BACKGROUND)

    lungs = [((r + dy + shift() * 0.3, c + dx + shift() * 0.3), (L.LUNG_RADII[0] * j(), L.LUNG_RADII[1] * j()))
             for r, c in L.LUNG_CENTERS]
    lung = _lung_mask(rr, cc, lungs)
    img += lung * (L.LUNG_LEVEL * j() - L.BODY_LEVEL)

    period = L.RIB_PERIOD * j()
    first = L.RIB_FIRST_ROW * j() + dy
    sag = L.RIB_CURVATURE * j() * (cc - (L.SIZE / 2 + dx)) ** 2
    ribs = np.zeros_like(img)
    rib_rows = []
    for k in range(L.RIB_COUNT):
        row = first + k * period
        rib_rows.append(row)
        ribs = np.maximum(ribs, _soft((L.RIB_HALF_WIDTH * j() - np.abs(rr - row - sag)) * 1.5))
    img += ribs * lung * L.RIB_LEVEL * j()

    top, bottom = L.MEDIASTINUM_ROWS
    col = _soft(L.MEDIASTINUM_HALF_WIDTH * j() - np.abs(cc - L.SIZE / 2 - dx))
    rows = _soft(rr - top * j() - dy) * _soft(bottom * j() + dy - rr)
    img += col * rows * (L.MEDIASTINUM_LEVEL * j() - L.BODY_LEVEL)

    img += rng.normal(0.0, L.NOISE_SIGMA, img.shape)
    return np.clip(img, -1.0, 1.0), {"lungs": lungs, "rib_rows": rib_rows, "dx": dx}


def _inside_lung_point(rng, lungs, margin: float) -> tuple[int, int]:
    (center, radii) = lungs[rng.integers(len(lungs))]
    # uniform in the shrunken ellipse
    while True:
        u, v = rng.uniform(-1, 1, 2)
        if u * u + v * v <= 1:
            break
    r = center[0] + u * max(radii[0] - margin, 1)
    c = center[1] + v * max(radii[1] - margin, 1)
    return int(np.clip(round(r), 0, L.SIZE - 1)), int(np.clip(round(c), 0, L.SIZE - 1))


def inject_anomaly(image: np.ndarray, seed, kind: str | None = None, layout_info: dict | None = None):
    """Add one local anomaly; returns ``(image, AnomalyMeta)``.

    Pixels farther than ``radius`` from ``center`` are left untouched.
    ``layout_info`` (from :func:`render_normal`) steers the anomaly into a
    lung field; without it the nominal layout is used.
    """
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = ANOMALY_TYPES[rng.integers(len(ANOMALY_TYPES))]
    if kind not in ANOMALY_TYPES:
        raise ValueError(f"unknown anomaly kind {kind!r}; choose from {ANOMALY_TYPES}")
    info = layout_info or {"lungs": [(c, L.LUNG_RADII) for c in L.LUNG_CENTERS],
                           "rib_rows": [L.RIB_FIRST_ROW + k * L.RIB_PERIOD for k in range(L.RIB_COUNT)], "dx": 0.0}
    out = np.array(image, dtype=np.float64)
    rr, cc = _grid()
    if kind == "blob":
        radius = float(rng.uniform(*L.BLOB_RADIUS))
        center = _inside_lung_point(rng, info["lungs"], radius * 0.5)
        d = np.hypot(rr - center[0], cc - center[1]) / radius
        bump = np.clip(1.0 - d**2, 0.0, None) ** 1.5
        out = out + bump * L.BLOB_LEVEL * rng.uniform(0.9, 1.1)
    elif kind == "shuffle":
        side, tile = L.SHUFFLE_SIDE, L.SHUFFLE_TILE
        center = _inside_lung_point(rng, info["lungs"], side / 2)
        r0 = int(np.clip(center[0] - side // 2, 0, L.SIZE - side))
        c0 = int(np.clip(center[1] - side // 2, 0, L.SIZE - side))
        center = (r0 + side // 2, c0 + side // 2)
        radius = side / np.sqrt(2.0)
        n = side // tile
        region = out[r0 : r0 + side, c0 : c0 + side].reshape(n, tile, n, tile).transpose(0, 2, 1, 3).reshape(n * n, tile, tile)
        # a derangement so every tile moves
        while True:
            perm = rng.permutation(n * n)
            if np.all(perm != np.arange(n * n)):
                break
        # tiles are also flipped, which breaks the band texture even inside a uniform run
        shuffled = region[perm][:, ::-1, :]
        out[r0 : r0 + side, c0 : c0 + side] = shuffled.reshape(n, n, tile, tile).transpose(0, 2, 1, 3).reshape(side, side)
    else:
        radius = float(L.BEND_RADIUS)
        rows = [r for r in info["rib_rows"]]
        row = rows[rng.integers(1, len(rows) - 1)]
        lung_center, lung_radii = info["lungs"][rng.integers(len(info["lungs"]))]
        col = lung_center[1] + rng.uniform(-0.4, 0.4) * lung_radii[1]
        center = (int(round(row)), int(round(col)))
        d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
        sigma = radius / 2.5
        disp = L.BEND_AMPLITUDE * rng.choice([-1.0, 1.0]) * np.exp(-d2 / (2 * sigma**2))
        warped = ndimage.map_coordinates(out, [rr + disp, cc], order=1, mode="nearest")
        inside = d2 <= radius**2
        out = np.where(inside, warped, out)
    out = np.clip(out, -1.0, 1.0)
    return out, AnomalyMeta(kind, (int(center[0]), int(center[1])), float(radius))


def synth_sample(seed: int, index: int, abnormal: bool, prefix: str = "synth") -> ImageSample:
    rng = np.random.default_rng([seed, index, int(abnormal)])
    img, info = render_normal(rng)
    meta = None
    if abnormal:
        img, meta = inject_anomaly(img, rng.integers(2**63), layout_info=info)
    tag = "abnormal" if abnormal else "normal"
    return ImageSample(img, int(abnormal), f"{prefix}-{seed}-{tag}-{index:05d}", meta)


def gen_synthetic(n: int, seed: int, abnormal: bool = False, start: int = 0) -> list[ImageSample]:
    """``n`` samples with indices ``start .. start + n - 1``."""
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    return [synth_sample(seed, i, abnormal) for i in range(start, start + n)]


def synthetic_split(n_train: int = 400, val_per_class: int = 100, test_per_class: int = 100, seed: int = 0,
                    pool: int | None = None) -> DatasetSplit:
    """Normal-only training set; val/test hold that many normal plus as many abnormal samples.

    Indices never overlap between splits, so source ids are disjoint. A
    pool of spare abnormal samples (default: as many as the training set)
    feeds :func:`contaminate_training_set`.
    """
    pool = n_train if pool is None else pool
    train = gen_synthetic(n_train, seed, False, 0)
    nv, nt = val_per_class, test_per_class
    val = gen_synthetic(nv, seed, False, n_train) + gen_synthetic(nv, seed, True, n_train)
    test = gen_synthetic(nt, seed, False, n_train + nv) + gen_synthetic(nt, seed, True, n_train + nv)
    spare = gen_synthetic(pool, seed, True, n_train + nv + nt) if pool else []
    return DatasetSplit(train, val, test, 0.0, spare)


def contaminate_training_set(split: DatasetSplit, ratio: float, seed: int) -> DatasetSplit:
    """Replace a random subset of training normals by abnormal pool samples.

    The abnormal fraction of the result is ``round(ratio * n) / n``.
    """
    if not 0.0 <= ratio <= 0.5:
        raise ValueError(f"contamination ratio must lie in [0, 0.5], got {ratio}")
    n = len(split.train)
    k = int(round(ratio * n))
    if k == 0:
        return split
    normals = [i for i, s in enumerate(split.train) if s.label == 0]
    if k > len(split.pool) or k > len(normals):
        raise DataError(f"need {k} abnormal pool samples, only {len(split.pool)} available")
    rng = np.random.default_rng([seed, 0xC0])
    victims = rng.choice(normals, size=k, replace=False)
    donors = rng.choice(len(split.pool), size=k, replace=False)
    train = list(split.train)
    for v, d in zip(sorted(victims), donors):
        train[v] = split.pool[d]
    used = set(int(d) for d in donors)
    rest = [s for i, s in enumerate(split.pool) if i not in used]
    return replace(split, train=train, contamination=k / n, pool=rest)


# -- image directories ----------------------------------------------------------


def to_unit_range(gray: np.ndarray) -> np.ndarray:
    """uint8 or [0, 255] grayscale -> [-1, 1]."""
    return np.asarray(gray, dtype=np.float64) / 127.5 - 1.0


def read_image(path: str | os.PathLike, size: int = L.SIZE) -> np.ndarray:
    """Load any PNG/JPEG as a ``size`` x ``size`` grayscale array in [-1, 1]."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            hi = 65535.0 if im.mode.startswith("I;16") else max(float(arr.max()), 1.0)
            im = Image.fromarray((arr / hi * 255.0).astype(np.uint8))
        if im.mode != "L":
            # ITU-R 601 luma, as PIL's own L conversion, but without its integer rounding
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
            gray = rgb @ np.array([0.299, 0.587, 0.114])
            im = Image.fromarray(gray.astype(np.float32), mode="F")
        else:
            im = Image.fromarray(np.asarray(im, dtype=np.float32), mode="F")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.clip(to_unit_range(np.asarray(im, dtype=np.float64)), -1.0, 1.0)


def _class_dir(root: Path, split: str, cls: str, required: bool) -> list[ImageSample]:
    folder = root / split / cls
    if not folder.is_dir():
        if required:
            raise DataError(f"missing directory {folder}")
        return []
    out, skipped = [], 0
    for path in sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            px = read_image(path)
        except (OSError, ValueError) as exc:
            skipped += 1
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        out.append(ImageSample(px, int(cls == "abnormal"), str(path.relative_to(root))))
    if skipped:
        log.warning("%s/%s: skipped %d unreadable file(s)", split, cls, skipped)
    if required and not out:
        raise DataError(f"class directory {folder} holds no readable images")
    return out


def load_image_dir(root: str | os.PathLike) -> DatasetSplit:
    """Read ``root/{train,val,test}/{normal,abnormal}/*.png|jpg`` in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    train = _class_dir(root, "train", "normal", True) + _class_dir(root, "train", "abnormal", False)
    val = _class_dir(root, "val", "normal", True) + _class_dir(root, "val", "abnormal", True)
    test = _class_dir(root, "test", "normal", True) + _class_dir(root, "test", "abnormal", True)
    k = sum(s.label for s in train)
    return DatasetSplit(train, val, test, k / len(train) if train else 0.0).validate()


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((pixels + 1.0) * 127.5), 0, 255).astype(np.uint8)


def export_split(split: DatasetSplit, root: str | os.PathLike) -> dict[str, int]:
    """Write a split in the directory layout above; returns per-folder counts."""
    root = Path(root)
    counts: dict[str, int] = {}
    for name in ("train", "val", "test"):
        for s in getattr(split, name):
            cls = "abnormal" if s.label else "normal"
            folder = root / name / cls
            folder.mkdir(parents=True, exist_ok=True)
            stem = Path(s.source_id).stem
            Image.fromarray(to_uint8(s.pixels), mode="L").save(folder / f"{stem}.png", optimize=False)
            counts[f"{name}/{cls}"] = counts.get(f"{name}/{cls}", 0) + 1
    return counts


def baseline_scores(reference: np.ndarray, images: np.ndarray) -> np.ndarray:
    """Mean absolute difference from the pixel-wise mean of ``reference`` images."""
    mean = reference.mean(axis=0)
    return np.abs(images - mean).reshape(len(images), -1).mean(axis=1)
