"""Hyperspectral cube persistence, synthesis, padding, patches and splits.

Cubes live in a small binary container ("HSC1"): a JSON header followed by
the float32 reflectance raster (pixel-major, bands contiguous per pixel)
and an optional uint16 label raster.  Label 0 always means
background/unlabeled; classes are 1..C.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

HSC_MAGIC = b"HSC1"


@dataclass
class HsiCube:
    """A reflectance raster (h, w, bands) with an aligned integer label raster."""

    reflectance: np.ndarray          # float32 (h, w, bands)
    labels: np.ndarray               # integer (h, w), 0 = background
    class_names: list[str]
    has_labels: bool = True

    def __post_init__(self):
        if self.reflectance.ndim != 3:
            raise DataError(f"reflectance must be (h, w, bands), got "
                            f"{self.reflectance.shape}")
        if self.labels.shape != self.reflectance.shape[:2]:
            raise DataError(f"labels shaped {self.labels.shape} do not align with "
                            f"raster {self.reflectance.shape[:2]}")
        if not np.isfinite(self.reflectance).all():
            raise DataError("reflectance contains non-finite values")
        c = len(self.class_names)
        if self.labels.min() < 0 or self.labels.max() > c:
            raise DataError(f"labels must lie in 0..{c}, found "
                            f"[{self.labels.min()}, {self.labels.max()}]")

    @property
    def height(self) -> int:
        return self.reflectance.shape[0]

    @property
    def width(self) -> int:
        return self.reflectance.shape[1]

    @property
    def bands(self) -> int:
        return self.reflectance.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def save_cube(cube: HsiCube, path):
    header = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "classes": cube.num_classes,
        "class_names": list(cube.class_names),
        "has_labels": cube.has_labels,
        "dtype": "f32le",
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(HSC_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(cube.reflectance, dtype="<f4").tobytes())
        if cube.has_labels:
            f.write(np.ascontiguousarray(cube.labels, dtype="<u2").tobytes())


def load_cube(path) -> HsiCube:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DataError(f"cannot read cube {path}: {exc}") from exc
    if raw[:4] != HSC_MAGIC:
        raise DataError(f"not an HSC1 cube: magic {raw[:4]!r}")
    if len(raw) < 8:
        raise DataError("cube file truncated before header length")
    (blob_len,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"cube header unreadable: {exc}") from exc
    for key in ("height", "width", "bands", "classes", "class_names", "has_labels", "dtype"):
        if key not in header:
            raise DataError(f"cube header missing key '{key}'")
    if header["dtype"] != "f32le":
        raise DataError(f"unsupported cube dtype {header['dtype']!r}")
    h, w, bands = header["height"], header["width"], header["bands"]
    if min(h, w, bands) < 1:
        raise DataError(f"cube dims must be >= 1, header says {h}x{w}x{bands}")
    pos = 8 + blob_len
    refl_bytes = h * w * bands * 4
    label_bytes = h * w * 2 if header["has_labels"] else 0
    expected = pos + refl_bytes + label_bytes
    if len(raw) != expected:
        raise DataError(f"cube payload is {len(raw) - pos} bytes, header implies "
                        f"{refl_bytes + label_bytes}")
    refl = np.frombuffer(raw, dtype="<f4", count=h * w * bands, offset=pos)
    refl = refl.reshape(h, w, bands).copy()
    if header["has_labels"]:
        labels = np.frombuffer(raw, dtype="<u2", count=h * w, offset=pos + refl_bytes)
        labels = labels.reshape(h, w).astype(np.int64)
    else:
        labels = np.zeros((h, w), dtype=np.int64)
    return HsiCube(refl, labels, list(header["class_names"]), header["has_labels"])


def class_signatures(bands: int, num_classes: int) -> np.ndarray:
    """Smooth per-class spectra: one Gaussian bump per class plus a small offset.

    Amplitudes are kept moderate so the default synthesis noise produces a
    realistic (imperfect) nearest-mean separability.
    """
    axis = np.arange(bands, dtype=np.float64)
    sigma = max(1.0, bands / (2.5 * num_classes))
    sigs = np.empty((num_classes, bands))
    for c in range(num_classes):
        center = (c + 0.5) * (bands - 1) / num_classes
        sigs[c] = 0.18 * np.exp(-0.5 * ((axis - center) / sigma) ** 2) + 0.02 * c
    return sigs


def synth_cube(height: int, width: int, bands: int, num_classes: int,
               noise_sigma: float = 0.1, seed: int = 0) -> HsiCube:
    """Deterministic synthetic cube: spatial class blobs with smooth spectra.

    Classes tile the image as Voronoi cells of seeded points (two per class),
    a random tenth of the pixels is left unlabeled, and i.i.d. Gaussian noise
    of the given sigma is added per band.
    """
    if num_classes < 2:
        raise ConfigError(f"synthesis needs num_classes >= 2, got {num_classes}")
    if min(height, width, bands) < 1:
        raise ConfigError("cube dims must all be >= 1")
    rng = np.random.default_rng(seed)
    points = rng.uniform(0, [height, width], size=(2 * num_classes, 2))
    point_class = np.arange(2 * num_classes) % num_classes
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1)
    d2 = ((coords[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    owner = point_class[np.argmin(d2, axis=1)].reshape(height, width)
    labels = owner + 1
    unlabeled = rng.random((height, width)) < 0.1
    labels = np.where(unlabeled, 0, labels)
    for c in range(num_classes):
        if not (labels == c + 1).any():
            r, col = coords[(owner.ravel() == c).argmax()]
            labels[r, col] = c + 1
    sigs = class_signatures(bands, num_classes)
    refl = sigs[owner]
    if noise_sigma > 0:
        refl = refl + noise_sigma * rng.standard_normal((height, width, bands))
    names = [f"class_{c + 1}" for c in range(num_classes)]
    return HsiCube(refl.astype(np.float32), labels.astype(np.int64), names)


def pad_cube(cube: HsiCube, margin: int) -> HsiCube:
    """Zero-pad the spatial borders; padded pixels are unlabeled."""
    if margin < 0:
        raise ConfigError(f"padding margin must be >= 0, got {margin}")
    if margin == 0:
        return cube
    refl = np.pad(cube.reflectance, ((margin, margin), (margin, margin), (0, 0)))
    labels = np.pad(cube.labels, margin)
    return HsiCube(refl, labels, list(cube.class_names), cube.has_labels)


TRAIN, VAL, TEST = 1, 2, 3
PART_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


@dataclass
class SplitSpec:
    """Per-pixel partition assignment: 0 excluded, 1 train, 2 val, 3 test."""

    assignment: np.ndarray
    ratios: tuple[int, int, int]
    seed: int

    def mask(self, part: str) -> np.ndarray:
        return self.assignment == PART_NAMES[part]

    def counts(self) -> dict[str, int]:
        return {name: int((self.assignment == code).sum())
                for name, code in PART_NAMES.items()}


def apportion(count: int, ratios) -> tuple[int, int, int]:
    """Split `count` items across three partitions in the given integer ratio.

    Each partition gets the floor of its exact quota; leftover units go, in
    train/val/test order, to partitions with a positive fractional quota.
    Every count therefore lands within one sample of its exact quota, and a
    non-empty class always keeps at least one training sample.
    """
    r = [int(v) for v in ratios]
    if len(r) != 3 or min(r) < 1:
        raise ConfigError(f"split ratios must be three positive integers, got {ratios}")
    total = sum(r)
    base = [count * v // total for v in r]
    frac = [count * v % total for v in r]
    leftover = count - sum(base)
    for i in range(3):
        if leftover == 0:
            break
        if frac[i] > 0:
            base[i] += 1
            leftover -= 1
    return tuple(base)


def stratified_split(labels: np.ndarray, ratios, seed: int) -> SplitSpec:
    """Per-class shuffled apportionment of labeled pixels; background excluded."""
    r = tuple(int(v) for v in ratios)
    if len(r) != 3 or min(r) < 1:
        raise ConfigError(f"split ratios must be three positive integers, got {ratios}")
    num_classes = int(labels.max())
    if num_classes < 1:
        raise DataError("no labeled pixels to split")
    rng = np.random.default_rng(seed)
    assignment = np.zeros(labels.shape, dtype=np.int8)
    for c in range(1, num_classes + 1):
        coords = np.argwhere(labels == c)
        if len(coords) == 0:
            raise DataError(f"class {c} has no labeled pixels")
        coords = coords[rng.permutation(len(coords))]
        n_train, n_val, n_test = apportion(len(coords), r)
        for code, chunk in zip((TRAIN, VAL, TEST),
                               np.split(coords, [n_train, n_train + n_val])):
            assignment[chunk[:, 0], chunk[:, 1]] = code
    return SplitSpec(assignment, r, seed)


@dataclass
class PatchSet:
    """Stacked patches: data (n, 1, bands, M, M), center labels, source coords."""

    data: np.ndarray
    labels: np.ndarray
    coords: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def patches_at(cube: HsiCube, coords: np.ndarray, block: int) -> np.ndarray:
    """Stack (1, bands, block, block) patches centered on the given pixels.

    Every pixel must sit at least (block - 1) / 2 from the border, i.e. the
    cube must already carry that padding margin.
    """
    if block % 2 == 0:
        raise ConfigError(f"patch block size must be odd, got {block}")
    margin = (block - 1) // 2
    data = np.empty((len(coords), 1, cube.bands, block, block))
    for i, (row, col) in enumerate(coords):
        if (row < margin or col < margin or row + margin >= cube.height
                or col + margin >= cube.width):
            raise DataError(f"pixel ({row}, {col}) too close to the border for "
                            f"block {block}; pad the cube with margin {margin}")
        window = cube.reflectance[row - margin:row + margin + 1,
                                  col - margin:col + margin + 1, :]
        data[i, 0] = window.transpose(2, 0, 1).astype(np.float64)
    return data


def extract_patches(cube: HsiCube, split: SplitSpec, block: int) -> dict[str, PatchSet]:
    """One patch per labeled pixel of each partition, centered on that pixel.

    The cube must already be padded with margin (block - 1) / 2 so every
    labeled pixel sits at least that far from the border; patches span all
    bands and take the center pixel's label.  Output order is row-major
    over pixels.
    """
    if split.assignment.shape != cube.labels.shape:
        raise DataError(f"split raster {split.assignment.shape} does not align with "
                        f"cube {cube.labels.shape}")
    out = {}
    for part in PART_NAMES:
        coords = np.argwhere(split.mask(part) & (cube.labels > 0))
        data = patches_at(cube, coords, block)
        labels = cube.labels[coords[:, 0], coords[:, 1]].astype(np.int64)
        out[part] = PatchSet(data, labels, coords)
    return out


def standardize_cube(cube: HsiCube, train_mask: np.ndarray) -> HsiCube:
    """Per-band standardization with mean/std computed on train pixels only."""
    if not train_mask.any():
        raise DataError("standardization needs a non-empty train partition")
    pixels = cube.reflectance[train_mask].astype(np.float64)
    mean = pixels.mean(axis=0)
    std = pixels.std(axis=0)
    std[std == 0] = 1.0
    refl = (cube.reflectance.astype(np.float64) - mean) / std
    return HsiCube(refl.astype(np.float32), cube.labels, list(cube.class_names),
                   cube.has_labels)
