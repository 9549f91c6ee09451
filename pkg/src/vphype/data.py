"""Hyperspectral scene container, stratified splits, patch extraction and synthetic scenes.

On-disk scene layout (one directory)::

    meta.json   {"version": 1, "bands": C, "height": H, "width": W,
                 "num_classes": N, "class_names": [...]}
    cube.f32    C*H*W little-endian float32, band-major (C, H, W) row-major
    labels.u16  H*W little-endian uint16 row-major, 0 = unlabeled, 1..N classes

Any converter that writes these three files is a valid ingestion path.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, FormatError, SplitError
from .functional import reflect_indices

FORMAT_VERSION = 1
DEFAULT_PATCH = 15


@dataclass
class HsiScene:
    cube: np.ndarray  # (C, H, W)
    labels: np.ndarray  # (H, W), 0 = unlabeled
    class_names: list[str]
    band_mean: Optional[np.ndarray] = None
    band_std: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.cube = np.asarray(self.cube, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.cube.ndim != 3 or self.labels.shape != self.cube.shape[1:]:
            raise FormatError(f"cube {self.cube.shape} and labels {self.labels.shape} disagree")
        if not np.all(np.isfinite(self.cube)):
            raise FormatError("cube contains non-finite values")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) > self.num_classes:
            raise FormatError(f"labels must lie in [0, {self.num_classes}]")

    @property
    def bands(self) -> int:
        return self.cube.shape[0]

    @property
    def height(self) -> int:
        return self.cube.shape[1]

    @property
    def width(self) -> int:
        return self.cube.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        """Labeled pixels per class, index 0 = class 1."""
        return np.bincount(self.labels.reshape(-1), minlength=self.num_classes + 1)[1:]

    def empty_classes(self) -> list[int]:
        return [i + 1 for i, n in enumerate(self.class_counts()) if n == 0]

    def labeled_pixels(self) -> np.ndarray:
        return np.flatnonzero(self.labels.reshape(-1) > 0)

    def fit_band_stats(self, pixels: np.ndarray) -> None:
        """Per-band mean/std from the given (training) flat pixel indices only."""
        spectra = self.cube.reshape(self.bands, -1)[:, pixels]
        self.band_mean = spectra.mean(axis=1)
        std = spectra.std(axis=1)
        self.band_std = np.where(std > 0, std, 1.0)


# ---------------------------------------------------------------------------
# container format


def save_scene(scene: HsiScene, directory: Union[str, os.PathLike]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": FORMAT_VERSION,
        "bands": scene.bands,
        "height": scene.height,
        "width": scene.width,
        "num_classes": scene.num_classes,
        "class_names": list(scene.class_names),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (directory / "cube.f32").write_bytes(scene.cube.astype("<f4").tobytes())
    (directory / "labels.u16").write_bytes(scene.labels.astype("<u2").tobytes())


def _read_exact(path: Path, expected: int, what: str) -> bytes:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"scene: not found: {path}") from None
    if len(raw) != expected:
        raise FormatError(f"scene: {path.name} ({what}) expected {expected} bytes, got {len(raw)}")
    return raw


def load_scene(directory: Union[str, os.PathLike]) -> HsiScene:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise FormatError(f"scene: not found: {meta_path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"scene: meta.json is not valid JSON ({exc.msg})") from None
    for key in ("version", "bands", "height", "width", "num_classes", "class_names"):
        if key not in meta:
            raise FormatError(f"scene: meta.json missing field {key!r}")
    if meta["version"] != FORMAT_VERSION:
        raise FormatError(f"scene: unknown version {meta['version']!r} (field 'version'), expected {FORMAT_VERSION}")
    c, h, w, n = (meta[k] for k in ("bands", "height", "width", "num_classes"))
    for key, value in (("bands", c), ("height", h), ("width", w), ("num_classes", n)):
        if not isinstance(value, int) or value < 1:
            raise FormatError(f"scene: field {key!r} must be a positive integer, got {value!r}")
    if len(meta["class_names"]) != n:
        raise FormatError(f"scene: field 'class_names' has {len(meta['class_names'])} entries, num_classes={n}")
    cube = np.frombuffer(_read_exact(directory / "cube.f32", 4 * c * h * w, f"4*C*H*W, C={c} H={h} W={w}"), "<f4")
    labels = np.frombuffer(_read_exact(directory / "labels.u16", 2 * h * w, f"2*H*W, H={h} W={w}"), "<u2")
    if labels.size and int(labels.max()) > n:
        raise FormatError(f"scene: field 'labels' has value {int(labels.max())} > num_classes={n}")
    cube = cube.reshape(c, h, w)
    if not np.all(np.isfinite(cube)):
        raise FormatError("scene: field 'cube' contains non-finite values")
    return HsiScene(cube.astype(np.float64), labels.reshape(h, w).astype(np.int64), [str(s) for s in meta["class_names"]])


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitSpec:
    train_fraction: float = 0.02
    seed: int = 0
    per_class_min: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"split: train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.per_class_min < 0:
            raise ConfigError("split: per_class_min must be >= 0")


@dataclass
class Split:
    train: np.ndarray  # flat pixel indices, ascending
    test: np.ndarray
    train_counts: dict[int, int] = field(default_factory=dict)


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def train_count(n_c: int, spec: SplitSpec) -> int:
    return max(spec.per_class_min, round_half_away(spec.train_fraction * n_c))


def stratified_split(scene: HsiScene, spec: SplitSpec) -> Split:
    flat = scene.labels.reshape(-1)
    if not np.any(flat > 0):
        raise SplitError("scene has no labeled pixels")
    rng = np.random.default_rng(spec.seed)
    train, test, counts = [], [], {}
    for cls in range(1, scene.num_classes + 1):
        pixels = np.flatnonzero(flat == cls)
        n_c = pixels.size
        if n_c == 0:
            raise SplitError(f"class {cls} ({scene.class_names[cls - 1]}) has no labeled pixels")
        k = train_count(n_c, spec)
        if k >= n_c:
            raise SplitError(
                f"class {cls} ({scene.class_names[cls - 1]}): train count {k} leaves no test pixels of {n_c}"
            )
        order = rng.permutation(n_c)
        train.append(pixels[order[:k]])
        test.append(pixels[order[k:]])
        counts[cls] = k
    return Split(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)), counts)


# ---------------------------------------------------------------------------
# patches


def extract_patches(
    scene: HsiScene, pixels: np.ndarray, patch_size: int = DEFAULT_PATCH, normalize: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Mirror-padded ``[n, C, p, p]`` patches centred on flat pixel indices, plus 0-based labels."""
    if patch_size < 1 or patch_size % 2 == 0:
        raise ConfigError(f"patch size must be odd, got {patch_size}")
    r = patch_size // 2
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1)
    rows, cols = np.divmod(pixels, scene.width)
    row_src = reflect_indices(scene.height, r, r)
    col_src = reflect_indices(scene.width, r, r)
    offsets = np.arange(patch_size)
    ri = row_src[rows[:, None] + offsets[None, :]]  # [n, p]
    ci = col_src[cols[:, None] + offsets[None, :]]
    patches = scene.cube[:, ri[:, :, None], ci[:, None, :]]  # [C, n, p, p]
    patches = np.moveaxis(patches, 0, 1)
    if normalize:
        if scene.band_mean is None or scene.band_std is None:
            raise ConfigError("patch normalisation requested before band statistics were fitted")
        patches = (patches - scene.band_mean[None, :, None, None]) / scene.band_std[None, :, None, None]
    labels = scene.labels.reshape(-1)[pixels] - 1
    return np.ascontiguousarray(patches), labels


def extract_patch(scene: HsiScene, pixel: tuple[int, int], patch_size: int = DEFAULT_PATCH, normalize: bool = True):
    row, col = pixel
    patches, labels = extract_patches(scene, np.array([row * scene.width + col]), patch_size, normalize)
    return patches[0], int(labels[0])


# ---------------------------------------------------------------------------
# synthetic scenes


def make_synthetic_scene(
    num_classes: int = 6,
    bands: int = 32,
    height: int = 64,
    width: int = 64,
    separation: float = 4.0,
    seed: int = 0,
    noise: float = 1.0,
) -> HsiScene:
    """Rectangular class regions with per-band Gaussian signatures.

    In every band, the class means are a random permutation of
    ``{0, 1, ..., N-1} * separation * noise`` on top of a smooth baseline, so
    any two classes differ by at least ``separation`` noise standard
    deviations per band.
    """
    if separation < 0:
        raise ConfigError(f"separation must be non-negative, got {separation}")
    grid_rows = int(math.floor(math.sqrt(num_classes)))
    grid_cols = int(math.ceil(num_classes / grid_rows))
    if num_classes < 1 or height < grid_rows or width < grid_cols:
        raise ConfigError(f"{height}x{width} grid too small for {num_classes} class regions")
    rng = np.random.default_rng(seed)
    baseline = 10.0 + 3.0 * np.sin(np.linspace(0.0, 3.0 * np.pi, bands))
    offsets = np.stack([rng.permutation(num_classes) for _ in range(bands)], axis=1) * separation * noise
    means = baseline[None, :] + offsets  # [N, C]

    labels = np.zeros((height, width), dtype=np.int64)
    row_edges = np.linspace(0, height, grid_rows + 1).astype(int)
    col_edges = np.linspace(0, width, grid_cols + 1).astype(int)
    cell = 0
    for i in range(grid_rows):
        for j in range(grid_cols):
            # trailing cells absorb into the last class region
            labels[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]] = min(cell, num_classes - 1) + 1
            cell += 1
    cube = means[labels - 1].transpose(2, 0, 1) + rng.normal(0.0, noise, size=(bands, height, width))
    cube = cube.astype("<f4").astype(np.float64)  # exactly representable on disk
    return HsiScene(cube, labels, [f"class_{i + 1}" for i in range(num_classes)])
