"""Scene ingestion, normalization, patch extraction and synthetic scene pairs.

Scene-on-disk format: a ``NAME.json`` header next to two raw files.
The header carries ``{height, width, bands, num_classes, dtype: "f32le",
layout: "band-sequential", data_file, label_file}``.  ``data_file`` holds
little-endian float32 reflectance, band-sequential (each band contiguous,
row-major within the band); ``label_file`` holds little-endian uint16
labels, row-major, 0 meaning unlabeled.

All randomness goes through ``numpy.random.default_rng`` (PCG64) with an
explicit integer seed, so generated scenes and batch orders reproduce
bit-exactly across runs and platforms.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np


class SceneFormatError(ValueError):
    """Raised when a scene file is malformed (bad header, short raw file)."""


class SceneDataError(ValueError):
    """Raised when scene payload violates an invariant (NaN, bad label)."""


@dataclass(frozen=True)
class HsiCube:
    """A hyperspectral scene: H x W x C reflectance plus per-pixel labels."""

    reflectance: np.ndarray  # (H, W, C) float32
    labels: np.ndarray       # (H, W) int, 0 = unlabeled
    num_classes: int

    def __post_init__(self):
        refl = self.reflectance
        labels = self.labels
        if refl.ndim != 3:
            raise SceneDataError(f"reflectance must be H x W x C, got shape {refl.shape}")
        if labels.shape != refl.shape[:2]:
            raise SceneDataError(
                f"label map shape {labels.shape} does not match scene {refl.shape[:2]}")
        if min(refl.shape) < 1:
            raise SceneDataError(f"degenerate scene shape {refl.shape}")
        if not np.all(np.isfinite(refl)):
            raise SceneDataError("reflectance contains NaN or Inf")
        if labels.min() < 0 or labels.max() > self.num_classes:
            raise SceneDataError(
                f"labels must lie in [0, {self.num_classes}], found "
                f"[{labels.min()}, {labels.max()}]")

    @property
    def height(self) -> int:
        return self.reflectance.shape[0]

    @property
    def width(self) -> int:
        return self.reflectance.shape[1]

    @property
    def bands(self) -> int:
        return self.reflectance.shape[2]


@dataclass(frozen=True)
class PatchSet:
    """Labeled patches of shape (N, C, P, P) cut from one scene."""

    patches: np.ndarray       # (N, C, P, P) float32
    class_labels: np.ndarray  # (N,) int in [1, num_classes]
    coords: np.ndarray        # (N, 2) (row, col)
    domain: str               # "source" or "target"
    num_classes: int

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        n = self.patches.shape[0]
        if self.class_labels.shape != (n,) or self.coords.shape != (n, 2):
            raise ValueError("patches, class_labels and coords must agree on N")

    def __len__(self) -> int:
        return self.patches.shape[0]


def load_scene(path: str) -> HsiCube:
    """Load a scene from its JSON header; see the module docstring for layout.

    Raises SceneFormatError for structural problems (missing keys, wrong
    dtype/layout tag, short raw files) and SceneDataError for invalid
    payload (non-finite values, labels above num_classes).
    """
    try:
        with open(path) as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"cannot read scene header {path}: {exc}") from exc

    required = ("height", "width", "bands", "num_classes", "dtype", "layout",
                "data_file", "label_file")
    missing = [key for key in required if key not in header]
    if missing:
        raise SceneFormatError(f"scene header missing keys: {missing}")
    if header["dtype"] != "f32le":
        raise SceneFormatError(f"unsupported dtype {header['dtype']!r}, expected 'f32le'")
    if header["layout"] != "band-sequential":
        raise SceneFormatError(
            f"unsupported layout {header['layout']!r}, expected 'band-sequential'")

    h, w, c = int(header["height"]), int(header["width"]), int(header["bands"])
    base = os.path.dirname(os.path.abspath(path))
    data_path = os.path.join(base, header["data_file"])
    label_path = os.path.join(base, header["label_file"])

    data = _read_raw(data_path, np.dtype("<f4"), h * w * c)
    labels = _read_raw(label_path, np.dtype("<u2"), h * w)

    # band-sequential: (C, H, W) on disk, (H, W, C) in memory
    reflectance = data.reshape(c, h, w).transpose(1, 2, 0).astype(np.float32)
    label_map = labels.reshape(h, w).astype(np.int64)
    return HsiCube(reflectance, label_map, int(header["num_classes"]))


def _read_raw(path: str, dtype: np.dtype, count: int) -> np.ndarray:
    if not os.path.exists(path):
        raise SceneFormatError(f"raw file missing: {path}")
    values = np.fromfile(path, dtype=dtype)
    if values.size != count:
        raise SceneFormatError(
            f"raw file {path} holds {values.size} values, expected {count}")
    return values


def save_scene(cube: HsiCube, directory: str, name: str = "scene") -> str:
    """Write a cube in the on-disk scene format; returns the header path."""
    os.makedirs(directory, exist_ok=True)
    data_file = f"{name}.data"
    label_file = f"{name}.labels"
    header = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "num_classes": cube.num_classes,
        "dtype": "f32le",
        "layout": "band-sequential",
        "data_file": data_file,
        "label_file": label_file,
    }
    cube.reflectance.transpose(2, 0, 1).astype("<f4").tofile(
        os.path.join(directory, data_file))
    cube.labels.astype("<u2").tofile(os.path.join(directory, label_file))
    header_path = os.path.join(directory, f"{name}.json")
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=2)
    return header_path


def zscore_normalize(cube: HsiCube) -> HsiCube:
    """Standardize each band to zero mean and unit population std.

    Statistics are taken over all H*W pixels of the band.  Bands with
    population std below 1e-8 are mapped to all zeros.
    """
    refl = cube.reflectance.astype(np.float64)
    mean = refl.mean(axis=(0, 1))
    std = refl.std(axis=(0, 1))  # population (divide-by-N) std
    out = np.zeros_like(refl)
    keep = std >= 1e-8
    out[:, :, keep] = (refl[:, :, keep] - mean[keep]) / std[keep]
    return HsiCube(out.astype(np.float32), cube.labels, cube.num_classes)


def extract_patches(cube: HsiCube, patch_size: int = 11,
                    domain: str = "source") -> PatchSet:
    """Cut one patch_size x patch_size patch around every labeled pixel.

    Borders are handled by mirror padding of width (patch_size - 1) / 2
    (reflection without repeating the edge pixel).
    """
    if patch_size % 2 == 0:
        raise ValueError(f"patch_size must be odd, got {patch_size}")
    rows, cols = np.nonzero(cube.labels)
    coords = np.stack([rows, cols], axis=1)
    patches = patches_at(cube, coords, patch_size)
    labels = cube.labels[rows, cols].astype(np.int64)
    return PatchSet(patches, labels, coords, domain, cube.num_classes)


def patches_at(cube: HsiCube, coords: np.ndarray, patch_size: int = 11) -> np.ndarray:
    """Patches (N, C, P, P) centered at arbitrary (row, col) coordinates."""
    if patch_size % 2 == 0:
        raise ValueError(f"patch_size must be odd, got {patch_size}")
    half = (patch_size - 1) // 2
    padded = np.pad(cube.reflectance, ((half, half), (half, half), (0, 0)),
                    mode="reflect")
    n = coords.shape[0]
    c = cube.bands
    patches = np.empty((n, c, patch_size, patch_size), dtype=np.float32)
    for i, (r, col) in enumerate(coords):
        window = padded[r:r + patch_size, col:col + patch_size, :]
        patches[i] = window.transpose(2, 0, 1)
    return patches


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a synthetic two-domain scene pair with a controlled shift.

    The class geometry is a Voronoi partition of the grid around
    ``region_sites`` random sites assigned to classes round-robin, so every
    class occupies at least one pixel.  The target domain reuses the source
    geometry; its reflectance applies a per-band affine shift
    (gain * prototype + offset) before adding independent noise.
    """

    num_classes: int
    bands: int
    height: int
    width: int
    class_means: np.ndarray    # (num_classes, bands)
    class_stds: np.ndarray     # (num_classes, bands)
    shift_gain: np.ndarray     # (bands,) > 0
    shift_offset: np.ndarray   # (bands,)
    noise_level: float = 0.1
    region_sites: int = 12
    labeled_fraction: float = 1.0

    def __post_init__(self):
        if self.num_classes < 1 or self.bands < 1:
            raise ValueError("num_classes and bands must be >= 1")
        if self.class_means.shape != (self.num_classes, self.bands):
            raise ValueError("class_means must be (num_classes, bands)")
        if self.class_stds.shape != (self.num_classes, self.bands):
            raise ValueError("class_stds must be (num_classes, bands)")
        if self.shift_gain.shape != (self.bands,) or self.shift_offset.shape != (self.bands,):
            raise ValueError("shift_gain and shift_offset must be (bands,)")
        if np.any(self.shift_gain <= 0):
            raise ValueError("shift gains must be > 0")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.region_sites < self.num_classes:
            raise ValueError("region_sites must be >= num_classes")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must be in (0, 1]")

    @classmethod
    def from_json(cls, path: str) -> "SceneSpec":
        """Build a spec from a JSON file.

        Keys: num_classes, bands, height, width, noise_level, region_sites,
        labeled_fraction, shift_gain, shift_offset (scalar or per-band list),
        and either explicit class_means/class_stds matrices or a
        prototype_seed from which smooth class spectra are drawn.
        """
        with open(path) as fh:
            raw = json.load(fh)
        num_classes = int(raw["num_classes"])
        bands = int(raw["bands"])
        gain = np.broadcast_to(np.asarray(raw.get("shift_gain", 1.0), dtype=np.float64),
                               (bands,)).copy()
        offset = np.broadcast_to(np.asarray(raw.get("shift_offset", 0.0), dtype=np.float64),
                                 (bands,)).copy()
        if "class_means" in raw:
            means = np.asarray(raw["class_means"], dtype=np.float64)
            stds = np.asarray(raw["class_stds"], dtype=np.float64)
        else:
            means, stds = random_prototypes(num_classes, bands,
                                            int(raw.get("prototype_seed", 0)))
        return cls(
            num_classes=num_classes,
            bands=bands,
            height=int(raw["height"]),
            width=int(raw["width"]),
            class_means=means,
            class_stds=stds,
            shift_gain=gain,
            shift_offset=offset,
            noise_level=float(raw.get("noise_level", 0.1)),
            region_sites=int(raw.get("region_sites", 12)),
            labeled_fraction=float(raw.get("labeled_fraction", 1.0)),
        )


def random_prototypes(num_classes: int, bands: int, seed: int = 0):
    """Smooth per-class spectral prototypes (random walk, box-smoothed)."""
    rng = np.random.default_rng(seed)
    steps = rng.normal(0.0, 0.35, size=(num_classes, bands))
    means = np.cumsum(steps, axis=1)
    kernel = np.ones(5) / 5.0
    means = np.stack([np.convolve(row, kernel, mode="same") for row in means])
    means += rng.normal(0.0, 1.0, size=(num_classes, 1))
    stds = np.full((num_classes, bands), 0.05)
    return means, stds


def synth_domain_pair(spec: SceneSpec, seed: int) -> tuple[HsiCube, HsiCube]:
    """Generate a (source, target) cube pair; deterministic given seed."""
    rng = np.random.default_rng(seed)
    full_labels = _voronoi_labels(spec, rng)
    labels = full_labels
    if spec.labeled_fraction < 1.0:
        labels = _drop_labels(full_labels, spec, rng)

    # reflectance follows the full geometry; unlabeled pixels keep their signal
    cls_idx = full_labels - 1
    base = spec.class_means[cls_idx]               # (H, W, bands)
    scale = spec.class_stds[cls_idx]

    src = base + scale * rng.standard_normal(base.shape)
    src += spec.noise_level * rng.standard_normal(base.shape)

    tgt_base = base * spec.shift_gain + spec.shift_offset
    tgt = tgt_base + scale * rng.standard_normal(base.shape)
    tgt += spec.noise_level * rng.standard_normal(base.shape)

    source = HsiCube(src.astype(np.float32), labels, spec.num_classes)
    target = HsiCube(tgt.astype(np.float32), labels.copy(), spec.num_classes)
    return source, target


def _voronoi_labels(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    sites_r = rng.integers(0, spec.height, size=spec.region_sites)
    sites_c = rng.integers(0, spec.width, size=spec.region_sites)
    site_class = np.arange(spec.region_sites) % spec.num_classes + 1
    rows = np.arange(spec.height)[:, None, None]
    cols = np.arange(spec.width)[None, :, None]
    dist = (rows - sites_r[None, None, :]) ** 2 + (cols - sites_c[None, None, :]) ** 2
    labels = site_class[np.argmin(dist, axis=2)].astype(np.int64)
    # argmin ties go to the lowest site index, so the map is deterministic
    present = np.unique(labels)
    if present.size < spec.num_classes:
        # stamp one pixel per missing class at its first site location
        for k in range(1, spec.num_classes + 1):
            if k not in present:
                labels[sites_r[k - 1], sites_c[k - 1]] = k
    return labels


def _drop_labels(labels: np.ndarray, spec: SceneSpec,
                 rng: np.random.Generator) -> np.ndarray:
    flat = labels.ravel().copy()
    n = flat.size
    keep_n = max(spec.num_classes, int(round(n * spec.labeled_fraction)))
    keep = np.zeros(n, dtype=bool)
    keep[rng.permutation(n)[:keep_n]] = True
    for k in range(1, spec.num_classes + 1):
        if not np.any(keep & (flat == k)):
            candidates = np.nonzero(flat == k)[0]
            keep[candidates[0]] = True
    flat[~keep] = 0
    return flat.reshape(labels.shape)


def pair_batch_indices(n_src: int, n_tgt: int, batch_size: int, seed: int,
                       epoch: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Index pairs for one epoch of paired source/target batches.

    Both sets are permuted with an rng keyed on (seed, epoch); the smaller
    set wraps around so every batch pair is full-width on the larger side.
    Yields ceil(max(n_src, n_tgt) / batch_size) pairs.
    """
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if n_src == 0 or n_tgt == 0:
        raise ValueError("both patch sets must be non-empty")
    rng = np.random.default_rng([seed, epoch])
    perm_src = rng.permutation(n_src)
    perm_tgt = rng.permutation(n_tgt)
    n = max(n_src, n_tgt)
    src_seq = perm_src[np.arange(n) % n_src]
    tgt_seq = perm_tgt[np.arange(n) % n_tgt]
    batches = []
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        batches.append((src_seq[start:stop], tgt_seq[start:stop]))
    return batches


def sample_pair_batches(src: PatchSet, tgt: PatchSet, batch_size: int,
                        seed: int, epoch: int = 0):
    """Yield (source patches, source labels, target patches) for one epoch.

    Target class labels are never exposed.  Deterministic given
    (seed, epoch); see pair_batch_indices for the pairing policy.
    """
    for src_idx, tgt_idx in pair_batch_indices(len(src), len(tgt), batch_size,
                                               seed, epoch):
        yield (src.patches[src_idx], src.class_labels[src_idx],
               tgt.patches[tgt_idx])
