"""Grid geometry, volume containers and the morphology primitives.

Arrays are stored ``[z, y, x]`` (x fastest in memory) while ``GridSpec.dims``
keeps the ``(nx, ny, nz)`` convention of the on-disk header. Voxel sets are
sorted 1-D arrays of flat (C-order) indices into that array.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

BACKGROUND, PROSTATE, LESION = 0, 1, 2
N_CLASSES = 3
CLASS_NAMES = ("background", "prostate", "lesion")


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, int, int] = (96, 96, 20)
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValidationError("dims and spacing must be triples")
        if min(dims) < 1:
            raise ValidationError(f"dims must be >= 1, got {dims}")
        if min(spacing) <= 0:
            raise ValidationError(f"spacing must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape ``(nz, ny, nx)``."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def slice_voxels(self) -> int:
        return self.dims[0] * self.dims[1]


@dataclass
class IntensityVolume:
    grid: GridSpec
    data: np.ndarray  # (n_channels, nz, ny, nx)
    channels: tuple[str, ...] = ("t2w", "adc")

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.channels = tuple(self.channels)
        if self.data.ndim != 4 or self.data.shape[1:] != self.grid.shape:
            raise ValidationError(
                f"data shape {self.data.shape} does not match grid {self.grid.shape}")
        if self.data.shape[0] != len(self.channels):
            raise ValidationError("one channel name per channel is required")


@dataclass
class LabelVolume:
    grid: GridSpec
    labels: np.ndarray  # (nz, ny, nx) uint8 class ids

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.grid.shape:
            raise ValidationError(
                f"labels shape {self.labels.shape} does not match grid {self.grid.shape}")
        if self.labels.size and self.labels.max() >= N_CLASSES:
            raise ValidationError(f"class ids must be < {N_CLASSES}")

    def mask(self, class_id: int) -> np.ndarray:
        return self.labels == class_id


@dataclass
class CaseRecord:
    """One patient: image, dense ground truth and optionally its weak annotation."""

    case_id: str
    image: IntensityVolume
    labels: LabelVolume
    annotation: np.ndarray | None = None
    domain: str = "in"

    @property
    def positive(self) -> bool:
        return bool((self.labels.labels == LESION).any())


def derive_rng(seed: int, component: str, index: int = 0) -> np.random.Generator:
    """Generator keyed on (global seed, component name, index); stable across runs."""
    tag = zlib.crc32(component.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, tag, int(index)]))


def normalize_intensity(volume: IntensityVolume) -> IntensityVolume:
    """Min-max normalise each channel to [0, 1]; constant channels map to 0."""
    data = np.asarray(volume.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValidationError("intensity volume contains non-finite values")
    out = np.zeros_like(data)
    for i, channel in enumerate(data):
        lo, hi = channel.min(), channel.max()
        if hi > lo:
            out[i] = (channel - lo) / (hi - lo)
    return IntensityVolume(volume.grid, out, volume.channels)


def _resample_indices(n_src: int, s_src: float, n_dst: int, s_dst: float) -> np.ndarray:
    # nearest source voxel for each destination voxel, centres aligned at the
    # middle of the field of view; out of range -> -1 (zero padded later)
    n_res = max(1, int(round(n_src * s_src / s_dst)))
    centre_src = (n_src - 1) / 2.0
    centre_res = (n_res - 1) / 2.0
    res_to_src = np.floor((np.arange(n_res) - centre_res) * (s_dst / s_src) + centre_src + 0.5)
    res_to_src = np.clip(res_to_src.astype(np.int64), 0, n_src - 1)
    # centre crop / pad from the resampled length to the target length
    offset = (n_res - n_dst) // 2
    idx = np.arange(n_dst) + offset
    valid = (idx >= 0) & (idx < n_res)
    out = np.full(n_dst, -1, dtype=np.int64)
    out[valid] = res_to_src[idx[valid]]
    return out


def _resample_array(arr: np.ndarray, source: GridSpec, target: GridSpec) -> np.ndarray:
    # arr (..., nz, ny, nx)
    lead = arr.shape[:-3]
    out = arr
    for axis_from_end, (ns, ss, nd, sd) in enumerate(
            zip(source.dims, source.spacing, target.dims, target.spacing)):
        axis = arr.ndim - 1 - axis_from_end  # x is the last array axis
        idx = _resample_indices(ns, ss, nd, sd)
        taken = np.take(out, np.clip(idx, 0, None), axis=axis)
        shape = [1] * out.ndim
        shape[axis] = nd
        taken = np.where((idx >= 0).reshape(shape), taken, 0)
        out = taken
    assert out.shape == lead + target.shape
    return out


def resample_pad_crop(volume: IntensityVolume, target: GridSpec) -> IntensityVolume:
    """Nearest-neighbour resample to ``target.spacing`` then centre crop or zero pad."""
    data = _resample_array(np.asarray(volume.data), volume.grid, target)
    return IntensityVolume(target, data, volume.channels)


def resample_labels(labels: LabelVolume, target: GridSpec) -> LabelVolume:
    data = _resample_array(labels.labels, labels.grid, target)
    return LabelVolume(target, data.astype(np.uint8))


def _structure(ndim: int, connectivity: str) -> np.ndarray:
    if connectivity == "full":
        return ndimage.generate_binary_structure(ndim, ndim)
    if connectivity == "face":
        return ndimage.generate_binary_structure(ndim, 1)
    raise ValidationError(f"unknown connectivity {connectivity!r}")


def connected_components(mask: np.ndarray, connectivity: str = "full") -> list[np.ndarray]:
    """Split a boolean array into maximal connected voxel sets.

    Returns a list of sorted flat-index arrays ordered by the per-component
    minimum coordinate along each axis (outermost axis first).
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_structure(mask.ndim, connectivity))
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n + 1)
    bounds = np.cumsum(counts)
    comps = [order[bounds[k - 1]:bounds[k]] for k in range(1, n + 1)]
    coords = [np.unravel_index(c, mask.shape) for c in comps]
    keys = [tuple(int(ax.min()) for ax in cc) + (int(c[0]),) for cc, c in zip(coords, comps)]
    return [comps[i] for i in sorted(range(n), key=lambda i: keys[i])]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two voxel sets (flat indices); 0 if both empty."""
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = len(a) + len(b) - inter
    return inter / union if union else 0.0


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance (voxel units) from each true voxel to the nearest false one.

    Everything outside the array counts as false, so an all-true mask still
    yields finite distances.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(padded)
    return dist[tuple(slice(1, -1) for _ in range(mask.ndim))]


def chamfer_transform(mask: np.ndarray, element: str = "square") -> np.ndarray:
    """Chessboard (square element) or city-block (cross element) distance, border as background."""
    metric = {"square": "chessboard", "cross": "taxicab"}.get(element)
    if metric is None:
        raise ValidationError(f"unknown structuring element {element!r}")
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    dist = ndimage.distance_transform_cdt(padded, metric=metric)
    return dist[tuple(slice(1, -1) for _ in range(mask.ndim))]


def structuring_element(element: str, ndim: int = 2) -> np.ndarray:
    if element == "square":
        return np.ones((3,) * ndim, dtype=bool)
    if element == "cross":
        return ndimage.generate_binary_structure(ndim, 1)
    raise ValidationError(f"unknown structuring element {element!r}")


def binary_erode(mask: np.ndarray, element: str = "square") -> np.ndarray:
    """One erosion step; out-of-grid voxels count as false."""
    mask = np.asarray(mask, dtype=bool)
    return ndimage.binary_erosion(mask, structure=structuring_element(element, mask.ndim),
                                  border_value=0)


# --------------------------------------------------------------------------
# Container format: raw little-endian payload (x fastest) + JSON sidecar
# --------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".raw", ".json") else path
    return stem.with_suffix(".raw"), stem.with_suffix(".json")


def _write(path, grid: GridSpec, arr: np.ndarray, channels: Sequence[str], dtype: str) -> Path:
    raw, side = _paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    header = {"dims": list(grid.dims), "spacing_mm": list(grid.spacing),
              "channels": list(channels), "dtype": dtype, "order": "xyz"}
    side.write_text(json.dumps(header, indent=1) + "\n")
    return raw


def _read(path) -> tuple[GridSpec, np.ndarray, list[str]]:
    raw, side = _paths(path)
    header = json.loads(side.read_text())
    if header.get("order", "xyz") != "xyz":
        raise ValidationError(f"unsupported voxel order {header['order']!r}")
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise ValidationError(f"unsupported dtype {dtype!r}")
    grid = GridSpec(tuple(header["dims"]), tuple(header["spacing_mm"]))
    channels = list(header.get("channels", []))
    arr = np.frombuffer(raw.read_bytes(), dtype=_DTYPES[dtype])
    n_ch = max(1, len(channels))
    expected = n_ch * grid.n_voxels
    if arr.size != expected:
        raise ValidationError(f"{raw}: expected {expected} values, found {arr.size}")
    return grid, arr.reshape((n_ch,) + grid.shape), channels


def write_volume(path, volume: IntensityVolume) -> Path:
    return _write(path, volume.grid, volume.data, volume.channels, "f32")


def read_volume(path) -> IntensityVolume:
    grid, arr, channels = _read(path)
    return IntensityVolume(grid, arr.astype(np.float64), tuple(channels))


def write_labels(path, grid: GridSpec, labels: np.ndarray, name: str = "labels") -> Path:
    return _write(path, grid, np.asarray(labels)[None], [name], "u8")


def read_labels(path) -> tuple[GridSpec, np.ndarray]:
    grid, arr, _ = _read(path)
    return grid, arr[0].copy()
