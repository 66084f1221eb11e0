"""Seeded two-channel phantoms with prostate and lesion ground truth.

A case is an ellipsoidal gland holding zero to a few lesion blobs. Blobs are
grown voxel by voxel from a seed along a smoothed random field, so each one
is a single connected component with an exact, sampled volume. Channel 0
(T2w-like) is brighter inside the gland and mildly darker in lesions;
channel 1 (ADC-like) drops strongly inside lesions.
"""

from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy import ndimage

from .core import (LESION, PROSTATE, CaseRecord, GridSpec, IntensityVolume, LabelVolume,
                   ValidationError, derive_rng, normalize_intensity)


@dataclass
class ShiftKnobs:
    gamma: float = 1.0
    extra_noise: float = 0.0
    lesion_contrast: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValidationError("gamma must be > 0")
        if self.extra_noise < 0:
            raise ValidationError("extra noise must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.gamma == 1.0 and self.extra_noise == 0.0 and self.lesion_contrast == 1.0


@dataclass
class PhantomConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    n_cases: int = 20
    positive_fraction: float = 0.17
    max_lesions: int = 3
    lesion_volume: tuple[float, float] = (30, 4000)
    prostate_volume: tuple[float, float] = (10_000, 40_000)
    # per-class channel means: (background, prostate, lesion)
    t2w_means: tuple[float, float, float] = (0.30, 0.60, 0.48)
    adc_means: tuple[float, float, float] = (0.40, 0.62, 0.30)
    noise_sigma: float = 0.06
    texture_sigma: float = 0.05
    lesion_gap: int = 1  # minimum voxel gap between two lesions
    shift: ShiftKnobs = field(default_factory=ShiftKnobs)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.grid, Mapping):
            self.grid = GridSpec(tuple(self.grid["dims"]), tuple(self.grid["spacing"]))
        if isinstance(self.shift, Mapping):
            self.shift = ShiftKnobs(**self.shift)
        if not 0 <= self.positive_fraction <= 1:
            raise ValidationError("positive fraction must lie in [0, 1]")
        lo, hi = self.lesion_volume
        plo, phi = self.prostate_volume
        if not (0 < lo <= hi) or not (0 < plo <= phi):
            raise ValidationError("volume ranges must be positive and ordered")
        if lo > 0.5 * plo:
            raise ValidationError("smallest lesion does not fit in the smallest prostate")
        if phi > 0.7 * self.grid.n_voxels:
            raise ValidationError("prostate volume range does not fit in the grid")
        if self.max_lesions < 1:
            raise ValidationError("max_lesions must be >= 1")
        if self.lesion_gap < 1:
            raise ValidationError("lesion_gap must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = {"dims": list(self.grid.dims), "spacing": list(self.grid.spacing)}
        return d


def _ellipsoid(grid: GridSpec, centre_mm, axes_mm) -> np.ndarray:
    nz, ny, nx = grid.shape
    sx, sy, sz = grid.spacing
    z, y, x = np.meshgrid(np.arange(nz) * sz, np.arange(ny) * sy, np.arange(nx) * sx,
                          indexing="ij")
    r = ((x - centre_mm[0]) / axes_mm[0]) ** 2 + ((y - centre_mm[1]) / axes_mm[1]) ** 2
    if nz > 1:
        r = r + ((z - centre_mm[2]) / axes_mm[2]) ** 2
    return r <= 1.0


def _prostate(grid: GridSpec, target: float, rng: np.random.Generator) -> np.ndarray:
    nx, ny, nz = grid.dims
    sx, sy, sz = grid.spacing
    centre = np.array([(nx - 1) * sx, (ny - 1) * sy, (nz - 1) * sz]) / 2.0
    centre[:2] += rng.uniform(-0.06, 0.06, 2) * np.array([nx * sx, ny * sy])
    aspect = np.array([1.0, rng.uniform(0.7, 1.0), rng.uniform(0.8, 1.2)])
    lo, hi = 0.5, max(nx * sx, ny * sy, nz * sz)
    mask = _ellipsoid(grid, centre, aspect * hi)
    for _ in range(40):  # bisection on the overall scale
        mid = 0.5 * (lo + hi)
        mask = _ellipsoid(grid, centre, aspect * mid)
        if mask.sum() < target:
            lo = mid
        else:
            hi = mid
    return _ellipsoid(grid, centre, aspect * hi)


_FACE = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def _grow(priority: np.ndarray, allowed: np.ndarray, seed_idx: tuple, target: int) -> np.ndarray:
    """Best-first region growing along ``priority`` restricted to ``allowed``."""
    shape = allowed.shape
    out = np.zeros(shape, dtype=bool)
    seen = np.zeros(shape, dtype=bool)
    heap = [(-priority[seed_idx], seed_idx)]
    seen[seed_idx] = True
    count = 0
    while heap and count < target:
        _, (z, y, x) = heapq.heappop(heap)
        out[z, y, x] = True
        count += 1
        for dz, dy, dx in _FACE:
            n = (z + dz, y + dy, x + dx)
            if (0 <= n[0] < shape[0] and 0 <= n[1] < shape[1] and 0 <= n[2] < shape[2]
                    and not seen[n] and allowed[n]):
                seen[n] = True
                heapq.heappush(heap, (-priority[n], n))
    return out


def _lesion(prostate: np.ndarray, occupied: np.ndarray, target: int, grid: GridSpec,
            rng: np.random.Generator, gap: int = 1) -> np.ndarray | None:
    full = ndimage.generate_binary_structure(3, 3)
    for ax, n in enumerate(prostate.shape):
        if n == 1:  # no neighbours exist along a singleton axis
            full = np.take(full, [1], axis=ax)
    # one-voxel margin to the gland border, ``gap`` voxels to every other lesion
    allowed = ndimage.binary_erosion(prostate, full, border_value=1)
    if occupied.any():
        allowed &= ~ndimage.binary_dilation(occupied, full, iterations=gap)
    if allowed.sum() < target:
        return None
    depth = ndimage.distance_transform_edt(allowed, sampling=grid.spacing[::-1])
    candidates = np.argwhere(depth >= np.quantile(depth[allowed], 0.5) - 1e-9)
    sigma = np.array([2.0, 2.0, 0.7])[::-1] / np.array(grid.spacing)[::-1] * 1.5
    noise = ndimage.gaussian_filter(rng.normal(size=prostate.shape), sigma)
    noise /= noise.std() + 1e-12
    for _ in range(8):
        seed_idx = tuple(int(v) for v in candidates[rng.integers(len(candidates))])
        zz, yy, xx = np.indices(prostate.shape)
        dist = np.sqrt(((zz - seed_idx[0]) * grid.spacing[2]) ** 2
                       + ((yy - seed_idx[1]) * grid.spacing[1]) ** 2
                       + ((xx - seed_idx[2]) * grid.spacing[0]) ** 2)
        priority = 0.6 * noise - dist / max(1.0, np.sqrt(target) / 2)
        blob = _grow(priority, allowed, seed_idx, target)
        if blob.sum() == target:
            return blob
    return None


def generate_case(config: PhantomConfig, case_index: int) -> tuple[IntensityVolume, LabelVolume]:
    """Draw one phantom; deterministic in ``(config.seed, case_index)``."""
    rng = derive_rng(config.seed, "synth", case_index)
    grid = config.grid
    plo, phi = config.prostate_volume
    prostate = _prostate(grid, rng.uniform(plo, phi), rng)
    labels = np.where(prostate, PROSTATE, 0).astype(np.uint8)
    positive = rng.random() < config.positive_fraction
    if positive:
        n_les = int(rng.integers(1, config.max_lesions + 1))
        occupied = np.zeros_like(prostate)
        lo, hi = config.lesion_volume
        placed = 0
        for _ in range(n_les * 4):
            if placed == n_les:
                break
            cap = min(hi, 0.4 * prostate.sum() / n_les)
            if cap < lo:
                cap = lo
            target = int(round(np.exp(rng.uniform(np.log(lo), np.log(cap)))))
            target = int(np.clip(target, np.ceil(lo), np.floor(hi)))
            blob = _lesion(prostate, occupied, target, grid, rng, config.lesion_gap)
            if blob is None:
                continue
            occupied |= blob
            placed += 1
        if placed == 0:
            raise ValidationError(f"case {case_index}: could not place any lesion")
        labels[occupied] = LESION

    data = []
    for means, noise_scale in ((config.t2w_means, 1.0), (config.adc_means, 1.0)):
        base = np.choose(labels, means).astype(np.float64)
        texture = ndimage.gaussian_filter(rng.normal(size=grid.shape), 1.5)
        texture *= config.texture_sigma / (texture.std() + 1e-12)
        noise = rng.normal(0.0, config.noise_sigma * noise_scale, grid.shape)
        data.append(base + texture + noise)
    image = normalize_intensity(IntensityVolume(grid, np.stack(data), ("t2w", "adc")))
    label_volume = LabelVolume(grid, labels)
    if not config.shift.is_identity:
        image = apply_domain_shift(image, config.shift, labels,
                                   seed=int(derive_rng(config.seed, "shift", case_index)
                                            .integers(2 ** 31)))
    return image, label_volume


def apply_domain_shift(volume: IntensityVolume, knobs: ShiftKnobs, labels: np.ndarray | None = None,
                       seed: int = 0, renormalize: bool = True) -> IntensityVolume:
    """Gamma remap, extra Gaussian noise and lesion contrast rescaling per channel."""
    if knobs.gamma <= 0:
        raise ValidationError("gamma must be > 0")
    data = np.clip(np.asarray(volume.data, dtype=np.float64), 0.0, None) ** knobs.gamma
    if knobs.lesion_contrast != 1.0:
        if labels is None:
            raise ValidationError("lesion contrast rescaling needs the label map")
        les = labels == LESION
        gland = labels == PROSTATE
        for ch in data:
            if les.any() and gland.any():
                ref = ch[gland].mean()
                ch[les] = ref + knobs.lesion_contrast * (ch[les] - ref)
    if knobs.extra_noise > 0:
        data = data + np.random.default_rng(seed).normal(0.0, knobs.extra_noise, data.shape)
    out = IntensityVolume(volume.grid, data, volume.channels)
    return normalize_intensity(out) if renormalize else out


def generate_corpus(config: PhantomConfig, domain: str = "in", start: int = 0) -> list[CaseRecord]:
    cases = []
    for i in range(start, start + config.n_cases):
        image, labels = generate_case(config, i)
        cases.append(CaseRecord(f"{domain}{i:04d}", image, labels, domain=domain))
    return cases


def lesion_slice_corpus(n: int, seed: int = 0, area_range: tuple[float, float] = (10, 600),
                        median_area: float = 120.0, log_sigma: float = 0.9,
                        size: int = 48) -> list[np.ndarray]:
    """Stand-alone 2D lesion cross-sections with a right-skewed size histogram.

    Areas are log-normal (``median_area``, ``log_sigma``) clipped to
    ``area_range``; the defaults put most slices well below 200 voxels with
    a tail up to the upper bound, as for slice-wise prostate lesion sizes at
    1 x 1 mm in-plane spacing.
    """
    rng = derive_rng(seed, "lesion_slices")
    lo, hi = area_range
    out = []
    allowed = np.zeros((1, size, size), dtype=bool)
    allowed[0, 1:-1, 1:-1] = True
    yy, xx = np.indices((size, size))
    while len(out) < n:
        area = int(np.clip(round(median_area * np.exp(log_sigma * rng.normal())), lo, hi))
        noise = ndimage.gaussian_filter(rng.normal(size=(size, size)), 3.0)
        noise /= noise.std() + 1e-12
        c = (size // 2, size // 2)
        aspect = rng.uniform(0.6, 1.0)
        dist = np.sqrt(((yy - c[0]) / aspect) ** 2 + (xx - c[1]) ** 2)
        priority = 0.6 * noise - dist / max(1.0, np.sqrt(area) / 2)
        blob = _grow(priority[None], allowed, (0,) + c, area)[0]
        if blob.sum() == area:
            out.append(blob)
    return out
