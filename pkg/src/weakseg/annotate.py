"""Weak circle-scribble annotations derived from dense ground truth.

Scribble functions work on one 2D axial slice of one lesion (``(ny, nx)``
boolean array) and return a boolean scribble of the same shape. A voxel
belongs to a circle when its centre lies within the radius, measured in
millimetres with the in-plane spacing.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .core import (BACKGROUND, LESION, PROSTATE, LabelVolume, ValidationError, binary_erode,
                   chamfer_transform, connected_components, derive_rng, distance_transform)
from .losses import UNLABELED

STRATEGIES = ("random_valid", "center_distmap", "random_distmap", "erosion")


@dataclass
class ScribbleConfig:
    max_radius_mm: float = 3.0
    strategy: str = "random_valid"
    erosion_target_fraction: float = 0.10
    # explicit erosion stopping area (voxels); calibrated from the corpus when None
    erosion_target_area: float | None = None
    erosion_element: str = "square"
    background_fraction: float = 0.0
    background_margin_mm: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.max_radius_mm <= 0:
            raise ValidationError("max_radius_mm must be > 0")
        if not 0 < self.erosion_target_fraction <= 1:
            raise ValidationError("erosion_target_fraction must lie in (0, 1]")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r}")
        if not 0 <= self.background_fraction <= 1:
            raise ValidationError("background_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def disk(shape: tuple[int, int], centre: tuple[int, int], radius_mm: float,
         spacing: tuple[float, float] = (1.0, 1.0)) -> np.ndarray:
    """Voxels of a 2D grid whose centres lie within ``radius_mm`` of ``centre`` (y, x)."""
    sx, sy = spacing
    yy, xx = np.ogrid[:shape[0], :shape[1]]
    d2 = ((yy - centre[0]) * sy) ** 2 + ((xx - centre[1]) * sx) ** 2
    return d2 <= radius_mm ** 2 + 1e-9


def _radii(max_radius_mm: float, spacing) -> np.ndarray:
    # candidate radii from the maximum down to 0 in one-voxel steps
    step = min(spacing)
    n = int(np.floor(max_radius_mm / step + 1e-9))
    return np.concatenate([[max_radius_mm], max_radius_mm - step * np.arange(1, n + 1)]).clip(0)


def largest_fitting_disk(mask: np.ndarray, centre, max_radius_mm: float, spacing) -> np.ndarray:
    for r in _radii(max_radius_mm, spacing):
        d = disk(mask.shape, centre, r, spacing)
        if not np.any(d & ~mask):
            return d
    out = np.zeros_like(mask)
    out[tuple(centre)] = True
    return out


def valid_centres(mask: np.ndarray, radius_mm: float, spacing=(1.0, 1.0)) -> np.ndarray:
    """Voxels where a circle of ``radius_mm`` fits entirely inside ``mask``."""
    r = int(np.ceil(radius_mm / min(spacing) + 1e-9))
    footprint = disk((2 * r + 1, 2 * r + 1), (r, r), radius_mm, spacing)
    return ndimage.binary_erosion(mask, structure=footprint, border_value=0)


def scribble_random_valid(lesion_slice: np.ndarray, config: ScribbleConfig,
                          rng: np.random.Generator, spacing=(1.0, 1.0)) -> np.ndarray:
    """Circle of the largest fitting radius (at most the maximum) at a random valid centre.

    Radii shrink one voxel at a time until at least one centre admits the
    whole circle inside the lesion; the centre is then drawn uniformly among
    those. Radius 0 is the single drawn voxel.
    """
    mask = np.asarray(lesion_slice, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    for r in _radii(config.max_radius_mm, spacing):
        ok = valid_centres(mask, r, spacing) if r > 0 else mask
        if ok.any():
            pts = np.argwhere(ok)
            centre = tuple(pts[rng.integers(len(pts))])
            return disk(mask.shape, centre, r, spacing)
    raise AssertionError("radius 0 always fits")


def scribble_center_distmap(lesion_slice: np.ndarray, config: ScribbleConfig,
                            rng: np.random.Generator | None = None,
                            spacing=(1.0, 1.0)) -> np.ndarray:
    """Largest fitting circle centred on the distance-map maximum."""
    mask = np.asarray(lesion_slice, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    dist = distance_transform(mask)
    centre = np.unravel_index(int(np.argmax(dist)), mask.shape)
    return largest_fitting_disk(mask, centre, config.max_radius_mm, spacing)


def scribble_random_distmap(lesion_slice: np.ndarray, config: ScribbleConfig,
                            rng: np.random.Generator, spacing=(1.0, 1.0)) -> np.ndarray:
    """Full-radius circle centred on a voxel drawn with probability proportional to depth."""
    mask = np.asarray(lesion_slice, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    dist = distance_transform(mask).ravel()
    idx = rng.choice(dist.size, p=dist / dist.sum())
    centre = np.unravel_index(int(idx), mask.shape)
    return disk(mask.shape, centre, config.max_radius_mm, spacing)


def _erosion_chain(mask: np.ndarray, element: str) -> list[np.ndarray]:
    chain = [mask]
    while True:
        nxt = binary_erode(chain[-1], element)
        if not nxt.any():
            return chain
        chain.append(nxt)


def _deepest(mask: np.ndarray, element: str) -> tuple:
    return np.unravel_index(int(np.argmax(chamfer_transform(mask, element))), mask.shape)


def _component_at(mask: np.ndarray, point: tuple) -> np.ndarray:
    conn = "full"
    for comp in connected_components(mask, conn):
        if np.ravel_multi_index(point, mask.shape) in comp:
            out = np.zeros(mask.size, dtype=bool)
            out[comp] = True
            return out.reshape(mask.shape)
    raise AssertionError("deepest point must survive every erosion")


def scribble_erosion(lesion_slice: np.ndarray, target_area: float,
                     element: str = "square") -> np.ndarray:
    """Erode until the area drops to ``target_area`` (never to empty).

    When erosion splits the lesion, the piece containing the deepest voxel is
    kept so the scribble stays a single component.
    """
    mask = np.asarray(lesion_slice, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    m = mask
    while m.sum() > target_area:
        nxt = binary_erode(m, element)
        if not nxt.any():
            break
        m = nxt
    return _component_at(m, _deepest(mask, element))


def erosion_coverage_curve(lesion_slices: Iterable[np.ndarray], element: str = "square"):
    """Per-lesion erosion chains summarised for target-area calibration.

    Returns ``(chains, total)`` where each chain lists ``(area_before_stop,
    kept_area)`` per erosion depth and ``total`` is the summed lesion area.
    """
    chains = []
    total = 0
    for m in lesion_slices:
        m = np.asarray(m, dtype=bool)
        if not m.any():
            continue
        total += int(m.sum())
        p = _deepest(m, element)
        chains.append([(int(c.sum()), int(_component_at(c, p).sum()))
                       for c in _erosion_chain(m, element)])
    return chains, total


def _coverage_for_area(chains, total, area) -> float:
    kept = 0
    for chain in chains:
        pick = chain[-1][1]
        for a, k in chain:
            if a <= area:
                pick = k
                break
        kept += pick
    return kept / total if total else 0.0


def calibrate_erosion_area(lesion_slices: Sequence[np.ndarray], fraction: float,
                           element: str = "square") -> float:
    """Stopping area whose corpus coverage is closest to ``fraction``."""
    chains, total = erosion_coverage_curve(lesion_slices, element)
    if not chains:
        raise ValidationError("cannot calibrate erosion on an empty corpus")
    candidates = sorted({a for chain in chains for a, _ in chain})
    best = min(candidates, key=lambda a: (abs(_coverage_for_area(chains, total, a) - fraction), a))
    return float(best)


def scribble(lesion_slice: np.ndarray, config: ScribbleConfig, rng: np.random.Generator,
             spacing=(1.0, 1.0), target_area: float | None = None) -> np.ndarray:
    if config.strategy == "random_valid":
        return scribble_random_valid(lesion_slice, config, rng, spacing)
    if config.strategy == "center_distmap":
        return scribble_center_distmap(lesion_slice, config, rng, spacing)
    if config.strategy == "random_distmap":
        return scribble_random_distmap(lesion_slice, config, rng, spacing)
    if target_area is None:
        target_area = default_erosion_area(config, spacing)
    return scribble_erosion(lesion_slice, target_area, config.erosion_element)


def default_erosion_area(config: ScribbleConfig, spacing=(1.0, 1.0)) -> float:
    if config.erosion_target_area is not None:
        return float(config.erosion_target_area)
    r = int(np.ceil(config.max_radius_mm / min(spacing)))
    return float(disk((2 * r + 1, 2 * r + 1), (r, r), config.max_radius_mm, spacing).sum())


def annotate_case(labels: LabelVolume, config: ScribbleConfig, case_index: int = 0,
                  erosion_area: float | None = None) -> np.ndarray:
    """Weak annotation map for one case (``UNLABELED`` outside the scribbles).

    Per axial slice: one scribble per lesion component, one random-valid circle
    in the gland and, when ``background_fraction`` > 0, a sparse random sample
    of background voxels away from it.
    """
    rng = derive_rng(config.seed, "annotate", case_index)
    spacing = labels.grid.spacing[:2]
    lab = labels.labels
    out = np.full(lab.shape, UNLABELED, dtype=np.uint8)
    margin = max(1, int(np.ceil(config.background_margin_mm / min(spacing))))
    grow = ndimage.generate_binary_structure(2, 2)
    for z in range(lab.shape[0]):
        sl = lab[z]
        ann = out[z]
        gland = sl != BACKGROUND
        if config.background_fraction > 0:
            far = ~ndimage.binary_dilation(gland, grow, iterations=margin) if gland.any() \
                else np.ones_like(gland)
            pick = far & (rng.random(sl.shape) < config.background_fraction)
            ann[pick] = BACKGROUND
        prostate = sl == PROSTATE
        if prostate.any():
            ann[scribble_random_valid(prostate, config, rng, spacing)] = PROSTATE
        for comp in connected_components(sl == LESION, "full"):
            m = np.zeros(sl.size, dtype=bool)
            m[comp] = True
            s = scribble(m.reshape(sl.shape), config, rng, spacing, erosion_area)
            ann[s] = LESION
    return out


def lesion_slices(label_volumes: Iterable[LabelVolume]) -> list[np.ndarray]:
    """Every (slice, 2D lesion component) mask of a corpus."""
    out = []
    for lv in label_volumes:
        for sl in lv.labels:
            for comp in connected_components(sl == LESION, "full"):
                m = np.zeros(sl.size, dtype=bool)
                m[comp] = True
                out.append(m.reshape(sl.shape))
    return out


def annotate_corpus(label_volumes: Sequence[LabelVolume], config: ScribbleConfig):
    """Annotate a corpus; erosion without an explicit area is calibrated on it first."""
    area = None
    if config.strategy == "erosion":
        if config.erosion_target_area is not None:
            area = float(config.erosion_target_area)
        else:
            area = calibrate_erosion_area(lesion_slices(label_volumes),
                                          config.erosion_target_fraction, config.erosion_element)
    return [annotate_case(lv, config, i, area) for i, lv in enumerate(label_volumes)], area


def coverage_fraction(annotations: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                      class_id: int = LESION) -> float | None:
    """Voxels annotated as ``class_id`` over ground-truth ``class_id`` voxels, corpus-wide.

    Scribbles that spill outside the object (random distance-map circles)
    count towards the annotated amount. Returns None when the class is absent.
    """
    hit = total = 0
    for ann, lab in zip(annotations, labels):
        total += int((np.asarray(lab) == class_id).sum())
        hit += int((np.asarray(ann) == class_id).sum())
    return hit / total if total else None
