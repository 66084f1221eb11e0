"""Training loop, balanced sampling, stratified folds and ensembling."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import losses as L
from . import metrics
from .core import LESION, N_CLASSES, CaseRecord, IntensityVolume, ValidationError, derive_rng
from .model import AdamState, NetSpec, adam_step, backward, forward, init_params

logger = logging.getLogger(__name__)

LOSSES = ("supervised_ce_dice", "partial_ce", "ce_it", "ce_it_cb")


class TrainingError(RuntimeError):
    """Training hit a non-finite loss; ``diagnostic`` describes the batch."""

    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    folds: int = 5
    loss: str = "ce_it_cb"
    balanced: bool = True
    lr: float = 1e-3
    weight_decay: float = 1e-4
    negative_ce: bool = True
    steps_per_epoch: int | None = None
    threshold: float = 0.5
    min_voxels: int = metrics.MIN_LESION_VOXELS
    iou_min: float = metrics.IOU_MIN
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.folds < 2:
            raise ValidationError("need epochs >= 1, batch_size >= 1 and folds >= 2")
        if self.loss not in LOSSES:
            raise ValidationError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def kfold_split(positive: Sequence[bool], k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold index per case, stratified on case positivity.

    Positives are dealt round-robin first and negatives continue the cycle,
    so fold sizes and per-fold positive counts each differ by at most one.
    """
    positive = np.asarray(positive, dtype=bool)
    n = positive.size
    if n < k:
        raise ValidationError(f"{n} cases cannot fill {k} folds")
    rng = derive_rng(seed, "kfold")
    pos = np.flatnonzero(positive)
    neg = np.flatnonzero(~positive)
    if 0 < pos.size < k:
        warnings.warn(f"only {pos.size} positive cases for {k} folds; folds are not stratified")
        order = rng.permutation(n)
    else:
        order = np.concatenate([rng.permutation(pos), rng.permutation(neg)])
    folds = np.empty(n, dtype=np.int64)
    folds[order] = np.arange(n) % k
    return folds


def balanced_sampler(unit_positive: Sequence[bool], seed: int = 0) -> Iterator[int]:
    """Endless stream of unit indices drawing lesion and lesion-free units with equal odds."""
    unit_positive = np.asarray(unit_positive, dtype=bool)
    rng = derive_rng(seed, "sampler")
    groups = [np.flatnonzero(unit_positive), np.flatnonzero(~unit_positive)]
    if min(g.size for g in groups) == 0:
        warnings.warn("one sampling group is empty; falling back to uniform sampling")
        while True:
            yield int(rng.integers(unit_positive.size))
    while True:
        g = groups[int(rng.integers(2))]
        yield int(g[rng.integers(g.size)])


def uniform_sampler(n: int, seed: int = 0) -> Iterator[int]:
    rng = derive_rng(seed, "sampler")
    while True:
        yield int(rng.integers(n))


@dataclass
class _Unit:
    case: int
    z: int | None  # axial slice for 2D models, None for whole volumes


def _units(cases: Sequence[CaseRecord], spec: NetSpec) -> list[_Unit]:
    if spec.dimensionality == 3:
        return [_Unit(i, None) for i in range(len(cases))]
    return [_Unit(i, z) for i, c in enumerate(cases) for z in range(c.labels.grid.shape[0])]


def _unit_arrays(case: CaseRecord, unit: _Unit):
    if unit.z is None:
        return case.image.data, case.labels.labels, case.annotation
    ann = None if case.annotation is None else case.annotation[unit.z]
    return case.image.data[:, unit.z], case.labels.labels[unit.z], ann


def unit_loss(probs: np.ndarray, labels: np.ndarray, annotation: np.ndarray | None,
              config: TrainConfig, constraint: L.ConstraintConfig):
    """Loss and score gradient of one image under the configured objective.

    Presence tags come from the dense labels: they are the image-level
    weak labels of the unit.
    """
    if config.loss == "supervised_ce_dice":
        return L.supervised_loss(probs, labels, constraint.class_weights)
    if annotation is None:
        raise ValidationError("weakly supervised losses need annotations")
    presence = [bool((labels == c).any()) for c in range(probs.shape[0])]
    if config.loss == "partial_ce":
        if config.negative_ce:
            return L.partial_ce_with_negative(probs, annotation, presence,
                                              constraint.class_weights)
        return L.partial_cross_entropy(probs, annotation, constraint.class_weights)
    modes = {c: ("image_tag" if config.loss == "ce_it" else "common_bounds")
             for c in range(1, probs.shape[0])}
    cfg = L.ConstraintConfig(constraint.lam, modes, constraint.bounds, constraint.class_weights)
    return L.combined_loss(probs, annotation, cfg, presence)


def batch_loss(probs: np.ndarray, arrays: Sequence[tuple], config: TrainConfig,
               constraint: L.ConstraintConfig) -> tuple[float, np.ndarray]:
    """Mean loss over a batch ``(B, C, *spatial)`` and its score gradient.

    The supervised Dice term is pooled over the whole batch, so lesion-free
    slices do not each hand the absent lesion class the largest weight, and
    its cross-entropy shares the class weights of the weak objectives (with
    plain cross-entropy the micro net can sit below the lesion threshold for
    the whole run). Weak objectives are per-image and averaged.
    """
    if config.loss == "supervised_ce_dice":
        labels = np.stack([lab for _, lab, _ in arrays])
        value, grad = L.supervised_loss(np.moveaxis(probs, 0, 1), labels,
                                        constraint.class_weights)
        return value, np.moveaxis(grad, 1, 0)
    grad = np.empty_like(probs)
    total = 0.0
    for i, (_, lab, ann) in enumerate(arrays):
        value, grad[i] = unit_loss(probs[i], lab, ann, config, constraint)
        total += value
    return total / len(arrays), grad / len(arrays)


@dataclass
class TrainResult:
    params: dict
    spec: NetSpec
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def predict(params: dict, spec: NetSpec, image: IntensityVolume, chunk: int = 32) -> np.ndarray:
    """Softmax volume ``(C, nz, ny, nx)``; 2D models run slice by slice."""
    data = np.asarray(image.data)
    if spec.dimensionality == 3:
        scores, _ = forward(params, spec, data[None])
        return L.softmax(scores[0].astype(np.float64), axis=0)
    slices = np.moveaxis(data, 1, 0)  # (nz, C, ny, nx)
    out = []
    for s in range(0, slices.shape[0], chunk):
        scores, _ = forward(params, spec, slices[s:s + chunk])
        out.append(L.softmax(scores.astype(np.float64), axis=1))
    return np.moveaxis(np.concatenate(out), 0, 1)


def ensemble_predict(members: Sequence[tuple[dict, NetSpec]], image: IntensityVolume) -> np.ndarray:
    """Voxel-wise mean of the members' softmax volumes."""
    if not members:
        raise ValidationError("ensemble needs at least one member")
    return average_probabilities([predict(p, s, image) for p, s in members])


def average_probabilities(prob_maps: Sequence[np.ndarray]) -> np.ndarray:
    shapes = {p.shape for p in prob_maps}
    if len(shapes) != 1:
        raise ValidationError(f"member outputs disagree in shape: {sorted(shapes)}")
    total = np.zeros_like(prob_maps[0], dtype=np.float64)
    for p in prob_maps:
        total += p
    return total / len(prob_maps)


def evaluate_probabilities(prob_maps: Sequence[np.ndarray], cases: Sequence[CaseRecord],
                           threshold: float = 0.5, min_voxels: int = metrics.MIN_LESION_VOXELS,
                           iou_min: float = metrics.IOU_MIN) -> dict:
    """Detection summary plus mean prostate-gland Dice for a set of predictions."""
    mcases = [metrics.Case(metrics.extract_lesions(p, threshold, min_voxels, case_id=c.case_id),
                           metrics.gt_lesions(c.labels.labels))
              for p, c in zip(prob_maps, cases)]
    out = metrics.summarize(mcases, iou_min)
    out["dice_prostate"] = float(np.mean([
        metrics.dice(np.argmax(p, axis=0) > 0, c.labels.labels > 0)
        for p, c in zip(prob_maps, cases)]))
    return out


def train_model(train_cases: Sequence[CaseRecord], val_cases: Sequence[CaseRecord],
                config: TrainConfig, spec: NetSpec, constraint: L.ConstraintConfig | None = None,
                on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train one model and keep the epoch with the best validation AP.

    Ties go to the later epoch, so without validation lesions (AP undefined)
    or without any detection the last epoch is kept.
    """
    constraint = constraint or L.ConstraintConfig()
    dtype = np.dtype(config.dtype)
    params = init_params(spec, int(derive_rng(config.seed, "init").integers(2 ** 31)), dtype)
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    units = _units(train_cases, spec)
    if not units:
        raise ValidationError("no training units")
    unit_pos = [bool((_unit_arrays(train_cases[u.case], u)[1] == LESION).any()) for u in units]
    draws = (balanced_sampler(unit_pos, config.seed) if config.balanced
             else uniform_sampler(len(units), config.seed))
    drop_rng = derive_rng(config.seed, "dropout")
    steps = config.steps_per_epoch or max(1, int(np.ceil(len(units) / config.batch_size)))

    result = TrainResult({k: v.copy() for k, v in params.items()}, spec)
    best_ap = -np.inf
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for _ in range(steps):
            batch = [units[next(draws)] for _ in range(config.batch_size)]
            arrays = [_unit_arrays(train_cases[u.case], u) for u in batch]
            x = np.stack([a[0] for a in arrays]).astype(dtype)
            scores, cache = forward(params, spec, x, train=True, rng=drop_rng)
            probs = L.softmax(scores.astype(np.float64), axis=1)
            loss, grad = batch_loss(probs, arrays, config, constraint)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}",
                    {"epoch": epoch, "cases": [train_cases[u.case].case_id for u in batch],
                     "slices": [u.z for u in batch], "loss": float(loss)})
            grads = backward(params, spec, cache, grad)
            adam_step(state, params, grads)
            total += loss
        entry = {"epoch": epoch, "train_loss": total / steps, "val_AP": None}
        if val_cases:
            probs_val = [predict(params, spec, c.image) for c in val_cases]
            summary = evaluate_probabilities(probs_val, val_cases, config.threshold,
                                             config.min_voxels, config.iou_min)
            entry["val_AP"] = summary["AP"]
        score = entry["val_AP"] if entry["val_AP"] is not None else -np.inf
        if score >= best_ap:
            best_ap = max(best_ap, score)
            result.params = {k: v.copy() for k, v in params.items()}
            result.best_epoch = epoch
        result.log.append(entry)
        logger.debug("epoch %d loss %.5f val AP %s", epoch, entry["train_loss"], entry["val_AP"])
        if on_epoch:
            on_epoch(entry)
    return result
