"""Partial cross-entropy with soft-size constraint penalties.

Every loss here takes a softmax field ``probs`` of shape ``(C, *spatial)`` and
returns ``(value, grad)`` where ``grad`` is the gradient with respect to the
pre-softmax scores (same shape as ``probs``). Only the probabilities are
needed for that chain rule, so the scores themselves are never passed in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import LESION, N_CLASSES, PROSTATE, ValidationError

UNLABELED = 255
EPS = 1e-7

# prostate and lesion weights are the reference values; background completes
# them to a unit sum
DEFAULT_CLASS_WEIGHTS = (0.64, 0.14, 0.22)


@dataclass(frozen=True)
class SizeBounds:
    lower: float
    upper: float

    def __post_init__(self):
        if not (0 <= self.lower <= self.upper):
            raise ValidationError(f"need 0 <= a <= b, got ({self.lower}, {self.upper})")


@dataclass
class ConstraintConfig:
    """Weight and per-class resolution of the size constraint.

    ``modes`` maps each non-background class to ``"none"``, ``"image_tag"`` or
    ``"common_bounds"``; the latter reads its bounds from ``bounds``.
    """

    lam: float = 1e-5
    modes: dict[int, str] = field(
        default_factory=lambda: {PROSTATE: "common_bounds", LESION: "common_bounds"})
    bounds: dict[int, SizeBounds] = field(
        default_factory=lambda: {PROSTATE: SizeBounds(100, 2500), LESION: SizeBounds(5, 500)})
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS

    def __post_init__(self):
        self.modes = {int(k): v for k, v in self.modes.items()}
        self.bounds = {int(k): (v if isinstance(v, SizeBounds) else SizeBounds(*v))
                       for k, v in self.bounds.items()}
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if any(w <= 0 for w in self.class_weights):
            raise ValidationError("class weights must be positive")
        for c, mode in self.modes.items():
            if mode not in ("none", "image_tag", "common_bounds"):
                raise ValidationError(f"unknown constraint mode {mode!r} for class {c}")

    @classmethod
    def preset_2d(cls, mode: str = "common_bounds") -> "ConstraintConfig":
        return cls(lam=1e-5, modes={PROSTATE: mode, LESION: mode},
                   bounds={PROSTATE: SizeBounds(100, 2500), LESION: SizeBounds(5, 500)})

    @classmethod
    def preset_3d(cls, mode: str = "common_bounds") -> "ConstraintConfig":
        return cls(lam=1e-8, modes={PROSTATE: mode, LESION: mode},
                   bounds={PROSTATE: SizeBounds(10_000, 40_000), LESION: SizeBounds(30, 4000)})

    def to_dict(self) -> dict:
        return {"lambda": self.lam,
                "modes": {str(k): v for k, v in sorted(self.modes.items())},
                "bounds": {str(k): [b.lower, b.upper] for k, b in sorted(self.bounds.items())},
                "class_weights": list(self.class_weights)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConstraintConfig":
        """Inverse of :meth:`to_dict`; missing keys keep their defaults."""
        unknown = set(d) - {"lambda", "modes", "bounds", "class_weights"}
        if unknown:
            raise ValidationError(f"unknown constraint keys: {sorted(unknown)}")
        kw = {}
        if "lambda" in d:
            kw["lam"] = float(d["lambda"])
        if "modes" in d:
            kw["modes"] = {int(k): v for k, v in d["modes"].items()}
        if "bounds" in d:
            kw["bounds"] = {int(k): SizeBounds(*v) for k, v in d["bounds"].items()}
        if "class_weights" in d:
            kw["class_weights"] = tuple(d["class_weights"])
        return cls(**kw)


def softmax(scores: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray, axis: int = 0) -> np.ndarray:
    """Chain a gradient w.r.t. probabilities back to the pre-softmax scores."""
    return probs * (grad_probs - (grad_probs * probs).sum(axis=axis, keepdims=True))


def predicted_volume(probs: np.ndarray, class_id: int) -> float:
    """Soft size of a class: the sum of its probabilities over the image."""
    if not 0 <= class_id < probs.shape[0]:
        raise ValidationError(f"class id {class_id} out of range")
    return float(probs[class_id].sum())


def constraint_penalty(v: float, bounds: SizeBounds) -> tuple[float, float]:
    """Quadratic penalty outside ``[a, b]`` and its derivative in ``v``."""
    a, b = bounds.lower, bounds.upper
    if v < a:
        return (v - a) ** 2, 2.0 * (v - a)
    if v > b:
        return (v - b) ** 2, 2.0 * (v - b)
    return 0.0, 0.0


def image_tag_bounds(present: bool, omega: int) -> SizeBounds:
    if omega < 1:
        raise ValidationError("image domain must contain at least one voxel")
    return SizeBounds(1, omega) if present else SizeBounds(0, 0)


def resolve_bounds(config: ConstraintConfig, presence: Sequence[bool],
                   omega: int) -> dict[int, SizeBounds]:
    """Bounds actually enforced on one image given its class presence tags."""
    out = {}
    for c, mode in sorted(config.modes.items()):
        if mode == "none":
            continue
        if mode == "image_tag":
            out[c] = image_tag_bounds(bool(presence[c]), omega)
        else:
            if c not in config.bounds:
                raise ValidationError(f"class {c} uses common bounds but has none configured")
            out[c] = config.bounds[c] if presence[c] else SizeBounds(0, 0)
    return out


def _partial_ce_probs(probs, annotation, weights):
    # value and gradient w.r.t. probabilities
    grad = np.zeros_like(probs)
    labeled = annotation != UNLABELED
    n = int(labeled.sum())
    if n == 0:
        return 0.0, grad
    y = annotation[labeled].astype(np.intp)
    if y.max() >= probs.shape[0]:
        raise ValidationError("annotation class id out of range")
    flat = probs.reshape(probs.shape[0], -1)
    idx = np.flatnonzero(labeled)
    s = flat[y, idx]
    w = np.asarray(weights, dtype=probs.dtype)[y]
    clamped = np.maximum(s, EPS)
    value = float(-(w * np.log(clamped)).sum() / n)
    g = np.where(s > EPS, -w / (n * clamped), 0.0)
    grad.reshape(grad.shape[0], -1)[y, idx] = g
    return value, grad


def partial_cross_entropy(probs: np.ndarray, annotation: np.ndarray,
                          weights: Sequence[float] = DEFAULT_CLASS_WEIGHTS):
    """Weighted cross-entropy averaged over annotated voxels only.

    Args:
        probs: softmax field ``(C, *spatial)``.
        annotation: integer map ``spatial``; ``UNLABELED`` marks voxels
            outside the annotated set.
        weights: per-class weights applied to the annotated terms.

    Returns:
        ``(value, grad_scores)``.
    """
    _check(probs, annotation)
    value, gp = _partial_ce_probs(probs, annotation, weights)
    return value, softmax_backward(probs, gp)


def _negative_ce_probs(probs, presence):
    grad = np.zeros_like(probs)
    value = 0.0
    n = probs[0].size
    for c in range(1, probs.shape[0]):
        if presence[c]:
            continue
        comp = 1.0 - probs[c]
        clamped = np.maximum(comp, EPS)
        value += float(-np.log(clamped).sum() / n)
        grad[c] = np.where(comp > EPS, 1.0 / (n * clamped), 0.0)
    return value, grad


def negative_cross_entropy(probs: np.ndarray, presence: Sequence[bool]):
    """Mean of ``-ln(1 - S_c)`` over the whole image for every absent class."""
    value, gp = _negative_ce_probs(probs, presence)
    return value, softmax_backward(probs, gp)


def partial_ce_with_negative(probs, annotation, presence,
                             weights: Sequence[float] = DEFAULT_CLASS_WEIGHTS):
    _check(probs, annotation)
    h, gh = _partial_ce_probs(probs, annotation, weights)
    n, gn = _negative_ce_probs(probs, presence)
    return h + n, softmax_backward(probs, gh + gn)


def size_penalty(probs: np.ndarray, bounds: Mapping[int, SizeBounds]):
    """Sum of constraint penalties over the constrained classes, grad w.r.t. probabilities."""
    grad = np.zeros_like(probs)
    value = 0.0
    for c, b in bounds.items():
        pen, d = constraint_penalty(predicted_volume(probs, c), b)
        value += pen
        grad[c] = d
    return value, grad


def combined_loss(probs: np.ndarray, annotation: np.ndarray, config: ConstraintConfig,
                  presence: Sequence[bool]):
    """Partial cross-entropy plus ``lambda`` times the size penalties."""
    _check(probs, annotation)
    h, gh = _partial_ce_probs(probs, annotation, config.class_weights)
    bounds = resolve_bounds(config, presence, probs[0].size)
    pen, gp = size_penalty(probs, bounds)
    value = h + config.lam * pen
    return value, softmax_backward(probs, gh + config.lam * gp)


def full_cross_entropy(probs: np.ndarray, labels: np.ndarray):
    """Unweighted cross-entropy averaged over every voxel of a dense label map."""
    return partial_cross_entropy(probs, labels.astype(np.int64), np.ones(probs.shape[0]))


def generalized_dice_loss(probs: np.ndarray, labels: np.ndarray, smooth: float = 1e-5):
    """Soft Dice with inverse squared class-volume weights (absent classes get the largest weight)."""
    C = probs.shape[0]
    onehot = (labels[None] == np.arange(C).reshape((C,) + (1,) * labels.ndim)).astype(probs.dtype)
    axes = tuple(range(1, probs.ndim))
    vol = onehot.sum(axis=axes)
    w = np.zeros(C, dtype=probs.dtype)
    w[vol > 0] = 1.0 / vol[vol > 0] ** 2
    w[vol == 0] = w.max() if np.any(vol > 0) else 1.0
    inter = (onehot * probs).sum(axis=axes)
    total = (onehot + probs).sum(axis=axes)
    num = 2.0 * float((w * inter).sum()) + smooth
    den = float((w * total).sum()) + smooth
    value = 1.0 - num / den
    shape = (C,) + (1,) * labels.ndim
    gp = -w.reshape(shape) * (2.0 * onehot * den - num) / den ** 2
    return value, softmax_backward(probs, gp)


def supervised_loss(probs: np.ndarray, labels: np.ndarray,
                    weights: Sequence[float] | None = None):
    """Cross-entropy and generalized Dice added with equal weight.

    ``weights`` optionally class-weights the cross-entropy term; ``None``
    leaves it unweighted.
    """
    if weights is None:
        ce, g1 = full_cross_entropy(probs, labels)
    else:
        ce, g1 = partial_cross_entropy(probs, labels.astype(np.int64), weights)
    gd, g2 = generalized_dice_loss(probs, labels)
    return ce + gd, g1 + g2


def _check(probs, annotation):
    if probs.shape[1:] != np.shape(annotation):
        raise ValidationError(
            f"annotation shape {np.shape(annotation)} does not match field {probs.shape[1:]}")


__all__ = [
    "UNLABELED", "EPS", "DEFAULT_CLASS_WEIGHTS", "SizeBounds", "ConstraintConfig", "softmax",
    "softmax_backward", "predicted_volume", "constraint_penalty", "image_tag_bounds",
    "resolve_bounds", "partial_cross_entropy", "negative_cross_entropy",
    "partial_ce_with_negative", "size_penalty", "combined_loss", "full_cross_entropy",
    "generalized_dice_loss", "supervised_loss", "N_CLASSES",
]
