"""Desk-scale cross-validation experiment on 2D phantoms.

Trains the micro network under each supervision mode in k-fold
cross-validation, scores every fold model on its validation fold and on a
domain-shifted test corpus, and ensembles the fold models of each seed group.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .annotate import ScribbleConfig, annotate_corpus
from .core import CaseRecord, GridSpec
from .losses import ConstraintConfig, SizeBounds
from .model import NetSpec
from .synth import PhantomConfig, ShiftKnobs, generate_corpus
from .train import (TrainConfig, average_probabilities, evaluate_probabilities, kfold_split,
                    predict, train_model)

DESK_GRID = GridSpec((32, 32, 1), (1.0, 1.0, 3.0))


def desk_phantom(n_cases: int = 200, seed: int = 0, shift: ShiftKnobs | None = None,
                 noise_sigma: float = 0.06, lesion_contrast: float = 1.0,
                 max_lesions: int = 2, lesion_gap: int = 1) -> PhantomConfig:
    """Single-slice phantoms sized so a 32 x 32 field holds the gland comfortably.

    ``lesion_contrast`` scales how far lesion means sit from the gland means.
    """
    base = PhantomConfig()
    def means(m):
        return (m[0], m[1], m[1] + lesion_contrast * (m[2] - m[1]))
    return PhantomConfig(grid=DESK_GRID, n_cases=n_cases, positive_fraction=0.5,
                         max_lesions=max_lesions, lesion_volume=(15, 120),
                         prostate_volume=(250, 450), t2w_means=means(base.t2w_means),
                         adc_means=means(base.adc_means), noise_sigma=noise_sigma,
                         lesion_gap=lesion_gap, shift=shift or ShiftKnobs(), seed=seed)


DESK_SHIFT = ShiftKnobs(gamma=1.8, extra_noise=0.06, lesion_contrast=0.6)


def desk_constraint(lam: float = 5e-6) -> ConstraintConfig:
    # bounds bracket the gland and lesion slice areas of the desk phantoms
    return ConstraintConfig(lam=lam, bounds={1: SizeBounds(150, 500), 2: SizeBounds(10, 150)})


def desk_net() -> NetSpec:
    return NetSpec(dimensionality=2, filters=(8, 16, 32), strides=(1, 2, 2),
                   dropout=0.1, convs_per_stage=1)


@dataclass
class DeskConfig:
    n_cases: int = 200
    n_test: int = 100
    folds: int = 5
    epochs: int = 30
    batch_size: int = 16
    lam: float = 5e-6
    lr: float = 1e-2
    seed: int = 0
    data_seed: int = 0
    background_fraction: float = 0.0
    noise_sigma: float = 0.1
    lesion_contrast: float = 0.6
    max_lesions: int = 3
    lesion_gap: int = 2
    losses: tuple[str, ...] = ("supervised_ce_dice", "partial_ce", "ce_it", "ce_it_cb")
    shift: ShiftKnobs = field(default_factory=lambda: DESK_SHIFT)


@dataclass
class FoldOutcome:
    loss: str
    seed: int
    fold: int
    val: dict
    test: dict
    seconds: float
    best_epoch: int
    test_probs: list = field(default_factory=list, repr=False)


def desk_data(cfg: DeskConfig) -> tuple[list[CaseRecord], list[CaseRecord]]:
    """Annotated in-distribution corpus and the shifted test corpus."""
    look = dict(noise_sigma=cfg.noise_sigma, lesion_contrast=cfg.lesion_contrast,
                max_lesions=cfg.max_lesions, lesion_gap=cfg.lesion_gap)
    cases = generate_corpus(desk_phantom(cfg.n_cases, cfg.data_seed, **look), "in")
    scribbles = ScribbleConfig(background_fraction=cfg.background_fraction, seed=cfg.data_seed)
    anns, _ = annotate_corpus([c.labels for c in cases], scribbles)
    for c, a in zip(cases, anns):
        c.annotation = a
    test = generate_corpus(desk_phantom(cfg.n_test, cfg.data_seed + 1, cfg.shift, **look), "shift")
    return cases, test


def run_cv(cases, test, cfg: DeskConfig, loss: str, seed: int | None = None,
           log=None) -> list[FoldOutcome]:
    """k-fold training for one loss; the fold split is fixed by the data seed."""
    seed = cfg.seed if seed is None else seed
    folds = kfold_split([c.positive for c in cases], cfg.folds, cfg.data_seed)
    out = []
    for k in range(cfg.folds):
        tr = [c for c, f in zip(cases, folds) if f != k]
        va = [c for c, f in zip(cases, folds) if f == k]
        tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed * 1000 + k,
                           folds=cfg.folds, loss=loss, lr=cfg.lr)
        t0 = time.perf_counter()
        res = train_model(tr, va, tcfg, desk_net(), desk_constraint(cfg.lam))
        seconds = time.perf_counter() - t0
        val_probs = [predict(res.params, res.spec, c.image) for c in va]
        test_probs = [predict(res.params, res.spec, c.image) for c in test]
        o = FoldOutcome(loss, seed, k, evaluate_probabilities(val_probs, va),
                        evaluate_probabilities(test_probs, test), seconds, res.best_epoch,
                        test_probs)
        if log:
            log(f"{loss} seed={seed} fold={k} val_AP={o.val['AP']:.3f} "
                f"test_AP={o.test['AP']:.3f} dice={o.val['dice_prostate']:.3f} "
                f"best={o.best_epoch} {seconds:.1f}s")
        out.append(o)
    return out


def ensemble_outcome(members: list[FoldOutcome], test) -> dict:
    """Shifted-test metrics of the probability-averaged fold models."""
    probs = [average_probabilities([m.test_probs[i] for m in members]) for i in range(len(test))]
    return evaluate_probabilities(probs, test)


def mean_metric(outcomes: list[FoldOutcome], split: str, key: str) -> float:
    return float(np.mean([getattr(o, split)[key] for o in outcomes]))


def run_desk(cfg: DeskConfig | None = None, ensemble_seeds: tuple[int, ...] = (0, 1, 2),
             ensemble_loss: str = "ce_it_cb", log=None) -> dict:
    """Full experiment.

    Returns per-loss fold outcomes (``cv``), the seed groups of
    ``ensemble_loss`` with their ensembles (``ensembles``) and the shifted-test
    ensemble of every loss's first seed group (``cv_ensembles``).
    """
    cfg = cfg or DeskConfig()
    cases, test = desk_data(cfg)
    results = {loss: run_cv(cases, test, cfg, loss, cfg.seed, log) for loss in cfg.losses}
    groups = {}
    for s in ensemble_seeds:
        members = results[ensemble_loss] if s == cfg.seed and ensemble_loss in results \
            else run_cv(cases, test, replace(cfg), ensemble_loss, s, log)
        groups[s] = {"members": members, "ensemble": ensemble_outcome(members, test)}
    per_loss = {loss: ensemble_outcome(outs, test) for loss, outs in results.items()}
    return {"config": cfg, "cv": results, "ensembles": groups, "cv_ensembles": per_loss}
