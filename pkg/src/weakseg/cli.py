"""Command-line pipeline: ``python -m weakseg <command> [flags]``.

Every command writes its artifacts plus the resolved ``run_config.json`` to
``--out``. Failures print one JSON error record on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics
from .annotate import annotate_corpus, coverage_fraction
from .core import (LESION, PROSTATE, ValidationError, read_labels, read_volume, write_labels,
                   write_volume)
from .io import (Manifest, ManifestRecord, RunConfig, read_manifest, records_for,
                 write_manifest, write_probabilities)
from .losses import ConstraintConfig, SizeBounds
from .model import load_checkpoint, save_checkpoint
from .synth import generate_corpus
from .train import (TrainConfig, TrainingError, average_probabilities, kfold_split, predict,
                    train_model)

COMMANDS = ("synth", "annotate", "train", "predict", "ensemble", "eval", "report", "sweep")
WORKERS_ENV = "WEAKSEG_WORKERS"
METRIC_COLUMNS = ("model", "dataset", "sensitivity_at_1fp", "dagger", "AP", "AUROC",
                  "dice_prostate", "max_sensitivity", "avg_fp_per_patient")
CURVE_COLUMNS = ("threshold", "sensitivity", "fp_per_patient", "precision", "recall")

# hyperparameter grids searched for the weak models; the IT stage fixes
# lr/weight decay/lambda, the CB stage then searches the bounds
SWEEP_GRIDS = {
    "2d": {"lr": [1e-4, 10 ** -3.5, 1e-3, 10 ** -2.5, 1e-2],
           "weight_decay": [1e-5, 1e-4, 1e-3, 1e-2],
           "lam": [1e-5, 1e-4, 1e-3, 1e-2],
           "a": [5, 10], "b": [100, 200, 300, 400, 500, 600]},
    "3d": {"lr": [1e-4, 10 ** -3.5, 1e-3, 10 ** -2.5, 1e-2],
           "weight_decay": [1e-5, 1e-4, 1e-3, 1e-2],
           "lam": [1e-9, 1e-8, 1e-7, 1e-6, 1e-5],
           "a": [10, 30, 50, 70, 100], "b": [1500, 2000, 2500, 3000, 3500, 4000, 5000, 6000]},
}


class InputError(Exception):
    """Missing or unusable command input."""


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ValidationError(f"{WORKERS_ENV} must be an integer") from None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    return path


def _read_csv(path: Path) -> list[dict]:
    with path.open() as fh:
        return list(csv.DictReader(fh))


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        s = int(args.seed)
        cfg = replace(cfg, seed=s, train=replace(cfg.train, seed=s),
                      scribble=replace(cfg.scribble, seed=s), phantom=replace(cfg.phantom, seed=s))
    return cfg


def _out(args) -> Path:
    if not args.out:
        raise InputError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args) -> Manifest:
    if not args.manifest:
        raise InputError("--manifest is required")
    m = read_manifest(args.manifest, args.domain)
    if len(m) == 0:
        raise InputError(f"manifest {args.manifest} has no cases for domain {args.domain!r}")
    return m


def _rel(target: Path, base: Path) -> str:
    return os.path.relpath(Path(target).resolve(), Path(base).resolve())


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, out: Path) -> None:
    phantom = cfg.phantom if args.n_cases is None else replace(cfg.phantom, n_cases=args.n_cases)
    domain = args.domain or "in"
    cases = generate_corpus(phantom, domain)
    paths = {}
    for c in cases:
        img = write_volume(out / "cases" / f"{c.case_id}_image", c.image)
        lab = write_labels(out / "cases" / f"{c.case_id}_labels", c.labels.grid, c.labels.labels)
        paths[c.case_id] = {"image": _rel(img.with_suffix(""), out),
                            "labels": _rel(lab.with_suffix(""), out)}
    write_manifest(out / "manifest.jsonl", records_for(cases, paths))
    cfg = replace(cfg, phantom=phantom)
    cfg.save(out / "run_config.json")


def cmd_annotate(args, cfg: RunConfig, out: Path) -> None:
    m = _manifest(args)
    cases = m.load()
    anns, area = annotate_corpus([c.labels for c in cases], cfg.scribble)
    records, rows = [], []
    for r, c, a in zip(m.records, cases, anns):
        p = write_labels(out / "annotations" / f"{r.case_id}_annotation", c.labels.grid, a,
                         "annotation")
        records.append(replace(r, image=_rel(m.path(r.image), out),
                               labels=_rel(m.path(r.labels), out),
                               annotation=_rel(p.with_suffix(""), out)))
        for cls, name in ((PROSTATE, "prostate"), (LESION, "lesion")):
            rows.append({"case_id": r.case_id, "class": name,
                         "coverage_fraction": coverage_fraction([a], [c.labels.labels], cls)})
    for cls, name in ((PROSTATE, "prostate"), (LESION, "lesion")):
        rows.append({"case_id": "ALL", "class": name, "coverage_fraction":
                     coverage_fraction(anns, [c.labels.labels for c in cases], cls)})
    write_manifest(out / "manifest.jsonl", Manifest(records, out))
    _write_csv(out / "coverage.csv", ("case_id", "class", "coverage_fraction"), rows)
    if area is not None:
        cfg = replace(cfg, scribble=replace(cfg.scribble, erosion_target_area=area))
    cfg.save(out / "run_config.json")


def _split(cases, cfg: RunConfig, fold: int | None):
    if fold is None:
        return list(cases), []
    if not 0 <= fold < cfg.train.folds:
        raise InputError(f"--fold must lie in [0, {cfg.train.folds})")
    folds = kfold_split([c.positive for c in cases], cfg.train.folds, cfg.seed)
    return ([c for c, f in zip(cases, folds) if f != fold],
            [c for c, f in zip(cases, folds) if f == fold])


def cmd_train(args, cfg: RunConfig, out: Path) -> None:
    cases = _manifest(args).load()
    if cfg.train.loss != "supervised_ce_dice" and any(c.annotation is None for c in cases):
        raise InputError("weak losses need an annotated manifest (run annotate first)")
    tr, va = _split(cases, cfg, args.fold)
    res = train_model(tr, va, cfg.train, cfg.net, cfg.constraint)
    save_checkpoint(out / "model", res.params, res.spec)
    _write_csv(out / "loss_log.csv", ("epoch", "train_loss", "val_AP"), res.log)
    cfg.save(out / "run_config.json")
    meta = {"fold": args.fold, "seed": cfg.seed, "best_epoch": res.best_epoch,
            "train_cases": [c.case_id for c in tr], "val_cases": [c.case_id for c in va]}
    (out / "run_meta.json").write_text(json.dumps(meta, indent=1) + "\n")


def _checkpoints(args):
    if not args.checkpoints:
        raise InputError("--checkpoints is required")
    members = []
    for ck in args.checkpoints:
        p = Path(ck)
        if p.is_dir():
            p = p / "model"
        if not p.with_suffix(".index").exists():
            raise InputError(f"checkpoint not found: {ck}")
        params, spec = load_checkpoint(p)
        if spec is None:
            raise InputError(f"checkpoint {ck} has no network description")
        members.append((params, spec))
    return members


def _predict_all(m: Manifest, members, out: Path) -> None:
    def one(r: ManifestRecord):
        image = read_volume(m.path(r.image))
        probs = average_probabilities([predict(p, s, image) for p, s in members])
        path = write_probabilities(out / "predictions" / f"{r.case_id}_prob", image.grid, probs)
        return {"case_id": r.case_id, "prediction": _rel(path.with_suffix(""), out)}

    with ThreadPoolExecutor(_workers()) as pool:
        rows = list(pool.map(one, m.records))
    with (out / "predictions.jsonl").open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_predict(args, cfg: RunConfig, out: Path) -> None:
    members = _checkpoints(args)
    if len(members) != 1:
        raise InputError("predict takes one checkpoint; use ensemble for several")
    _predict_all(_manifest(args), members, out)
    cfg.save(out / "run_config.json")


def cmd_ensemble(args, cfg: RunConfig, out: Path) -> None:
    members = _checkpoints(args)
    shapes = {(s.classes, s.dimensionality) for _, s in members}
    if len(shapes) != 1:
        raise ValidationError(f"ensemble members disagree on output layout: {sorted(shapes)}")
    _predict_all(_manifest(args), members, out)
    cfg.save(out / "run_config.json")


def _load_predictions(pred_dir: Path) -> dict[str, Path]:
    index = pred_dir / "predictions.jsonl"
    if not index.exists():
        raise InputError(f"no predictions.jsonl in {pred_dir}")
    rows = [json.loads(l) for l in index.read_text().splitlines() if l.strip()]
    return {r["case_id"]: pred_dir / r["prediction"] for r in rows}


def evaluate_manifest(m: Manifest, preds: dict[str, Path], cfg: RunConfig):
    """Metrics row and FROC points for one prediction set against a manifest."""
    e = cfg.eval
    mcases, dices = [], []
    for r in m.records:
        if r.case_id not in preds:
            raise InputError(f"no prediction for case {r.case_id}")
        probs = read_volume(preds[r.case_id]).data
        _, lab = read_labels(m.path(r.labels))
        mcases.append(metrics.Case(
            metrics.extract_lesions(probs, e.threshold, e.min_voxels, case_id=r.case_id),
            metrics.gt_lesions(lab)))
        dices.append(metrics.dice(np.argmax(probs, axis=0) > 0, lab > 0))
    row = metrics.summarize(mcases, e.iou_min, e.fp_budget)
    row["dice_prostate"] = float(np.mean(dices))
    return row, metrics.froc(mcases, e.iou_min)


def cmd_eval(args, cfg: RunConfig, out: Path) -> None:
    m = _manifest(args)
    if not args.predictions:
        raise InputError("--predictions is required")
    row, curve = evaluate_manifest(m, _load_predictions(Path(args.predictions)), cfg)
    row.update(model=args.name or Path(args.predictions).name,
               dataset=args.dataset or args.domain or "all")
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, [row])
    _write_csv(out / "curve.csv", CURVE_COLUMNS, [vars(p) for p in curve])
    cfg.save(out / "run_config.json")


def cmd_report(args, cfg: RunConfig, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not args.inputs:
        raise InputError("--inputs (eval output directories) is required")
    rows, curves = [], []
    for d in map(Path, args.inputs):
        if not (d / "metrics.csv").exists():
            raise InputError(f"no metrics.csv in {d}")
        r = _read_csv(d / "metrics.csv")[0]
        rows.append(r)
        curves.append((f"{r['model']} / {r['dataset']}", _read_csv(d / "curve.csv")))

    plt.rcParams["svg.hashsalt"] = "weakseg"
    for name, xkey, ykey, xlabel, ylabel in (
            ("froc.svg", "fp_per_patient", "sensitivity", "false positives per patient", "sensitivity"),
            ("pr.svg", "recall", "precision", "recall", "precision")):
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, pts in curves:
            xs = [float(p[xkey]) for p in pts if p[xkey] and p[ykey]]
            ys = [float(p[ykey]) for p in pts if p[xkey] and p[ykey]]
            ax.step(xs, ys, where="post", label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if curves:
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / name, format="svg", metadata={"Date": None})
        plt.close(fig)

    ref = {r["model"]: r for r in rows if r["dataset"] == args.reference}
    table = []
    for r in rows:
        if r["dataset"] == args.reference or r["model"] not in ref:
            continue
        for key in ("sensitivity_at_1fp", "AP", "AUROC", "dice_prostate"):
            t, v = r[key], ref[r["model"]][key]
            ratio = metrics.relative_change(float(t), float(v)) if t and v else None
            table.append({"model": r["model"], "dataset": r["dataset"], "metric": key,
                          "test_value": t, "val_value": v, "ratio": ratio})
    _write_csv(out / "relative_change.csv",
               ("model", "dataset", "metric", "test_value", "val_value", "ratio"), table)
    summary = []
    for r in rows:
        agg = (float(r["AUROC"]) + float(r["AP"])) / 2 if r["AUROC"] and r["AP"] else None
        summary.append({**r, "aggregate": agg})
    _write_csv(out / "summary.csv", METRIC_COLUMNS + ("aggregate",), summary)
    cfg.save(out / "run_config.json")


def sweep_grid(grid: dict, stage: str) -> list[dict]:
    """Grid points of one stage: ``it`` (lr, weight decay, lambda) or ``cb`` (a, b)."""
    if stage == "it":
        return [{"lr": lr, "weight_decay": wd, "lam": lam}
                for lr, wd, lam in itertools.product(grid["lr"], grid["weight_decay"], grid["lam"])]
    if stage == "cb":
        return [{"a": a, "b": b} for a, b in itertools.product(grid["a"], grid["b"]) if a <= b]
    raise ValidationError(f"unknown sweep stage {stage!r}")


def cmd_sweep(args, cfg: RunConfig, out: Path) -> None:
    if args.grid in SWEEP_GRIDS:
        grid = SWEEP_GRIDS[args.grid]
    else:
        p = Path(args.grid)
        if not p.exists():
            raise InputError(f"grid must be one of {sorted(SWEEP_GRIDS)} or a JSON file")
        grid = {**SWEEP_GRIDS["2d"], **json.loads(p.read_text())}
    cases = _manifest(args).load()
    tr, va = _split(cases, cfg, 0 if args.fold is None else args.fold)

    def run(train_cfg: TrainConfig, constraint: ConstraintConfig) -> float | None:
        return train_model(tr, va, train_cfg, cfg.net, constraint).log[-1]["val_AP"]

    rows = []
    for point in sweep_grid(grid, "it"):
        tc = replace(cfg.train, loss="ce_it", lr=point["lr"], weight_decay=point["weight_decay"])
        ap = run(tc, replace(cfg.constraint, lam=point["lam"]))
        rows.append({"stage": "it", "loss": "ce_it", **point, "val_AP": ap})
    best = max((r for r in rows), key=lambda r: (r["val_AP"] is not None, r["val_AP"] or 0.0))
    for point in sweep_grid(grid, "cb"):
        tc = replace(cfg.train, loss="ce_it_cb", lr=best["lr"], weight_decay=best["weight_decay"])
        bounds = dict(cfg.constraint.bounds)
        bounds[LESION] = SizeBounds(point["a"], point["b"])
        ap = run(tc, replace(cfg.constraint, lam=best["lam"], bounds=bounds))
        rows.append({"stage": "cb", "loss": "ce_it_cb", "lr": best["lr"],
                     "weight_decay": best["weight_decay"], "lam": best["lam"], **point,
                     "val_AP": ap})
    rows.sort(key=lambda r: (-(r["val_AP"] if r["val_AP"] is not None else -1.0)))
    for i, r in enumerate(rows, 1):
        r["rank"] = i
    _write_csv(out / "sweep.csv",
               ("rank", "stage", "loss", "lr", "weight_decay", "lam", "a", "b", "val_AP"), rows)
    cfg.save(out / "run_config.json")


HANDLERS = {"synth": cmd_synth, "annotate": cmd_annotate, "train": cmd_train,
            "predict": cmd_predict, "ensemble": cmd_ensemble, "eval": cmd_eval,
            "report": cmd_report, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakseg", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--manifest", help="dataset manifest (JSON lines)")
    parser.add_argument("--fold", type=int, help="validation fold index")
    parser.add_argument("--checkpoints", nargs="+", help="checkpoint stems or train output dirs")
    parser.add_argument("--domain", help="manifest domain filter (synth: domain tag)")
    parser.add_argument("--n-cases", type=int, help="synth: number of cases")
    parser.add_argument("--predictions", help="eval: predict/ensemble output directory")
    parser.add_argument("--name", help="eval: model name for the metrics row")
    parser.add_argument("--dataset", help="eval: dataset name for the metrics row")
    parser.add_argument("--inputs", nargs="+", help="report: eval output directories")
    parser.add_argument("--reference", default="val", help="report: dataset used as denominator")
    parser.add_argument("--grid", default="2d", help="sweep: '2d', '3d' or a JSON grid file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
        out = _out(args)
        HANDLERS[args.command](args, cfg, out)
    except TrainingError as exc:
        _error(args.command, "non_finite_loss", str(exc), exc.diagnostic)
        return 3
    except (InputError, ValidationError, FileNotFoundError, KeyError, TypeError) as exc:
        kind = "missing_input" if isinstance(exc, (InputError, FileNotFoundError)) else "invalid_input"
        _error(args.command, kind, str(exc))
        return 2
    return 0


def _error(command: str, kind: str, message: str, detail=None) -> None:
    rec = {"status": "error", "command": command, "kind": kind, "message": message}
    if detail is not None:
        rec["detail"] = detail
    sys.stderr.write(json.dumps(rec, sort_keys=True, default=str) + "\n")


if __name__ == "__main__":
    sys.exit(main())
