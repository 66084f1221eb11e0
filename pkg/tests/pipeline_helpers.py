"""A miniature CLI pipeline shared by the io/CLI and acceptance tests."""

import json
from pathlib import Path

from weakseg.cli import main
from weakseg.experiment import desk_phantom
from weakseg.io import RunConfig
from weakseg.model import NetSpec
from weakseg.train import TrainConfig


def small_config(n_cases=12, positive_fraction=0.5, epochs=2) -> RunConfig:
    ph = desk_phantom(n_cases, seed=0).to_dict()
    ph["positive_fraction"] = positive_fraction
    ph["grid"] = {"dims": [32, 32, 2], "spacing": [1.0, 1.0, 3.0]}
    ph["prostate_volume"] = (500, 900)
    d = {"seed": 0,
         "net": NetSpec(filters=(4, 8), strides=(1, 2), convs_per_stage=1).to_dict(),
         "train": TrainConfig(epochs=epochs, batch_size=4, lr=1e-2).to_dict(),
         "phantom": ph}
    return RunConfig.from_dict(d)


def run(*argv) -> int:
    return main([str(a) for a in argv])


def run_pipeline(root: Path, config: Path, loss: str | None = None) -> dict[str, Path]:
    """synth -> annotate -> train -> predict -> eval; returns the output directories."""
    root = Path(root)
    dirs = {k: root / k for k in ("synth", "annotate", "train", "predict", "eval")}
    assert run("synth", "--config", config, "--out", dirs["synth"]) == 0
    assert run("annotate", "--config", config, "--manifest", dirs["synth"] / "manifest.jsonl",
               "--out", dirs["annotate"]) == 0
    train_cfg = config
    if loss is not None:
        d = json.loads(Path(config).read_text())
        d["train"]["loss"] = loss
        train_cfg = root / "train_config.json"
        train_cfg.write_text(json.dumps(d))
    assert run("train", "--config", train_cfg, "--manifest", dirs["annotate"] / "manifest.jsonl",
               "--fold", 0, "--out", dirs["train"]) == 0
    assert run("predict", "--config", config, "--checkpoints", dirs["train"],
               "--manifest", dirs["annotate"] / "manifest.jsonl", "--out", dirs["predict"]) == 0
    assert run("eval", "--config", config, "--manifest", dirs["annotate"] / "manifest.jsonl",
               "--predictions", dirs["predict"], "--name", "m", "--dataset", "val",
               "--out", dirs["eval"]) == 0
    return dirs
