"""Dataset manifests and fully materialised run configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

from .annotate import ScribbleConfig
from .core import CaseRecord, IntensityVolume, LabelVolume, ValidationError, read_labels, read_volume
from .losses import ConstraintConfig
from .metrics import IOU_MIN, MIN_LESION_VOXELS
from .model import NetSpec
from .synth import PhantomConfig
from .train import TrainConfig


@dataclass
class ManifestRecord:
    case_id: str
    image: str
    labels: str
    annotation: str | None = None
    domain: str = "in"
    positive: bool = False
    lesion_count: int = 0


@dataclass
class Manifest:
    """Ordered case records; relative paths resolve against ``root``."""

    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.case_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate case ids: {dup}")
        self.root = Path(self.root)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.records == other.records

    def path(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def filter(self, domain: str | None) -> "Manifest":
        if domain is None:
            return self
        return Manifest([r for r in self.records if r.domain == domain], self.root)

    def check_files(self) -> None:
        for r in self.records:
            for rel in (r.image, r.labels, r.annotation):
                p = self.path(rel)
                if p is not None and not p.with_suffix(".raw").exists():
                    raise ValidationError(f"{r.case_id}: missing file {p}")

    def load_case(self, r: ManifestRecord) -> CaseRecord:
        image = read_volume(self.path(r.image))
        grid, lab = read_labels(self.path(r.labels))
        ann = None
        if r.annotation is not None:
            _, ann = read_labels(self.path(r.annotation))
        return CaseRecord(r.case_id, image, LabelVolume(grid, lab), ann, r.domain)

    def load(self) -> list[CaseRecord]:
        return [self.load_case(r) for r in self.records]


def write_manifest(path: str | Path, manifest: Manifest) -> Path:
    """JSON lines, one record per case, paths relative to the manifest directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in manifest.records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path, domain: str | None = None, check: bool = True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    names = {f.name for f in fields(ManifestRecord)}
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{n}: malformed record ({exc.msg})") from None
        unknown = set(d) - names
        if unknown or not {"case_id", "image", "labels"} <= set(d):
            raise ValidationError(f"{path}:{n}: bad record keys {sorted(d)}")
        records.append(ManifestRecord(**d))
    m = Manifest(records, path.parent).filter(domain)
    if check:
        m.check_files()
    return m


@dataclass
class EvalConfig:
    threshold: float = 0.5
    min_voxels: int = MIN_LESION_VOXELS
    iou_min: float = IOU_MIN
    fp_budget: float = 1.0


def _build(cls, d: Mapping | None):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    return cls(**d)


@dataclass
class RunConfig:
    """Everything a pipeline command needs; saved with every output directory."""

    seed: int = 0
    net: NetSpec = field(default_factory=NetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)
    scribble: ScribbleConfig = field(default_factory=ScribbleConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "net": self.net.to_dict(), "train": self.train.to_dict(),
                "constraint": self.constraint.to_dict(), "scribble": self.scribble.to_dict(),
                "phantom": self.phantom.to_dict(), "eval": asdict(self.eval)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        unknown = set(d) - {"seed", "net", "train", "constraint", "scribble", "phantom", "eval"}
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        phantom = dict(d.get("phantom") or {})
        for k in ("lesion_volume", "prostate_volume", "t2w_means", "adc_means"):
            if k in phantom:
                phantom[k] = tuple(phantom[k])
        return cls(seed=int(d.get("seed", 0)),
                   net=_build(NetSpec, d.get("net")),
                   train=_build(TrainConfig, d.get("train")),
                   constraint=ConstraintConfig.from_dict(d.get("constraint") or {}),
                   scribble=_build(ScribbleConfig, d.get("scribble")),
                   phantom=PhantomConfig(**phantom),
                   eval=_build(EvalConfig, d.get("eval")))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed config ({exc.msg})") from None
        if not isinstance(d, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)


def records_for(cases: Iterable[CaseRecord], paths: Mapping[str, Mapping[str, str]]) -> Manifest:
    """Manifest rows for in-memory cases whose files were written to ``paths``."""
    from .metrics import gt_lesions

    return Manifest([ManifestRecord(c.case_id, paths[c.case_id]["image"],
                                    paths[c.case_id]["labels"], paths[c.case_id].get("annotation"),
                                    c.domain, c.positive, len(gt_lesions(c.labels.labels)))
                     for c in cases])


def write_probabilities(path, grid, probs) -> Path:
    from .core import write_volume

    return write_volume(path, IntensityVolume(grid, probs, ("background", "prostate", "lesion")))
