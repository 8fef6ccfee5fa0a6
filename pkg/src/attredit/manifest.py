"""Experiment manifests (TOML in, JSON out)."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .biometrics import DEFAULT_TARGETS
from .exceptions import ParameterError, SchemaError, UnknownAttributeError
from .losses import LossWeights
from .taxonomy import load_taxonomy


class Method(str, Enum):
    DB_BASE = "db_base"
    DB_PROP = "db_prop"
    TI = "ti"
    TI_CS = "ti_cs"
    CN = "cn"
    CN_TI = "cn_ti"
    CN_IP = "cn_ip"

    @property
    def is_global(self) -> bool:
        return self in (Method.DB_BASE, Method.DB_PROP, Method.TI, Method.TI_CS)

    @property
    def needs_regularization(self) -> bool:
        return self in (Method.DB_BASE, Method.DB_PROP)

    @property
    def learns_token(self) -> bool:
        return self in (Method.TI, Method.TI_CS, Method.CN_TI)

    @property
    def label(self) -> str:
        return {"db_base": "DB-base", "db_prop": "DB-prop.", "ti": "TI", "ti_cs": "TI-cs", "cn": "CN",
                "cn_ti": "CN-TI", "cn_ip": "CN-IP"}[self.value]


MATCHERS = ("arcface", "adaface")
CLIENT_KINDS = {"matcher": ("stub", "http", "unreachable"), "vqa": ("stub", "http", "none"),
                "depth": ("stub", "http")}
TOP_LEVEL = {"name", "backbone", "methods", "attributes", "matchers", "fmr_targets", "seed", "output",
             "workers", "failures", "baseline", "dataset", "subjects", "clients", "loss", "train",
             "sampling", "report"}


@dataclass
class Subject:
    id: str
    directory: Path
    gallery: list[str]
    probes: list[str]

    def gallery_paths(self) -> list[Path]:
        return [self.directory / g for g in self.gallery]

    def probe_paths(self) -> list[Path]:
        return [self.directory / p for p in self.probes]


@dataclass
class Dataset:
    name: str
    images: Path
    masks: Optional[Path] = None
    annotations: Optional[Path] = None
    regularization: Optional[Path] = None


@dataclass
class Clients:
    matcher: str = "stub"
    vqa: str = "stub"
    vqa_mode: str = "yes"
    depth: str = "stub"
    conditioning: str = "depth"
    canny_low: float = 0.05
    canny_high: float = 0.15


@dataclass
class TrainSettings:
    steps: int = 50
    lr: float = 1e-3
    token_lr: float = 5e-3
    batch_size: int = 4
    n_vectors: int = 1
    reg_per_attribute: int = 30
    require_full_reg: bool = True
    rare_identifier: str = "sks"
    placeholder: str = "<sks>"


@dataclass
class Sampling:
    steps: int = 50
    guidance: float = 3.0
    controlnet_scale: float = 1.0
    composite: bool = True


@dataclass
class ReportSettings:
    tsne: bool = False
    histograms: bool = True


@dataclass
class ExperimentManifest:
    name: str
    backbone: str
    methods: list[Method]
    attributes: list[str]
    matchers: list[str]
    dataset: Dataset
    subjects: list[Subject]
    output: Path
    seed: int = 0
    fmr_targets: tuple = DEFAULT_TARGETS
    workers: int = 1
    failures: str = "count"
    baseline: Optional[str] = None
    clients: Clients = field(default_factory=Clients)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainSettings = field(default_factory=TrainSettings)
    sampling: Sampling = field(default_factory=Sampling)
    report: ReportSettings = field(default_factory=ReportSettings)
    source: Optional[Path] = None
    raw: dict = field(default_factory=dict, repr=False)

    def job_count(self, include_matchers: bool = False) -> int:
        n = len(self.subjects) * len(self.attributes) * len(self.methods)
        return n * len(self.matchers) if include_matchers else n

    def checksum(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = [m.value for m in self.methods]
        d.pop("raw")
        return json.loads(json.dumps(d, default=str))

    def export_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _require(d: dict, key: str, where: str = ""):
    if key not in d:
        raise SchemaError(f"{where}{key}", "required field is missing")
    return d[key]


def _section(cls, d: Optional[dict], name: str):
    d = d or {}
    if not isinstance(d, dict):
        raise SchemaError(name, "must be a table")
    known = cls.__dataclass_fields__
    for k in d:
        if k not in known:
            raise SchemaError(f"{name}.{k}", "unknown field")
    try:
        return cls(**d)
    except (TypeError, ParameterError) as exc:
        raise SchemaError(name, str(exc)) from None


def _existing(base: Path, value, name: str) -> Path:
    p = (base / value).resolve() if not Path(value).is_absolute() else Path(value)
    if not p.exists():
        raise SchemaError(name, f"path does not exist: {p}")
    return p


def parse_manifest(data: dict, base: Path, source: Optional[Path] = None) -> ExperimentManifest:
    for k in data:
        if k not in TOP_LEVEL:
            raise SchemaError(k, "unknown field")
    tax = load_taxonomy()

    methods = []
    for i, m in enumerate(_require(data, "methods")):
        try:
            methods.append(Method(m))
        except ValueError:
            raise SchemaError(f"methods[{i}]", f"unknown method {m!r}; expected one of "
                              f"{[x.value for x in Method]}") from None
    if not methods:
        raise SchemaError("methods", "at least one method is required")

    attrs = _require(data, "attributes")
    if attrs == "all":
        attrs = [a.id for a in tax]
    attributes = []
    for i, a in enumerate(attrs):
        try:
            attributes.append(tax.get(a).id)
        except UnknownAttributeError:
            raise SchemaError(f"attributes[{i}]", f"unknown attribute {a!r}") from None
    if len(set(attributes)) != len(attributes):
        raise SchemaError("attributes", "duplicate attribute")

    matchers = list(data.get("matchers", ["arcface"]))
    for i, m in enumerate(matchers):
        if not isinstance(m, str) or not m:
            raise SchemaError(f"matchers[{i}]", "must be a non-empty string")

    targets = tuple(float(t) for t in data.get("fmr_targets", DEFAULT_TARGETS))
    for i, t in enumerate(targets):
        if not 0 < t < 1:
            raise SchemaError(f"fmr_targets[{i}]", "must lie in (0, 1)")

    ds = _require(data, "dataset")
    dataset = Dataset(
        name=str(ds.get("name", "dataset")),
        images=_existing(base, _require(ds, "images", "dataset."), "dataset.images"),
        masks=_existing(base, ds["masks"], "dataset.masks") if "masks" in ds else None,
        annotations=_existing(base, ds["annotations"], "dataset.annotations") if "annotations" in ds else None,
        regularization=(_existing(base, ds["regularization"], "dataset.regularization")
                        if "regularization" in ds else None),
    )
    if any(m.needs_regularization for m in methods) and dataset.regularization is None:
        raise SchemaError("dataset.regularization", "required by DreamBooth methods")

    subjects = []
    seen = set()
    for i, s in enumerate(_require(data, "subjects")):
        sid = str(_require(s, "id", f"subjects[{i}]."))
        if sid in seen:
            raise SchemaError(f"subjects[{i}].id", f"duplicate subject {sid!r}")
        seen.add(sid)
        directory = _existing(dataset.images, s.get("directory", sid), f"subjects[{i}].directory")
        gallery = list(_require(s, "gallery", f"subjects[{i}]."))
        probes = list(_require(s, "probes", f"subjects[{i}]."))
        if not gallery:
            raise SchemaError(f"subjects[{i}].gallery", "must not be empty")
        if not probes:
            raise SchemaError(f"subjects[{i}].probes", "must not be empty")
        if set(gallery) & set(probes):
            raise SchemaError(f"subjects[{i}].probes", "probe images must be disjoint from the gallery")
        for j, f in enumerate(gallery):
            _existing(directory, f, f"subjects[{i}].gallery[{j}]")
        for j, f in enumerate(probes):
            _existing(directory, f, f"subjects[{i}].probes[{j}]")
        subjects.append(Subject(sid, directory, gallery, probes))
    if not subjects:
        raise SchemaError("subjects", "at least one subject is required")

    clients = _section(Clients, data.get("clients"), "clients")
    for kind, allowed in CLIENT_KINDS.items():
        if getattr(clients, kind) not in allowed:
            raise SchemaError(f"clients.{kind}", f"must be one of {allowed}")
    if clients.conditioning not in ("depth", "canny"):
        raise SchemaError("clients.conditioning", "must be 'depth' or 'canny'")

    failures = data.get("failures", "count")
    if failures not in ("count", "exclude"):
        raise SchemaError("failures", "must be 'count' or 'exclude'")
    baseline = data.get("baseline")
    if baseline is not None and baseline not in [m.value for m in methods]:
        raise SchemaError("baseline", f"{baseline!r} is not one of the manifest's methods")

    train = _section(TrainSettings, data.get("train"), "train")
    if train.n_vectors not in (1, 2, 5):
        raise SchemaError("train.n_vectors", "must be 1, 2 or 5")
    workers = int(data.get("workers", 1))
    if workers < 1:
        raise SchemaError("workers", "must be >= 1")

    out = Path(data.get("output", "out"))
    return ExperimentManifest(
        name=str(data.get("name", source.stem if source else "experiment")),
        backbone=str(data.get("backbone", "toy-v1")),
        methods=methods,
        attributes=attributes,
        matchers=matchers,
        dataset=dataset,
        subjects=subjects,
        output=out if out.is_absolute() else (base / out).resolve(),
        seed=int(data.get("seed", 0)),
        fmr_targets=targets,
        workers=workers,
        failures=failures,
        baseline=baseline,
        clients=clients,
        loss=_section(LossWeights, data.get("loss"), "loss"),
        train=train,
        sampling=_section(Sampling, data.get("sampling"), "sampling"),
        report=_section(ReportSettings, data.get("report"), "report"),
        source=source,
        raw=data,
    )


def validate_manifest(path) -> ExperimentManifest:
    """Parse and check a TOML manifest; paths resolve relative to the file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError("<file>", f"invalid TOML: {exc}") from None
    return parse_manifest(data, path.parent.resolve(), path.resolve())
