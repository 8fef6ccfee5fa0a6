"""End-to-end runs: edit, match, audit, aggregate, report.

Every unit of work is a ledger cell keyed by ``(kind, key)``. A cell is
skipped when its latest record is ``ok`` with the same input fingerprint,
so reruns resume where they stopped and a finished run does no new work.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import threading
import time
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import biometrics as bio
from .clients import HttpDepth, HttpMatcher, HttpVQA, StubDepth, StubMatcher, StubVQA, UnreachableMatcher
from .engines import (
    SubjectSet,
    TokenEmbedding,
    ToyBackbone,
    TrainConfig,
    attach_embedding,
    build_regularization_set,
    edit_local,
    finetune_global,
    generate_global,
    learn_token_embedding,
)
from .engines.training import load_image
from .exceptions import (AttrEditError, ConfigurationError, MatcherUnavailableError, NothingToReportError,
                         VQAUnavailableError)
from .manifest import ExperimentManifest, Method
from .masks import BinaryMask, ConditioningMap, RegionLibrary, canny_edge, depth_map, make_mask
from .taxonomy import PromptTemplate, build_edit_prompt, load_taxonomy
from .toydata import save_png
from .vqa import AuditRecord, audit_image, success_rate, write_records

log = logging.getLogger(__name__)

OK, FAILED, SKIPPED = "ok", "failed", "skipped"
ORIGINAL = "original"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def fingerprint(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def cell_seed(base: int, *parts: str) -> int:
    return (base * 1_000_003 + zlib.crc32("/".join(parts).encode())) % (2 ** 31)


# -- ledger ------------------------------------------------------------------------

@dataclass
class CellRecord:
    kind: str
    key: tuple
    status: str
    fingerprint: str = ""
    artifacts: dict = field(default_factory=dict)  # name -> {"path": rel, "sha256": hex}
    data: dict = field(default_factory=dict)
    seconds: float = 0.0
    error: Optional[str] = None

    def to_json(self) -> str:
        d = asdict(self)
        d["key"] = list(self.key)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CellRecord":
        return cls(**{**d, "key": tuple(d["key"])})


class RunLedger:
    """Append-only JSON-lines log; the latest record per cell wins."""

    def __init__(self, path):
        self.path = Path(path)
        self.root = self.path.parent
        self._lock = threading.Lock()
        self._records: list[CellRecord] = []
        self._latest: dict[tuple, CellRecord] = {}
        if self.path.exists():
            with self.path.open() as fh:
                for line in fh:
                    if line.strip():
                        self._index(CellRecord.from_dict(json.loads(line)))

    def _index(self, rec: CellRecord):
        self._records.append(rec)
        self._latest[(rec.kind, rec.key)] = rec

    def append(self, rec: CellRecord) -> CellRecord:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(rec.to_json() + "\n")
            self._index(rec)
        return rec

    def latest(self, kind: str, key) -> Optional[CellRecord]:
        return self._latest.get((kind, tuple(key)))

    def is_done(self, kind: str, key, fp: str) -> bool:
        rec = self.latest(kind, key)
        if rec is None or rec.status != OK or rec.fingerprint != fp:
            return False
        return all((self.root / a["path"]).exists() for a in rec.artifacts.values())

    def cells(self, kind: Optional[str] = None, status: Optional[str] = None) -> list[CellRecord]:
        return [r for (k, _), r in self._latest.items()
                if (kind is None or k == kind) and (status is None or r.status == status)]

    def __len__(self):
        return len(self._records)

    def summary(self) -> dict:
        out: dict = {}
        for r in self.cells():
            out.setdefault(r.kind, {OK: 0, FAILED: 0, SKIPPED: 0})[r.status] += 1
        return out

    def artifact(self, rec: CellRecord, name: str) -> Path:
        return self.root / rec.artifacts[name]["path"]


# -- backbones and clients -----------------------------------------------------------

BACKBONES: dict[str, Callable[[int], object]] = {"toy-v1": lambda seed: ToyBackbone(seed=seed)}


def register_backbone(backbone_id: str, factory: Callable[[int], object]) -> None:
    """Plug in an external backbone (e.g. a Stable Diffusion wrapper)."""
    BACKBONES[backbone_id] = factory


def make_backbone(backbone_id: str, seed: int = 0):
    try:
        return BACKBONES[backbone_id](seed)
    except KeyError:
        raise ConfigurationError(f"backbone {backbone_id!r} is not registered; known: {sorted(BACKBONES)}") from None


def _load_backbone(backbone_id: str, directory: Path):
    base = make_backbone(backbone_id)
    return type(base).load(directory)


@dataclass
class Clients:
    matchers: dict
    vqa: object = None
    depth: object = None


def make_clients(manifest: ExperimentManifest) -> Clients:
    c = manifest.clients
    matchers = {}
    for mid in manifest.matchers:
        if c.matcher == "stub":
            matchers[mid] = StubMatcher(mid, seed=zlib.crc32(mid.encode()) % 10_000)
        elif c.matcher == "unreachable":
            matchers[mid] = UnreachableMatcher(mid)
        else:
            try:
                matchers[mid] = HttpMatcher(mid)
            except MatcherUnavailableError as exc:
                log.warning("%s", exc)
                matchers[mid] = UnreachableMatcher(mid)
    vqa = None
    if c.vqa == "stub":
        vqa = StubVQA(c.vqa_mode)
    elif c.vqa == "http":
        try:
            vqa = HttpVQA()
        except VQAUnavailableError as exc:
            log.warning("%s", exc)
            vqa = StubVQA("yes", fail_times=10 ** 9, client_id="unreachable-vqa")
    depth = StubDepth() if c.depth == "stub" else _lazy_http_depth()
    return Clients(matchers, vqa, depth)


def _lazy_http_depth():
    try:
        return HttpDepth()
    except AttrEditError as exc:
        log.warning("%s", exc)
        return None


# -- the run -------------------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: Path
    ledger: RunLedger
    executed: int
    failed: int
    report: object = None

    @property
    def partial(self) -> bool:
        return self.failed > 0


def _rel(root: Path, path: Path) -> str:
    return str(Path(path).resolve().relative_to(root.resolve()))


class _Runner:
    def __init__(self, manifest: ExperimentManifest, run_dir: Path, clients: Clients):
        self.m = manifest
        self.root = run_dir
        self.clients = clients
        self.ledger = RunLedger(run_dir / "ledger.jsonl")
        self.executed = 0
        self.failed = 0
        self._count_lock = threading.Lock()
        self.tax = load_taxonomy()
        self._image_cache: dict = {}

    # generic cell executor
    def cell(self, kind: str, key: tuple, fp: str, work: Callable[[], tuple]) -> CellRecord:
        if self.ledger.is_done(kind, key, fp):
            return self.ledger.latest(kind, key)
        t0 = time.perf_counter()
        try:
            artifacts, data = work()
            status, error = OK, None
        except Exception as exc:  # isolate the failure to this cell
            log.warning("%s %s failed: %s", kind, "/".join(key), exc)
            artifacts, data, status, error = {}, {}, FAILED, f"{type(exc).__name__}: {exc}"
        arts = {name: {"path": _rel(self.root, p), "sha256": sha256_file(p)} for name, p in artifacts.items()}
        rec = CellRecord(kind, key, status, fp, arts, data, round(time.perf_counter() - t0, 4), error)
        with self._count_lock:
            self.executed += 1
            self.failed += status == FAILED
        return self.ledger.append(rec)

    def skip(self, kind: str, key: tuple, reason: str) -> CellRecord:
        prev = self.ledger.latest(kind, key)
        if prev is not None and prev.status == SKIPPED and prev.error == reason:
            return prev
        with self._count_lock:
            self.executed += 1
        return self.ledger.append(CellRecord(kind, key, SKIPPED, error=reason))

    def image(self, path: Path) -> np.ndarray:
        path = Path(path)
        if path not in self._image_cache:
            if not hasattr(self, "_size"):
                self._size = getattr(make_backbone(self.m.backbone), "image_size", None)
            self._image_cache[path] = load_image(path, self._size)
        return self._image_cache[path]

    def dir(self, *parts) -> Path:
        d = self.root.joinpath(*parts)
        d.mkdir(parents=True, exist_ok=True)
        return d

    # -- identity embeddings ---------------------------------------------------------

    def embed_cell(self, key: tuple, images: list, subject_id: str, source: str, matcher_id: str,
                   out_path: Path, upstream: str) -> CellRecord:
        fp = fingerprint(upstream, matcher_id, source)

        def work():
            client = self.clients.matchers[matcher_id]
            embs = [bio.extract_embedding(client, img, subject_id, source, image_id)
                    for image_id, img in images]
            path = bio.save_embeddings(embs, out_path)
            n_fail = sum(not e.detect_ok for e in embs)
            return {"embeddings": path, "embeddings_meta": path.with_suffix(".json")}, \
                {"n": len(embs), "failed_detections": n_fail}

        return self.cell("match", key, fp, work)

    def originals(self):
        out = {}
        for s in self.m.subjects:
            gal = [(p.stem, self.image(p)) for p in s.gallery_paths()]
            prb = [(p.stem, self.image(p)) for p in s.probe_paths()]
            gal_fp = fingerprint([sha256_file(p) for p in s.gallery_paths()])
            prb_fp = fingerprint([sha256_file(p) for p in s.probe_paths()])
            for mid in self.m.matchers:
                d = self.dir("_original", s.id)
                g = self.embed_cell(("gallery", s.id, "gallery", mid), gal, s.id, "original_gallery", mid,
                                    d / f"gallery_{mid}", gal_fp)
                p = self.embed_cell((ORIGINAL, s.id, ORIGINAL, mid), prb, s.id, "probe_original", mid,
                                    d / f"probes_{mid}", prb_fp)
                out[(s.id, mid)] = (g, p)
        return out

    # -- training --------------------------------------------------------------------

    def regularization(self):
        if not hasattr(self, "_reg"):
            exclude = [p.stem for s in self.m.subjects for p in s.gallery_paths() + s.probe_paths()]
            self._reg = build_regularization_set(
                self.m.dataset.regularization, per_attribute=self.m.train.reg_per_attribute,
                require_all=self.m.train.require_full_reg, exclude_ids=exclude,
                manifest_path=self.root / "regularization.json")
        return self._reg

    def train(self, method: Method, subject) -> tuple[CellRecord, Optional[object]]:
        """Returns the train record and a ready-to-use backbone (or None)."""
        t = self.m.train
        seed = cell_seed(self.m.seed, method.value, subject.id, "train")
        exemplars = subject.gallery_paths() if method.is_global else subject.probe_paths()
        fp = fingerprint(self.m.backbone, method.value, asdict(t), self.m.loss.to_dict(), seed,
                         [sha256_file(p) for p in exemplars],
                         self.m.dataset.regularization if method.needs_regularization else None)
        out = self.root / method.value / subject.id / "_model"
        key = (method.value, subject.id)

        def work():
            images = [self.image(p) for p in exemplars]
            backbone = make_backbone(self.m.backbone, self.m.seed)
            sset = SubjectSet(subject.id, images)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                sset.check_for_method(method.value)
            if method.needs_regularization:
                weights = self.m.loss.replace(lambda_s=0.0) if method is Method.DB_BASE else self.m.loss
                cfg = TrainConfig(steps=t.steps, lr=t.lr, batch_size=t.batch_size, seed=seed,
                                  rare_identifier=t.rare_identifier)
                run = finetune_global(backbone, sset, self.regularization(), weights, cfg)
                backbone.save(out, run.manifest())
                arts = {"model": out / "model.pt", "model_manifest": out / "manifest.json"}
            else:
                plain = method in (Method.TI, Method.CN_TI)
                weights = self.m.loss.replace(lambda_sl=0.0, lambda_c=0.0) if plain else self.m.loss
                cfg = TrainConfig(steps=t.steps, lr=t.token_lr, batch_size=t.batch_size, seed=seed,
                                  placeholder=t.placeholder, objective="mse" if plain else "ti")
                run = learn_token_embedding(backbone, sset, t.n_vectors, weights, cfg)
                run.embedding.save(out, run.manifest())
                arts = {"token": out / "token.npy", "token_meta": out / "token.json"}
            hist = run.write_history(out / "history.jsonl")
            self._trained[key] = backbone
            return {**arts, "history": hist}, {"final_loss": run.history[-1]["total"], "seed": seed}

        rec = self.cell("train", key, fp, work)
        if rec.status != OK:
            return rec, None
        if key not in self._trained:
            if "model" in rec.artifacts:
                self._trained[key] = _load_backbone(self.m.backbone, out)
            else:
                backbone = make_backbone(self.m.backbone, self.m.seed)
                attach_embedding(backbone, TokenEmbedding.load(out))
                self._trained[key] = backbone
        return rec, self._trained[key]

    # -- editing ---------------------------------------------------------------------

    def prompt(self, method: Method, attr) -> str:
        t = self.m.train
        if method in (Method.DB_BASE, Method.DB_PROP):
            return build_edit_prompt(PromptTemplate(t.rare_identifier), attr)
        if method.learns_token:
            return build_edit_prompt(PromptTemplate(t.placeholder), attr)
        return build_edit_prompt(PromptTemplate(""), attr, require_identifier=False)

    def local_mask(self, method: Method, attr, subject, image_path: Path, shape) -> tuple[BinaryMask, list]:
        if attr.is_reconstruction:
            return BinaryMask.zeros(*shape), []
        if method is not Method.CN_IP:
            return BinaryMask.ones(*shape), ["full"]
        root = self.m.dataset.masks or subject.directory / "masks"
        lib = RegionLibrary.from_directory(root, self.tax.region_vocabulary, [image_path.stem])
        available = lib.regions(image_path.stem)
        regions = [r for r in attr.regions if r in available]
        if not regions:
            regions = [r for r in attr.experimental_regions if r in available]
        if not regions:
            # demographic edits have no parsing region: repaint everything but clothing
            regions = [r for r in available if r != "cloth"]
        return make_mask(lib, image_path.stem, regions), regions

    def conditioning(self, image, image_id: str) -> ConditioningMap:
        c = self.m.clients
        if c.conditioning == "canny":
            return canny_edge(image, c.canny_low, c.canny_high, source_image_id=image_id)
        if self.clients.depth is None:
            from .exceptions import ConditioningUnavailableError

            raise ConditioningUnavailableError("no depth client configured")
        return depth_map(image, self.clients.depth, image_id)

    def edit(self, method: Method, subject, attr_id: str, backbone, upstream: str) -> CellRecord:
        attr = self.tax.get(attr_id)
        smp = self.m.sampling
        seed = cell_seed(self.m.seed, method.value, subject.id, attr_id)
        prompt = self.prompt(method, attr)
        inputs = subject.probe_paths()
        fp = fingerprint(upstream, method.value, prompt, asdict(smp), seed, asdict(self.m.clients),
                         [sha256_file(p) for p in inputs])
        d = self.root / method.value / subject.id / attr_id

        def work():
            d.mkdir(parents=True, exist_ok=True)
            arts, notes = {}, {}
            for k, path in enumerate(inputs):
                name = f"probe_{k:02d}"
                if method.is_global:
                    out = generate_global(backbone, prompt, seed + k, smp.steps, smp.guidance)
                else:
                    img = self.image(path)
                    mask, regions = self.local_mask(method, attr, subject, path, img.shape[:2])
                    cond = self.conditioning(img, path.stem)
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", UserWarning)
                        res = edit_local(backbone, img, mask, prompt, cond, smp.steps, smp.guidance,
                                         smp.controlnet_scale, seed + k, composite=smp.composite)
                    out = res.image
                    mask.save_png(d / f"{name}_mask.png")
                    arts[f"{name}_mask"] = d / f"{name}_mask.png"
                    notes[name] = {"regions": regions, "source": path.name,
                                   "experimental": bool(attr.experimental_regions) and method is Method.CN_IP}
                arts[name] = save_png(out, d / f"{name}.png")
            return arts, {"prompt": prompt, "seed": seed, "manifest_sha256": self.m.checksum(), **notes}

        return self.cell("edit", (method.value, subject.id, attr_id), fp, work)

    def edited_images(self, rec: CellRecord) -> list:
        names = sorted(n for n in rec.artifacts if n.startswith("probe_") and not n.endswith("_mask"))
        return [(f"{rec.key[1]}_{rec.key[2]}_{n}", load_image(self.ledger.artifact(rec, n))) for n in names]

    def audit(self, method: Method, subject, attr_id: str, edit_rec: CellRecord) -> CellRecord:
        key = (method.value, subject.id, attr_id)
        attr = self.tax.get(attr_id)
        if edit_rec.status != OK:
            return self.skip("audit", key, "edit failed")
        if attr.is_reconstruction:
            return self.skip("audit", key, "no question for reconstruction")
        if self.clients.vqa is None:
            return self.skip("audit", key, "no VQA client")
        fp = fingerprint(edit_rec.fingerprint, getattr(self.clients.vqa, "client_id", ""), attr.vqa_question)

        def work():
            recs = [audit_image(self.clients.vqa, img, attr, image_id, sleep=lambda s: None)
                    for image_id, img in self.edited_images(edit_rec)]
            failures = [r.failure for r in recs if r.failure]
            if failures:
                raise VQAUnavailableError(failures[0])
            path = write_records(recs, self.root / method.value / subject.id / attr_id / "audit.jsonl", append=False)
            return {"audit": path}, {"verdicts": [r.verdict.value for r in recs]}

        return self.cell("audit", key, fp, work)

    # -- aggregation -----------------------------------------------------------------

    def rates(self, method: str, attr_id: str, matcher_id: str, originals: dict) -> CellRecord:
        key = (method, attr_id, matcher_id)
        gal_recs = [originals[(s.id, matcher_id)][0] for s in self.m.subjects]
        if method == ORIGINAL:
            probe_recs = [originals[(s.id, matcher_id)][1] for s in self.m.subjects]
        else:
            probe_recs = [self.ledger.latest("match", (method, s.id, attr_id, matcher_id)) for s in self.m.subjects]
        missing = [r for r in gal_recs + probe_recs if r is None or r.status != OK]
        if missing:
            return self.skip("rates", key, f"{len(missing)} embedding cells not ok")
        fp = fingerprint([r.fingerprint for r in gal_recs + probe_recs], self.m.fmr_targets, self.m.failures,
                         [r.artifacts["embeddings"]["sha256"] for r in gal_recs + probe_recs])
        d = self.root / method / "_rates" if method != ORIGINAL else self.root / "_original" / "_rates"

        def work():
            d.mkdir(parents=True, exist_ok=True)
            gallery = [e for r in gal_recs for e in bio.load_embeddings(self.ledger.artifact(r, "embeddings"))]
            probes = [e for r in probe_recs for e in bio.load_embeddings(self.ledger.artifact(r, "embeddings"))]
            scores = bio.compute_scores(gallery, probes)
            rates = bio.fnmr_at_fmr(scores, self.m.fmr_targets, failures=self.m.failures)
            stem = d / f"{attr_id}__{matcher_id}"
            csv_path = scores.save_csv(stem.with_name(stem.name + "_scores.csv"))
            json_path = bio.save_rates(rates, stem)
            return ({"scores": csv_path, "rates": json_path},
                    {"rates": rates.to_dict(), "n_genuine": len(scores.genuine),
                     "n_impostor": len(scores.impostor), "failed_probes": scores.failed_probes})

        return self.cell("rates", key, fp, work)

    def success(self, method: str, attr_id: str) -> CellRecord:
        key = (method, attr_id)
        recs = [self.ledger.latest("audit", (method, s.id, attr_id)) for s in self.m.subjects]
        if any(r is None or r.status != OK for r in recs):
            return self.skip("success", key, "audit cells not ok")
        fp = fingerprint([r.artifacts["audit"]["sha256"] for r in recs])

        def work():
            from .vqa import read_records

            records: list[AuditRecord] = []
            for r in recs:
                records.extend(read_records(self.ledger.artifact(r, "audit")))
            data = {}
            for policy in ("failure", "exclude"):
                row = success_rate(records, policy).rows[attr_id]
                data[policy] = row.rate
                data["n_images"], data["n_success"], data["n_unparseable"] = \
                    row.n_images, row.n_success, row.n_unparseable
            return {}, data

        return self.cell("success", key, fp, work)

    # -- orchestration ---------------------------------------------------------------

    def run(self):
        self._trained: dict = {}
        originals = self.originals()
        base = None
        for method in self.m.methods:
            jobs = []
            for s in self.m.subjects:
                if method.learns_token or method.needs_regularization:
                    train_rec, backbone = self.train(method, s)
                    upstream = train_rec.fingerprint
                else:
                    base = base or make_backbone(self.m.backbone, self.m.seed)
                    train_rec, backbone, upstream = None, base, fingerprint(self.m.backbone, self.m.seed)
                for a in self.m.attributes:
                    jobs.append((s, a, train_rec, backbone, upstream))

            def one(job):
                s, a, train_rec, backbone, upstream = job
                key = (method.value, s.id, a)
                if backbone is None:
                    edit_rec = self.skip("edit", key, "training failed")
                else:
                    edit_rec = self.edit(method, s, a, backbone, upstream)
                self.audit(method, s, a, edit_rec)
                for mid in self.m.matchers:
                    mkey = (method.value, s.id, a, mid)
                    if edit_rec.status != OK:
                        self.skip("match", mkey, "edit not ok")
                        continue
                    self.embed_cell(mkey, self.edited_images(edit_rec), s.id, "probe_generated", mid,
                                    self.root / method.value / s.id / a / f"emb_{mid}",
                                    ",".join(sorted(v["sha256"] for v in edit_rec.artifacts.values())))

            if self.m.workers > 1:
                with ThreadPoolExecutor(self.m.workers) as pool:
                    list(pool.map(one, jobs))
            else:
                for job in jobs:
                    one(job)

        for mid in self.m.matchers:
            self.rates(ORIGINAL, ORIGINAL, mid, originals)
        for method in self.m.methods:
            for a in self.m.attributes:
                for mid in self.m.matchers:
                    self.rates(method.value, a, mid, originals)
                if not self.tax.get(a).is_reconstruction and self.clients.vqa is not None:
                    self.success(method.value, a)


def prepare_run_dir(manifest: ExperimentManifest, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    if manifest.source is not None:
        src = Path(manifest.source)
        if src.resolve() != (run_dir / "manifest.toml").resolve():
            shutil.copyfile(src, run_dir / "manifest.toml")
    manifest.export_json(run_dir / "manifest.json")


def record_report(ledger: RunLedger, report) -> Optional[CellRecord]:
    """Log report checksums, only when they differ from the last rendering."""
    prev = ledger.latest("report", ("report",))
    if prev is not None and prev.data.get("checksums") == report.checksums:
        return None
    return ledger.append(CellRecord("report", ("report",), OK, fingerprint(report.checksums),
                                    data={"checksums": report.checksums}))


def write_checksums(ledger: RunLedger, run_dir: Path, extra: tuple = ()) -> Path:
    """``sha256  relative/path`` for every artifact of an ok cell plus ``extra``."""
    entries = {}
    for rec in ledger.cells(status=OK):
        for a in rec.artifacts.values():
            entries[a["path"]] = a["sha256"]
    for p in extra:
        entries[_rel(run_dir, p)] = sha256_file(p)
    path = run_dir / "checksums.sha256"
    path.write_text("".join(f"{h}  {p}\n" for p, h in sorted(entries.items())))
    return path


def run_experiment(manifest: ExperimentManifest, *, run_dir=None, clients: Optional[Clients] = None,
                   render: bool = True) -> RunResult:
    """Execute (or resume) every cell of ``manifest`` and render the report."""
    run_dir = Path(run_dir or manifest.output)
    prepare_run_dir(manifest, run_dir)
    runner = _Runner(manifest, run_dir, clients or make_clients(manifest))
    runner.run()
    report = None
    if render:
        from .report import render_report

        try:
            report = render_report(runner.ledger, run_dir / "report", manifest=manifest)
        except NothingToReportError as exc:
            log.warning("%s", exc)
    if report is not None:
        record_report(runner.ledger, report)
    extra = tuple(report.files) if report is not None else ()
    write_checksums(runner.ledger, run_dir, extra)
    summary = runner.ledger.summary()
    log.info("run %s: %d cells executed, %d failed; %s", manifest.name, runner.executed, runner.failed, summary)
    return RunResult(run_dir, runner.ledger, runner.executed, runner.failed, report)
