"""Identity matching and error rates (FNMR at fixed FMR)."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import (
    AttrEditError,
    ComparisonError,
    ConfigurationError,
    IncompatibleEmbeddingError,
    MatcherUnavailableError,
    NoGenuineTrialsError,
    ParameterError,
)

log = logging.getLogger(__name__)

DEFAULT_TARGETS = (1e-4, 1e-3)
SOURCES = ("original_gallery", "probe_generated", "probe_original")


class SampleSizeWarning(UserWarning):
    pass


@dataclass
class IdentityEmbedding:
    vector: np.ndarray
    subject_id: str
    matcher_id: str
    source: str = "probe_generated"
    detect_ok: bool = True
    image_id: str = ""
    confidence: float = 1.0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ParameterError(f"source must be one of {SOURCES}")
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.detect_ok and abs(np.linalg.norm(self.vector) - 1.0) > 1e-6:
            raise ParameterError("embedding must be unit norm")

    def meta(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "vector"}


def extract_embedding(client, image, subject_id: str, source: str = "probe_generated",
                      image_id: str = "") -> IdentityEmbedding:
    """Detect, embed and L2-normalize. A missed face gives ``detect_ok=False``."""
    try:
        result = client.embed(image)
    except AttrEditError:
        raise
    except Exception as exc:  # client transport or model crash
        raise MatcherUnavailableError(f"matcher {getattr(client, 'matcher_id', '?')} failed: {exc}") from exc
    mid = client.matcher_id
    if not result.detect_ok or result.vector is None:
        return IdentityEmbedding(np.zeros(0), subject_id, mid, source, False, image_id, result.confidence)
    v = np.asarray(result.vector, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0:
        return IdentityEmbedding(np.zeros(0), subject_id, mid, source, False, image_id, 0.0)
    return IdentityEmbedding(v / norm, subject_id, mid, source, True, image_id, result.confidence)


def similarity(a: IdentityEmbedding, b: IdentityEmbedding) -> float:
    if a.matcher_id != b.matcher_id:
        raise IncompatibleEmbeddingError(f"cannot compare {a.matcher_id} with {b.matcher_id}")
    if not (a.detect_ok and b.detect_ok):
        raise IncompatibleEmbeddingError("both embeddings need a detected face")
    return float(np.clip(np.dot(a.vector, b.vector), -1.0, 1.0))


@dataclass
class ScoreMatrix:
    matcher_id: str
    genuine: np.ndarray
    impostor: np.ndarray
    genuine_pairs: list = field(default_factory=list)
    impostor_pairs: list = field(default_factory=list)
    failed_probes: list = field(default_factory=list)
    # genuine trials lost to acquisition failures
    failed_genuine: int = 0

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.impostor = np.asarray(self.impostor, dtype=np.float64)

    def to_rows(self) -> list[dict]:
        rows = [{"probe": p, "gallery": g, "kind": "genuine", "score": float(s)}
                for (p, g), s in zip(self.genuine_pairs, self.genuine)]
        rows += [{"probe": p, "gallery": g, "kind": "impostor", "score": float(s)}
                 for (p, g), s in zip(self.impostor_pairs, self.impostor)]
        return rows

    def save_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["probe", "gallery", "kind", "score"])
            w.writeheader()
            w.writerows(self.to_rows())
        side = {"matcher_id": self.matcher_id, "failed_probes": self.failed_probes,
                "failed_genuine": self.failed_genuine}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2))
        return path


def compute_scores(gallery: Sequence[IdentityEmbedding], probes: Sequence[IdentityEmbedding],
                   fusion: str = "pairwise") -> ScoreMatrix:
    """Score every probe against the gallery; genuine iff subject ids match.

    ``fusion="max"`` keeps one score per (probe, gallery subject): the best
    match over that subject's gallery images. Probes without a detected face
    are left out and tallied as acquisition failures.
    """
    gallery = [g for g in gallery if g.detect_ok]
    if not gallery:
        raise ConfigurationError("empty gallery")
    if fusion not in ("pairwise", "max"):
        raise ParameterError("fusion must be 'pairwise' or 'max'")
    mids = {g.matcher_id for g in gallery} | {p.matcher_id for p in probes}
    if len(mids) > 1:
        raise IncompatibleEmbeddingError(f"mixed matchers {sorted(mids)}")
    G = np.stack([g.vector for g in gallery])
    g_subj = np.array([g.subject_id for g in gallery])
    g_ids = [g.image_id or f"g{i}" for i, g in enumerate(gallery)]
    gen, imp, gen_pairs, imp_pairs, failed = [], [], [], [], []
    failed_genuine = 0
    for j, p in enumerate(probes):
        pid = p.image_id or f"p{j}"
        if not p.detect_ok:
            failed.append(pid)
            n_same = int((g_subj == p.subject_id).sum())
            failed_genuine += n_same if fusion == "pairwise" else int(n_same > 0)
            continue
        scores = np.clip(G @ p.vector, -1.0, 1.0)
        if fusion == "pairwise":
            for gid, s_id, s in zip(g_ids, g_subj, scores):
                if s_id == p.subject_id:
                    gen.append(s)
                    gen_pairs.append((pid, gid))
                else:
                    imp.append(s)
                    imp_pairs.append((pid, gid))
        else:
            for s_id in dict.fromkeys(g_subj):
                s = scores[g_subj == s_id].max()
                (gen if s_id == p.subject_id else imp).append(s)
                (gen_pairs if s_id == p.subject_id else imp_pairs).append((pid, str(s_id)))
    mid = gallery[0].matcher_id
    return ScoreMatrix(mid, np.array(gen), np.array(imp), gen_pairs, imp_pairs, failed, failed_genuine)


@dataclass(frozen=True)
class Threshold:
    value: float
    fmr: float
    target: float
    unresolvable: bool

    def __float__(self):
        return self.value


def _check_target(target: float):
    if not 0 < target < 1:
        raise ParameterError(f"target FMR must lie in (0, 1), got {target}")


def threshold_at_fmr(impostor_scores, target_fmr: float, extra_candidates=None) -> Threshold:
    """Smallest candidate ``t`` with ``#(impostor >= t) / n <= target_fmr``.

    Candidates are the observed impostor scores, any ``extra_candidates``
    (``fnmr_at_fmr`` passes the genuine scores) and ``+inf``. A match is
    declared iff ``score >= t``.
    """
    _check_target(target_fmr)
    imp = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    n = imp.size
    if n == 0:
        raise ConfigurationError("no impostor scores")
    if n < 10 / target_fmr:
        warnings.warn(f"{n} impostor scores is thin support for FMR {target_fmr:g}", SampleSizeWarning,
                      stacklevel=2)
    pool = imp if extra_candidates is None else np.concatenate([imp, np.asarray(extra_candidates, float)])
    cand = np.append(np.unique(pool), math.inf)
    above = n - np.searchsorted(imp, cand, side="left")
    fmr = above / n
    i = int(np.argmax(fmr <= target_fmr))
    return Threshold(float(cand[i]), float(fmr[i]), target_fmr, n < 1 / target_fmr)


@dataclass(frozen=True)
class RateRow:
    target: float
    threshold: float
    fmr: float
    fnmr: float
    unresolvable: bool
    n_genuine: int
    n_impostor: int
    n_failures: int


@dataclass
class ErrorRates:
    matcher_id: str
    rows: list

    def __post_init__(self):
        ordered = sorted(self.rows, key=lambda r: r.target)
        for r in ordered:
            if not (0 <= r.fnmr <= 1 and 0 <= r.fmr <= 1):
                raise ParameterError("rates must lie in [0, 1]")
        for strict, loose in zip(ordered, ordered[1:]):
            if loose.fnmr > strict.fnmr:
                raise AssertionError("FNMR at a looser FMR target exceeds the stricter one")

    @property
    def targets(self) -> tuple:
        return tuple(r.target for r in self.rows)

    def at(self, target: float) -> RateRow:
        for r in self.rows:
            if math.isclose(r.target, target, rel_tol=1e-9):
                return r
        raise ComparisonError(f"no rates at FMR {target}")

    def fnmr(self, target: float) -> float:
        return self.at(target).fnmr

    def to_dict(self) -> dict:
        return {"matcher_id": self.matcher_id, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorRates":
        return cls(d["matcher_id"], [RateRow(**r) for r in d["rows"]])


def fnmr_at_fmr(scores: ScoreMatrix, targets: Sequence[float] = DEFAULT_TARGETS,
                failures: str = "count", calibration: Optional[np.ndarray] = None) -> ErrorRates:
    """FNMR at each target FMR.

    ``failures="count"`` adds acquisition failures to the genuine trials as
    non-matches; ``"exclude"`` drops them. ``calibration`` supplies impostor
    scores from another pool (e.g. originals) to set the thresholds.
    """
    if failures not in ("count", "exclude"):
        raise ParameterError("failures must be 'count' or 'exclude'")
    n_fail = scores.failed_genuine if failures == "count" else 0
    gen = np.sort(scores.genuine)
    if gen.size + n_fail == 0:
        raise NoGenuineTrialsError("no genuine comparisons")
    imp = scores.impostor if calibration is None else np.asarray(calibration, dtype=np.float64)
    rows = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", SampleSizeWarning)
        for target in targets:
            th = threshold_at_fmr(imp, target, extra_candidates=gen)
            misses = int(np.searchsorted(gen, th.value, side="left")) + n_fail
            rows.append(RateRow(target, th.value, th.fmr, misses / (gen.size + n_fail), th.unresolvable,
                                int(gen.size), int(imp.size), n_fail))
    for w in caught:
        log.info("%s", w.message)
    return ErrorRates(scores.matcher_id, rows)


# -- quality filtering ------------------------------------------------------------

def filter_gallery_by_quality(gallery: dict, client, min_confidence: float = 0.0):
    """Drop images with no detected face or low confidence.

    ``gallery`` maps image id to image. Returns ``(kept, removal_log)``
    where the log lists ``(image_id, reason)``.
    """
    kept, removed = {}, []
    for image_id, image in gallery.items():
        res = client.embed(image)
        if not res.detect_ok:
            removed.append((image_id, "no-face"))
        elif res.confidence < min_confidence:
            removed.append((image_id, f"low-confidence {res.confidence:.3f}"))
        else:
            kept[image_id] = image
    if removed:
        log.info("quality filter removed %d of %d gallery images", len(removed), len(gallery))
    return kept, removed


# -- degradation flags ----------------------------------------------------------

class Flag(str, Enum):
    RED = "RED"
    GREEN = "GREEN"
    NONE = ""


@dataclass(frozen=True)
class DegradationPolicy:
    thresholds: dict = field(default_factory=lambda: {"arcface": 0.10, "adaface": 0.05})
    target: float = 1e-4
    # absorbs float noise such as 0.43 - 0.33 = 0.0999...
    tolerance: float = 1e-9

    def threshold_for(self, matcher_id: str) -> float:
        key = matcher_id.lower()
        for name, value in self.thresholds.items():
            if key == name or key.startswith(name):
                return value
        raise ParameterError(f"no degradation threshold for matcher {matcher_id!r}")


def _fnmr(rates, target):
    return float(rates) if isinstance(rates, (int, float)) else rates.fnmr(target)


def _same_targets(*rates):
    sets = {tuple(sorted(r.targets)) for r in rates if isinstance(r, ErrorRates)}
    if len(sets) > 1:
        raise ComparisonError(f"FMR targets differ: {sorted(sets)}")


def is_degraded(original, edited, matcher_id: str, policy: DegradationPolicy = DegradationPolicy()) -> bool:
    _same_targets(original, edited)
    delta = _fnmr(edited, policy.target) - _fnmr(original, policy.target)
    return delta >= policy.threshold_for(matcher_id) - policy.tolerance


def flag_degradation(original, edited, matcher_id: str, baseline=None,
                     policy: DegradationPolicy = DegradationPolicy()) -> Flag:
    """RED when ``edited`` loses at least the matcher's margin at FMR 1e-4.

    When ``baseline`` (the unmitigated method on the same cell) is given and
    is itself RED, an improvement over it is flagged GREEN.
    """
    _same_targets(original, edited, *([baseline] if baseline is not None else []))
    if baseline is not None and is_degraded(original, baseline, matcher_id, policy):
        if _fnmr(edited, policy.target) < _fnmr(baseline, policy.target):
            return Flag.GREEN
    return Flag.RED if is_degraded(original, edited, matcher_id, policy) else Flag.NONE


# -- t-SNE -------------------------------------------------------------------------

def tsne_export(embeddings, out_dims: int = 3, seed: int = 0, labels: Optional[Sequence[str]] = None,
                out_csv=None, out_png=None, perplexity: Optional[float] = None) -> np.ndarray:
    """Embed identity vectors in ``out_dims`` dimensions; optional CSV and plot."""
    from sklearn.manifold import TSNE

    X = np.stack([e.vector if isinstance(e, IdentityEmbedding) else np.asarray(e, float) for e in embeddings])
    if labels is None and embeddings and isinstance(embeddings[0], IdentityEmbedding):
        labels = [e.subject_id for e in embeddings]
    n = X.shape[0]
    if n < 2 * out_dims:
        raise ParameterError(f"t-SNE needs at least {2 * out_dims} points, got {n}")
    # duplicates share one point (and identical inputs crash the PCA init)
    uniq, inverse = np.unique(X, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = uniq.shape[0]
    if m == 1:
        coords = np.zeros((n, out_dims))
    elif m < 2 * out_dims:
        raise ParameterError(f"t-SNE needs at least {2 * out_dims} distinct points, got {m}")
    else:
        perp = perplexity or float(min(30.0, max(1.0, (m - 1) / 3)))
        method = "barnes_hut" if out_dims < 4 else "exact"
        # m / (4 * exaggeration) without sklearn's floor of 50, which overshoots
        # on small 3-D problems and leaves clusters interleaved
        lr = max(m / (4 * 12.0), 1.0)
        coords = TSNE(n_components=out_dims, perplexity=perp, random_state=seed, init="pca",
                      learning_rate=lr, method=method).fit_transform(uniq)[inverse]
    if out_csv is not None:
        with Path(out_csv).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label"] + [f"dim{i}" for i in range(out_dims)])
            for i, row in enumerate(coords):
                w.writerow([labels[i] if labels is not None else i] + [f"{v:.6f}" for v in row])
    if out_png is not None:
        from .plotting import scatter_embedding

        scatter_embedding(coords, labels, out_png)
    return coords


# -- persistence -----------------------------------------------------------------

def save_embeddings(embeddings: Sequence[IdentityEmbedding], path) -> Path:
    """Vectors as ``.npy`` (zeros for failed detections) plus a JSON sidecar."""
    path = Path(path)
    dim = max((e.vector.size for e in embeddings), default=0)
    arr = np.zeros((len(embeddings), dim))
    for i, e in enumerate(embeddings):
        if e.detect_ok:
            arr[i] = e.vector
    np.save(path.with_suffix(".npy"), arr)
    path.with_suffix(".json").write_text(json.dumps([e.meta() for e in embeddings], indent=2))
    return path.with_suffix(".npy")


def load_embeddings(path) -> list[IdentityEmbedding]:
    path = Path(path)
    arr = np.load(path.with_suffix(".npy"))
    metas = json.loads(path.with_suffix(".json").read_text())
    out = []
    for row, meta in zip(arr, metas):
        vec = row if meta["detect_ok"] else np.zeros(0)
        out.append(IdentityEmbedding(vector=vec, **meta))
    return out


def save_rates(rates: ErrorRates, path) -> Path:
    path = Path(path)
    path.with_suffix(".json").write_text(json.dumps(rates.to_dict(), indent=2))
    with path.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["matcher_id", *RateRow.__dataclass_fields__])
        w.writeheader()
        for r in rates.rows:
            w.writerow({"matcher_id": rates.matcher_id, **asdict(r)})
    return path.with_suffix(".json")


def load_rates(path) -> ErrorRates:
    return ErrorRates.from_dict(json.loads(Path(path).with_suffix(".json").read_text()))
