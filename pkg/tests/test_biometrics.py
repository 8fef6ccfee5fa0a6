import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from attredit.biometrics import (
    DegradationPolicy,
    ErrorRates,
    Flag,
    IdentityEmbedding,
    RateRow,
    SampleSizeWarning,
    ScoreMatrix,
    compute_scores,
    extract_embedding,
    filter_gallery_by_quality,
    flag_degradation,
    fnmr_at_fmr,
    load_embeddings,
    load_rates,
    save_embeddings,
    save_rates,
    similarity,
    threshold_at_fmr,
    tsne_export,
)
from attredit.clients import MatchResult, StubMatcher, UnreachableMatcher
from attredit.exceptions import (
    ComparisonError,
    ConfigurationError,
    IncompatibleEmbeddingError,
    MatcherUnavailableError,
    NoGenuineTrialsError,
    ParameterError,
)
from attredit.toydata import blank_image, toy_face


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def emb(v, subject="a", matcher="arcface", **kw):
    return IdentityEmbedding(unit(v), subject, matcher, **kw)


class FixedMatcher:
    matcher_id = "arcface"

    def __init__(self, vec):
        self.vec = np.asarray(vec, float)

    def embed(self, image):
        return MatchResult(self.vec, True, 0.9)


class CrashingMatcher:
    matcher_id = "arcface"

    def embed(self, image):
        raise ConnectionError("refused")


# -- embeddings ----------------------------------------------------------------------

def test_fixed_vector_is_normalized():
    e = extract_embedding(FixedMatcher(np.arange(1, 513)), toy_face(0).image, "s")
    assert abs(np.linalg.norm(e.vector) - 1) < 1e-12 and e.detect_ok


def test_blank_image_fails_detection():
    e = extract_embedding(StubMatcher(), blank_image(), "s")
    assert not e.detect_ok


def test_stub_is_deterministic():
    m = StubMatcher()
    img = toy_face(3).image
    a, b = extract_embedding(m, img, "s"), extract_embedding(m, img, "s")
    assert np.array_equal(a.vector, b.vector)
    assert a.vector.shape == (512,)


def test_client_failure_is_distinct_from_missed_face():
    with pytest.raises(MatcherUnavailableError):
        extract_embedding(CrashingMatcher(), toy_face(0).image, "s")
    with pytest.raises(MatcherUnavailableError):
        extract_embedding(UnreachableMatcher(), toy_face(0).image, "s")


def test_same_subject_scores_higher_than_different():
    m = StubMatcher()
    a0 = extract_embedding(m, toy_face(1, variant=0).image, "1")
    a1 = extract_embedding(m, toy_face(1, variant=1).image, "1")
    b0 = extract_embedding(m, toy_face(2, variant=0).image, "2")
    assert similarity(a0, a1) > similarity(a0, b0)


def test_similarity_cases():
    rng = np.random.default_rng(0)
    a = emb(rng.standard_normal(512))
    assert similarity(a, a) == pytest.approx(1.0, abs=1e-12)
    neg = IdentityEmbedding(-a.vector, "b", "arcface")
    assert similarity(a, neg) == pytest.approx(-1.0, abs=1e-12)
    for _ in range(20):
        x, y = emb(rng.standard_normal(512)), emb(rng.standard_normal(512))
        hand = sum(p * q for p, q in zip(x.vector, y.vector))
        assert similarity(x, y) == pytest.approx(hand, abs=1e-12)
        assert abs(similarity(x, y) - similarity(y, x)) <= 1e-12
    with pytest.raises(IncompatibleEmbeddingError):
        similarity(a, IdentityEmbedding(a.vector, "a", "adaface"))


def test_non_unit_vector_rejected():
    with pytest.raises(ParameterError):
        IdentityEmbedding(np.ones(4), "a", "arcface")


def test_scale_invariance_of_decisions():
    rng = np.random.default_rng(1)
    raw = rng.standard_normal((8, 512))
    subjects = list("aabbccdd")

    def decisions(scale):
        es = [extract_embedding(FixedMatcher(scale * r), None, s) for r, s in zip(raw, subjects)]
        sm = compute_scores(es[::2], es[1::2])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SampleSizeWarning)
            t = threshold_at_fmr(sm.impostor, 0.1).value
        return np.concatenate([sm.genuine >= t, sm.impostor >= t])

    assert np.array_equal(decisions(1.0), decisions(37.5))


# -- score matrices -------------------------------------------------------------------

def test_pair_counting():
    rng = np.random.default_rng(2)
    gallery = [emb(rng.standard_normal(8), s) for s in ("a", "a", "b", "b")]
    probes = [emb(rng.standard_normal(8), "a"), emb(rng.standard_normal(8), "b")]
    sm = compute_scores(gallery, probes[:1])
    assert sm.genuine.size == 2 and sm.impostor.size == 2
    sm = compute_scores(gallery, probes)
    assert sm.genuine.size == 4 and sm.impostor.size == 4


def test_failed_probe_is_tallied():
    rng = np.random.default_rng(3)
    gallery = [emb(rng.standard_normal(8), s) for s in ("a", "a", "b")]
    bad = IdentityEmbedding(np.zeros(0), "a", "arcface", detect_ok=False, image_id="x")
    sm = compute_scores(gallery, [bad, emb(rng.standard_normal(8), "b")])
    assert sm.failed_probes == ["x"] and sm.failed_genuine == 2
    assert sm.genuine.size == 1 and sm.impostor.size == 2


def test_scores_match_nested_loop():
    rng = np.random.default_rng(4)
    gallery = [emb(rng.standard_normal(16), f"s{i % 5}") for i in range(15)]
    probes = [emb(rng.standard_normal(16), f"s{i % 5}") for i in range(10)]
    sm = compute_scores(gallery, probes)
    gen, imp = [], []
    for p in probes:
        for g in gallery:
            s = float(np.dot(p.vector, g.vector))
            (gen if p.subject_id == g.subject_id else imp).append(s)
    assert np.allclose(np.sort(sm.genuine), np.sort(gen), atol=1e-12)
    assert np.allclose(np.sort(sm.impostor), np.sort(imp), atol=1e-12)


def test_max_fusion():
    rng = np.random.default_rng(5)
    gallery = [emb(rng.standard_normal(8), s) for s in ("a", "a", "b", "b", "c")]
    probes = [emb(rng.standard_normal(8), "a")]
    sm = compute_scores(gallery, probes, fusion="max")
    assert sm.genuine.size == 1 and sm.impostor.size == 2
    assert sm.genuine[0] == pytest.approx(max(np.dot(probes[0].vector, g.vector) for g in gallery[:2]))


def test_empty_gallery():
    with pytest.raises(ConfigurationError):
        compute_scores([], [emb([1, 0], "a")])


def test_scores_csv(tmp_path):
    rng = np.random.default_rng(6)
    gallery = [emb(rng.standard_normal(8), s) for s in ("a", "b")]
    sm = compute_scores(gallery, [emb(rng.standard_normal(8), "a")])
    sm.save_csv(tmp_path / "scores.csv")
    lines = (tmp_path / "scores.csv").read_text().splitlines()
    assert lines[0] == "probe,gallery,kind,score" and len(lines) == 3


# -- thresholds -----------------------------------------------------------------------

def test_threshold_tenths():
    imp = [round(0.1 * k, 1) for k in range(1, 11)]
    with pytest.warns(SampleSizeWarning):
        th = threshold_at_fmr(imp, 0.10)
    assert th.value == 1.0 and th.fmr == pytest.approx(0.1)
    assert (th.value, th.fmr) == oracles.threshold_scan(imp, [], 0.10)[:2]


def test_threshold_separable():
    with pytest.warns(SampleSizeWarning):
        th = threshold_at_fmr([-1.0] * 20, 0.01)
    assert th.value > -1 and th.fmr == 0


def test_threshold_unresolvable():
    rng = np.random.default_rng(7)
    imp = rng.uniform(-1, 1, 100)
    with pytest.warns(SampleSizeWarning):
        th = threshold_at_fmr(imp, 1e-4)
    assert th.unresolvable and th.fmr == 0 and th.value > imp.max()


@pytest.mark.parametrize("bad", [0, 1, -0.1, 1.5])
def test_threshold_bad_target(bad):
    with pytest.raises(ParameterError):
        threshold_at_fmr([0.1], bad)


def test_perfect_separation_gives_zero_fnmr():
    sm = ScoreMatrix("arcface", [0.9] * 10, [0.1] * 50)
    rates = fnmr_at_fmr(sm, [1e-4, 1e-3, 0.5])
    assert all(r.fnmr == 0 for r in rates.rows)


def test_no_genuine_trials():
    with pytest.raises(NoGenuineTrialsError):
        fnmr_at_fmr(ScoreMatrix("arcface", [], [0.1, 0.2]))


def test_failures_count_or_exclude():
    sm = ScoreMatrix("arcface", [0.9] * 8, [0.1] * 20, failed_genuine=2)
    assert fnmr_at_fmr(sm, [0.1]).fnmr(0.1) == pytest.approx(0.2)
    assert fnmr_at_fmr(sm, [0.1], failures="exclude").fnmr(0.1) == 0.0


def test_full_scan_oracle_large():
    rng = np.random.default_rng(8)
    gen = np.round(rng.normal(0.6, 0.15, 500), 3)
    imp = np.round(rng.normal(0.0, 0.15, 5000), 3)
    rates = fnmr_at_fmr(ScoreMatrix("arcface", gen, imp), [1e-4, 1e-3])
    for row in rates.rows:
        t, fmr, fnmr = oracles.threshold_scan(imp, gen, row.target)
        assert (row.threshold, row.fmr, row.fnmr) == (t, fmr, fnmr)
    assert rates.fnmr(1e-3) <= rates.fnmr(1e-4)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=1, max_size=40),
       st.lists(st.integers(-20, 20), min_size=1, max_size=40),
       st.integers(0, 3),
       st.sampled_from([1e-4, 1e-3, 0.01, 0.05, 0.2, 0.5]))
def test_oracle_property(gen, imp, fails, target):
    gen = [g / 20 for g in gen]
    imp = [i / 20 for i in imp]
    sm = ScoreMatrix("arcface", gen, imp, failed_genuine=fails)
    row = fnmr_at_fmr(sm, [target]).rows[0]
    assert (row.threshold, row.fmr, row.fnmr) == oracles.threshold_scan(imp, gen, target, fails)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=60),
       st.lists(st.floats(-1, 1), min_size=1, max_size=60),
       st.floats(1e-4, 0.9), st.floats(1e-4, 0.9))
def test_threshold_monotone(gen, imp, a, b):
    lo, hi = sorted((a, b))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        strict = threshold_at_fmr(imp, lo, gen)
        loose = threshold_at_fmr(imp, hi, gen)
    assert strict.value >= loose.value
    rates = fnmr_at_fmr(ScoreMatrix("arcface", gen, imp), [lo, hi])
    assert rates.rows[0].fnmr >= rates.rows[1].fnmr
    for r in rates.rows:
        assert 0 <= r.fnmr <= 1 and 0 <= r.fmr <= 1 and r.fmr <= r.target


def test_calibration_pool():
    sm = ScoreMatrix("arcface", [0.5, 0.6, 0.7], [0.0] * 10)
    rates = fnmr_at_fmr(sm, [0.1], calibration=[0.65] * 10)
    assert rates.rows[0].threshold == 0.7 and rates.fnmr(0.1) == pytest.approx(2 / 3)


def test_rates_roundtrip(tmp_path):
    rates = fnmr_at_fmr(ScoreMatrix("adaface", [0.5, 0.9], [0.1, 0.2, 0.6]), [1e-4, 1e-3])
    save_rates(rates, tmp_path / "r")
    assert load_rates(tmp_path / "r") == rates
    assert (tmp_path / "r.csv").read_text().startswith("matcher_id,target,threshold")


def test_error_rates_reject_non_monotone():
    rows = [RateRow(1e-4, 0.5, 0, 0.1, False, 1, 1, 0), RateRow(1e-3, 0.4, 0, 0.2, False, 1, 1, 0)]
    with pytest.raises(AssertionError):
        ErrorRates("arcface", rows)


# -- quality filtering ------------------------------------------------------------------

def test_quality_filter_removes_blank():
    gallery = {"a": toy_face(1).image, "blank": blank_image(), "b": toy_face(2).image}
    kept, removed = filter_gallery_by_quality(gallery, StubMatcher())
    assert list(kept) == ["a", "b"] and removed == [("blank", "no-face")]


def test_quality_filter_all_pass():
    gallery = {"a": toy_face(1).image}
    kept, removed = filter_gallery_by_quality(gallery, StubMatcher())
    assert kept == gallery and removed == []


def test_quality_filter_confidence_floor():
    kept, removed = filter_gallery_by_quality({"a": toy_face(1).image}, StubMatcher(), min_confidence=1.01)
    assert not kept and removed[0][1].startswith("low-confidence")


# -- degradation flags -------------------------------------------------------------------

def test_flag_examples():
    assert flag_degradation(0.10, 0.87, "arcface") is Flag.RED
    assert flag_degradation(0.33, 0.33, "arcface") is Flag.NONE
    assert flag_degradation(0.08, 0.15, "adaface") is Flag.RED
    assert flag_degradation(0.33, 0.43, "arcface") is Flag.RED  # 0.0999... in floats
    assert flag_degradation(0.33, 0.42, "arcface") is Flag.NONE
    assert flag_degradation(0.08, 0.12, "adaface") is Flag.NONE


def test_flag_green_needs_red_baseline():
    assert flag_degradation(0.33, 0.38, "arcface", baseline=0.43) is Flag.GREEN
    assert flag_degradation(0.33, 0.44, "arcface", baseline=0.43) is Flag.RED
    assert flag_degradation(0.33, 0.40, "arcface", baseline=0.41) is Flag.NONE
    # improving on a red baseline wins even if still degraded
    assert flag_degradation(0.33, 0.44, "arcface", baseline=0.55) is Flag.GREEN


# Red/green cells of the CelebA table (DB-base vs DB-prop), both matchers.
CELEBA = {
    "arcface": (0.33, {
        "bald": (0.43, 0.38, "RED", "GREEN"), "big_nose": (0.46, 0.40, "RED", "GREEN"),
        "black_hair": (0.51, 0.38, "RED", "GREEN"), "double_chin": (0.46, 0.40, "RED", "GREEN"),
        "necktie": (0.47, 0.35, "RED", "GREEN"), "female": (0.55, 0.44, "RED", "GREEN"),
        "old": (0.48, 0.39, "RED", "GREEN"), "anger": (0.62, 0.40, "RED", "GREEN"),
    }),
    "adaface": (0.08, {
        "bald": (0.15, 0.09, "RED", "GREEN"), "black_hair": (0.13, 0.09, "RED", "GREEN"),
        "female": (0.17, 0.10, "RED", "GREEN"), "old": (0.21, 0.08, "RED", "GREEN"),
        "anger": (0.21, 0.08, "RED", "GREEN"),
    }),
}


@pytest.mark.parametrize("matcher", ["arcface", "adaface"])
def test_flags_reproduce_reference_table(matcher):
    original, cells = CELEBA[matcher]
    for attr, (base, prop, want_base, want_prop) in cells.items():
        assert flag_degradation(original, base, matcher).value == want_base, attr
        assert flag_degradation(original, prop, matcher, baseline=base).value == want_prop, attr


def test_unflagged_reference_cells():
    assert flag_degradation(0.33, 0.40, "arcface") is Flag.NONE
    assert flag_degradation(0.33, 0.41, "arcface") is Flag.NONE
    assert flag_degradation(0.08, 0.11, "adaface") is Flag.NONE
    assert flag_degradation(0.08, 0.12, "adaface") is Flag.NONE


def test_flag_target_mismatch():
    a = fnmr_at_fmr(ScoreMatrix("arcface", [0.5], [0.1, 0.2]), [1e-4, 1e-3])
    b = fnmr_at_fmr(ScoreMatrix("arcface", [0.5], [0.1, 0.2]), [1e-4])
    with pytest.raises(ComparisonError):
        flag_degradation(a, b, "arcface")


def test_flag_configurable_and_unknown_matcher():
    policy = DegradationPolicy(thresholds={"facenet": 0.2})
    assert flag_degradation(0.1, 0.25, "facenet", policy=policy) is Flag.NONE
    with pytest.raises(ParameterError):
        flag_degradation(0.1, 0.5, "facenet")


# -- t-SNE ------------------------------------------------------------------------------

def blobs(rng, n=20, d=512):
    a = rng.standard_normal((n, d)) * 0.05 + 3
    b = rng.standard_normal((n, d)) * 0.05 - 3
    return np.vstack([a, b]), ["a"] * n + ["b"] * n


def test_tsne_blobs_separate(tmp_path):
    from sklearn.metrics import silhouette_score

    X, labels = blobs(np.random.default_rng(9))
    coords = tsne_export(list(X), 3, seed=0, labels=labels, out_csv=tmp_path / "t.csv", out_png=tmp_path / "t.png")
    assert coords.shape == (40, 3)
    assert silhouette_score(coords, labels) > 0.5
    assert (tmp_path / "t.png").stat().st_size > 0
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 41


def test_tsne_deterministic_and_degenerate():
    X, _ = blobs(np.random.default_rng(10), n=6)
    assert np.array_equal(tsne_export(list(X), seed=3), tsne_export(list(X), seed=3))
    same = tsne_export([np.ones(512)] * 10, seed=0)
    mixed = tsne_export(list(X), seed=0)
    spread = lambda c: np.max(np.linalg.norm(c[:, None] - c[None], axis=-1))  # noqa: E731
    assert spread(same) < 0.1 * spread(mixed)


def test_tsne_too_few_points():
    with pytest.raises(ParameterError):
        tsne_export([np.ones(4)] * 5, 3)


def test_embedding_roundtrip(tmp_path):
    m = StubMatcher()
    es = [extract_embedding(m, toy_face(1).image, "s1", "original_gallery", "g0"),
          extract_embedding(m, blank_image(), "s1", "probe_generated", "p0")]
    save_embeddings(es, tmp_path / "emb")
    back = load_embeddings(tmp_path / "emb")
    assert back[0].meta() == es[0].meta() and np.array_equal(back[0].vector, es[0].vector)
    assert not back[1].detect_ok
    assert math.isclose(np.linalg.norm(back[0].vector), 1.0)
