import re

import numpy as np
import pytest
import torch

from attredit.engines import (
    DegenerateMaskWarning,
    PromptMaskMismatchWarning,
    RegularizationSet,
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
    parameter_checksum,
    reconstruct,
)
from attredit.engines.training import read_history
from attredit.exceptions import (
    ConditioningUnavailableError,
    ConfigurationError,
    DimensionError,
    DivergenceError,
    IncompatibleEmbeddingError,
    InsufficientExemplarsError,
    ParameterError,
    TokenizationError,
)
from attredit.losses import LossWeights
from attredit.masks import BinaryMask, ConditioningMap, canny_edge, make_mask
from attredit.taxonomy import list_attributes
from attredit.toydata import region_library, toy_face, write_attribute_pool

CAPTION = re.compile(r"^photo of a person (with |wearing )?[a-z ]+$")


def subject(seed=1, n=10):
    return SubjectSet(f"s{seed}", [toy_face(seed, variant=v).image for v in range(n)])


@pytest.fixture(scope="module")
def tuned():
    b = ToyBackbone()
    finetune_global(b, subject(), None, LossWeights(lambda_s=0, lambda_p=0), TrainConfig(steps=50))
    return b


# -- regularization set -------------------------------------------------------

def test_full_regularization_set_has_780(tmp_path):
    ids = [a.id for a in list_attributes() if not a.is_reconstruction]
    assert len(ids) == 26
    write_attribute_pool(tmp_path, ids, 30, size=16)
    reg = build_regularization_set(tmp_path, manifest_path=tmp_path / "reg.json")
    assert len(reg) == 780
    assert set(reg.counts.values()) == {30}
    back = RegularizationSet.read_manifest(tmp_path / "reg.json")
    assert back.entries == reg.entries


def test_undersupplied_attribute_is_named(tmp_path):
    write_attribute_pool(tmp_path, ["bald"], 30, size=16)
    write_attribute_pool(tmp_path, ["bangs"], 29, size=16, seed_offset=500)
    with pytest.raises(InsufficientExemplarsError, match="bangs"):
        build_regularization_set(tmp_path, require_all=False)


def test_strict_mode_requires_every_attribute(tmp_path):
    write_attribute_pool(tmp_path, ["bald"], 30, size=16)
    with pytest.raises(InsufficientExemplarsError):
        build_regularization_set(tmp_path)


def test_relaxed_toy_set_captions(tmp_path):
    write_attribute_pool(tmp_path, ["blond_hair", "eyeglasses"], 3, size=16)
    reg = build_regularization_set(tmp_path, per_attribute=3, require_all=False)
    assert len(reg) == 6
    assert reg.counts == {"blond_hair": 3, "eyeglasses": 3}
    for e in reg.entries:
        assert CAPTION.match(e.caption), e.caption
        assert "sks" not in e.caption
    assert {e.caption for e in reg.entries} == {
        "photo of a person with blond hair", "photo of a person wearing eyeglasses"}


def test_exclusion_keeps_reg_set_disjoint(tmp_path):
    write_attribute_pool(tmp_path, ["bald"], 4, size=16)
    reg = build_regularization_set(tmp_path, per_attribute=3, require_all=False, exclude_ids=["reg10000"])
    assert "reg10000" not in reg.source_ids
    reg.assert_disjoint(["reg10000"])
    with pytest.raises(ConfigurationError):
        reg.assert_disjoint(["reg10001"])


# -- fine-tuning ----------------------------------------------------------------

def test_finetune_mse_trends_down():
    run = finetune_global(ToyBackbone(), subject(), None, LossWeights(lambda_s=0, lambda_p=0),
                          TrainConfig(steps=50))
    mse = np.array([r["mse"] for r in run.history])
    assert len(run.history) == 50
    assert (np.diff(mse) < 0).sum() > len(mse) // 2
    assert mse[-10:].mean() < mse[:10].mean()


def test_zero_weights_zero_breakdown(tmp_path):
    write_attribute_pool(tmp_path, ["bald"], 3)
    reg = build_regularization_set(tmp_path, per_attribute=3, require_all=False)
    run = finetune_global(ToyBackbone(), subject(n=3), reg, LossWeights(lambda_p=0, lambda_s=0),
                          TrainConfig(steps=5))
    for row in run.history:
        assert row["prior"] == 0 and row["contrastive"] == 0
        assert row["prior_weighted"] == 0 and row["contrastive_weighted"] == 0
        assert row["total"] == row["mse"]


def test_prior_and_contrastive_terms_active(tmp_path):
    write_attribute_pool(tmp_path, ["bald", "hat"], 3)
    reg = build_regularization_set(tmp_path, per_attribute=3, require_all=False)
    run = finetune_global(ToyBackbone(), subject(n=3), reg, LossWeights(), TrainConfig(steps=3))
    assert all(r["prior"] > 0 and r["contrastive"] > 0 for r in run.history)


def test_prior_weight_without_reg_set_fails():
    from attredit.exceptions import IncompleteBatchError

    with pytest.raises(IncompleteBatchError):
        finetune_global(ToyBackbone(), subject(n=2), None, LossWeights(), TrainConfig(steps=1))


def test_finetune_is_deterministic(tmp_path):
    w = LossWeights(lambda_p=0)
    a = finetune_global(ToyBackbone(), subject(), None, w, TrainConfig(steps=20, seed=3))
    b = finetune_global(ToyBackbone(), subject(), None, w, TrainConfig(steps=20, seed=3))
    assert a.history == b.history
    a.write_history(tmp_path / "h.jsonl")
    assert read_history(tmp_path / "h.jsonl") == a.history


def test_finetune_freezes_text_encoder():
    b = ToyBackbone()
    text_before = parameter_checksum(b.text_encoder_parameters())
    den_before = parameter_checksum(b.denoiser_parameters())
    finetune_global(b, subject(), None, LossWeights(lambda_p=0), TrainConfig(steps=10))
    assert parameter_checksum(b.text_encoder_parameters()) == text_before
    assert parameter_checksum(b.denoiser_parameters()) != den_before
    assert all(p.requires_grad for p in b.text_encoder_parameters())


def test_divergence_carries_last_good_state():
    b = ToyBackbone()
    with pytest.raises(DivergenceError) as info:
        finetune_global(b, subject(n=2), None, LossWeights(lambda_p=0, lambda_s=0),
                        TrainConfig(steps=5, lr=float("inf"), max_grad_norm=0))
    err = info.value
    assert err.step >= 1
    assert all(torch.isfinite(v).all() for v in err.last_good_state.values())


# -- token learning -------------------------------------------------------------

def test_token_learning_touches_only_new_rows():
    b = ToyBackbone()
    table = b.token_embedding.weight.detach().clone()
    others = {k: v.clone() for k, v in b.state_dict().items() if k != "token_embedding.weight"}
    run = learn_token_embedding(b, subject(), 1, LossWeights(), TrainConfig(steps=50, lr=5e-3))
    new_table = b.token_embedding.weight.detach()
    assert new_table.shape[0] == table.shape[0] + 1
    assert torch.equal(new_table[: table.shape[0]], table)
    assert not torch.equal(new_table[-1], table[b.tokenizer.index["person"]])
    for k, v in b.state_dict().items():
        if k != "token_embedding.weight":
            assert torch.equal(v, others[k]), k
    assert run.embedding.vectors.shape == (1, b.embed_dim)
    assert len(run.history) == 50


def test_five_vectors_shape():
    b = ToyBackbone()
    run = learn_token_embedding(b, subject(n=2), 5, config=TrainConfig(steps=3))
    assert run.embedding.vectors.shape == (5, b.embed_dim)
    # the placeholder now expands to five rows
    assert len(b.tokenizer.encode("photo of a <sks> person")) == 4 + 5


def test_bad_vector_count():
    with pytest.raises(ParameterError):
        learn_token_embedding(ToyBackbone(), subject(n=1), 3)


def test_ti_ablation_matches_plain_mse():
    w = LossWeights(lambda_sl=0, lambda_c=0)
    a = learn_token_embedding(ToyBackbone(), subject(), 2, w, TrainConfig(steps=30, objective="ti"))
    b = learn_token_embedding(ToyBackbone(), subject(), 2, w, TrainConfig(steps=30, objective="mse"))
    ta = np.array([r["total"] for r in a.history])
    tb = np.array([r["total"] for r in b.history])
    assert np.max(np.abs(ta - tb)) < 1e-6
    assert np.allclose(a.embedding.vectors, b.embedding.vectors, atol=1e-6)


def test_embedding_roundtrip_and_compatibility(tmp_path):
    b = ToyBackbone()
    run = learn_token_embedding(b, subject(n=2), 2, config=TrainConfig(steps=2), register=False)
    run.embedding.save(tmp_path / "tok")
    back = TokenEmbedding.load(tmp_path / "tok")
    assert np.array_equal(back.vectors, run.embedding.vectors) and back.token == "<sks>"
    attach_embedding(b, back)
    b.embed_text("photo of a <sks> person with blond hair")
    with pytest.raises(IncompatibleEmbeddingError):
        attach_embedding(ToyBackbone(embed_dim=16), back)


def test_token_embedding_rejects_non_finite():
    with pytest.raises(ParameterError):
        TokenEmbedding("<x>", np.full((1, 4), np.nan))


# -- generation -----------------------------------------------------------------

def test_generation_deterministic(tuned):
    a = generate_global(tuned, "photo of a sks person", seed=7, steps=20)
    b = generate_global(tuned, "photo of a sks person", seed=7, steps=20)
    assert np.array_equal(a, b)
    assert a.shape == (64, 64, 3)


def test_rare_identifier_changes_output(tuned):
    a = generate_global(tuned, "photo of a sks person", seed=7, steps=20)
    b = generate_global(tuned, "photo of a person", seed=7, steps=20)
    assert np.abs(a - b).max() > 0


def test_unknown_token():
    with pytest.raises(TokenizationError):
        generate_global(ToyBackbone(), "photo of a zebra", steps=2)


def test_checkpoint_roundtrip(tuned, tmp_path):
    tuned.save(tmp_path / "ckpt", {"steps": 50})
    back = ToyBackbone.load(tmp_path / "ckpt")
    assert np.array_equal(generate_global(tuned, "photo of a sks person", 1, 5),
                          generate_global(back, "photo of a sks person", 1, 5))


# -- local editing -------------------------------------------------------------

@pytest.fixture(scope="module")
def face():
    return toy_face(4)


def edges(image):
    return canny_edge(image, 0.05, 0.15)


def test_background_exact_hair_edit(tuned, face):
    lib = region_library({"f": face})
    m = make_mask(lib, "f", ["hair"])
    res = edit_local(tuned, face.image, m, "photo of a sks person with blond hair", edges(face.image), steps=20)
    outside = ~m.grid.astype(bool)
    assert np.array_equal(res.image[outside], face.image[outside])
    assert res.blend_calls == 20
    assert res.latent_mask.shape == (8, 8)


def test_blend_called_once_per_step(tuned, face, monkeypatch):
    import attredit.masks as mask_ops

    calls = []
    real = mask_ops.blend_latents
    monkeypatch.setattr(mask_ops, "blend_latents", lambda *a: calls.append(1) or real(*a))
    m = BinaryMask(face.regions["nose"])
    res = edit_local(tuned, face.image, m, "photo of a sks person with a big nose", edges(face.image), steps=13)
    assert len(calls) == 13 == res.blend_calls


def test_zero_mask_returns_input(tuned, face):
    with pytest.warns(DegenerateMaskWarning):
        res = edit_local(tuned, face.image, BinaryMask.zeros(64, 64), "photo of a sks person",
                         edges(face.image), steps=10)
    assert np.array_equal(res.image, face.image)


def test_zero_mask_latent_only_is_decoded_input(tuned, face):
    with pytest.warns(DegenerateMaskWarning):
        res = edit_local(tuned, face.image, BinaryMask.zeros(64, 64), "", edges(face.image), steps=5,
                         composite=False)
    expected = tuned.decode(tuned.encode(torch.from_numpy(face.image.transpose(2, 0, 1)[None]).float()))
    assert np.allclose(res.image, expected[0].numpy().transpose(1, 2, 0), atol=1e-6)


def test_empty_prompt_is_slight_variant(tuned, face):
    m = BinaryMask(face.regions["hair"])
    res = edit_local(tuned, face.image, m, "", edges(face.image), steps=20)
    inside = m.grid.astype(bool)
    assert np.array_equal(res.image[~inside], face.image[~inside])
    # toy denoiser: only the pixel range bounds the foreground change
    delta = np.abs(res.image[inside] - face.image[inside])
    assert np.isfinite(delta).all() and delta.max() <= 1.0
    assert res.image.min() >= 0 and res.image.max() <= 1


def test_missing_conditioning(tuned, face):
    with pytest.raises(ConditioningUnavailableError):
        edit_local(tuned, face.image, BinaryMask(face.regions["hair"]), "photo of a sks person", None)


def test_dimension_checks(tuned, face):
    with pytest.raises(DimensionError):
        edit_local(tuned, face.image, BinaryMask.zeros(32, 32), "", edges(face.image))
    small = ConditioningMap("depth", np.zeros((32, 32)))
    with pytest.raises(DimensionError):
        edit_local(tuned, face.image, BinaryMask(face.regions["hair"]), "", small)


def test_prompt_mask_mismatch_warns(tuned, face):
    m = BinaryMask(face.regions["hair"])
    with pytest.warns(PromptMaskMismatchWarning):
        edit_local(tuned, face.image, m, "photo of a sks person with bushy eyebrows", edges(face.image),
                   steps=3, regions=["hair"])


def test_reconstruct_modes(tuned, face):
    assert np.array_equal(reconstruct(tuned, face.image, steps=5), face.image)
    a = reconstruct(tuned, mode="global", seed=2, steps=5)
    b = reconstruct(tuned, mode="global", seed=2, steps=5)
    assert np.array_equal(a, b)
