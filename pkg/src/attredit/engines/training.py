"""Global editing: subject fine-tuning and token-embedding learning."""

from __future__ import annotations

import copy
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from ..exceptions import (
    ConfigurationError,
    DimensionError,
    DivergenceError,
    IncompatibleEmbeddingError,
    InsufficientExemplarsError,
    ParameterError,
)
from ..losses import LossWeights, NoisePredictionBatch, db_prop_loss, mse_noise_loss, ti_loss
from ..taxonomy import PromptTemplate, Taxonomy, build_edit_prompt, load_taxonomy
from .backbone import images_to_tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
REG_PER_ATTRIBUTE = 30
ALLOWED_N_VECTORS = (1, 2, 5)
# number of input images each method expects per subject
EXPECTED_INPUTS = {"db_base": 10, "db_prop": 10, "ti": 10, "ti_cs": 10, "cn": 1, "cn_ti": 1, "cn_ip": 1}


def load_image(path, size: Optional[int] = None) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass(frozen=True)
class RegEntry:
    image_path: str
    caption: str
    attribute_id: str
    source_id: str


@dataclass
class RegularizationSet:
    entries: list[RegEntry]

    def __len__(self):
        return len(self.entries)

    @property
    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.attribute_id] = out.get(e.attribute_id, 0) + 1
        return out

    @property
    def source_ids(self) -> set[str]:
        return {e.source_id for e in self.entries}

    def assert_disjoint(self, subject_ids: Sequence[str]) -> None:
        clash = self.source_ids & set(subject_ids)
        if clash:
            raise ConfigurationError(f"regularization set overlaps target subjects: {sorted(clash)}")

    def to_manifest(self) -> dict:
        return {"counts": self.counts, "total": len(self), "entries": [asdict(e) for e in self.entries]}

    def write_manifest(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_manifest(), indent=2))
        return path

    @classmethod
    def read_manifest(cls, path) -> "RegularizationSet":
        doc = json.loads(Path(path).read_text())
        return cls([RegEntry(**e) for e in doc["entries"]])


def regularization_caption(attr) -> str:
    return build_edit_prompt(PromptTemplate(""), attr, require_identifier=False)


def build_regularization_set(
    attribute_image_dirs,
    taxonomy: Optional[Taxonomy] = None,
    *,
    per_attribute: int = REG_PER_ATTRIBUTE,
    require_all: bool = True,
    exclude_ids: Sequence[str] = (),
    manifest_path=None,
) -> RegularizationSet:
    """Pick ``per_attribute`` images per attribute and caption them.

    ``attribute_image_dirs`` is either a mapping ``attribute_id -> directory``
    or a root directory with one subdirectory per attribute id. The source id
    of an image is its file stem; stems listed in ``exclude_ids`` are skipped
    so the set stays disjoint from target subjects. Pass a smaller
    ``per_attribute`` and ``require_all=False`` for toy runs.
    """
    taxonomy = taxonomy or load_taxonomy()
    if isinstance(attribute_image_dirs, Mapping):
        dirs = {taxonomy.get(k).id: Path(v) for k, v in attribute_image_dirs.items()}
    else:
        root = Path(attribute_image_dirs)
        dirs = {taxonomy.get(p.name).id: p for p in sorted(root.iterdir()) if p.is_dir()}
    editable = [a for a in taxonomy if not a.is_reconstruction]
    if require_all:
        missing = [a.id for a in editable if a.id not in dirs]
        if missing:
            raise InsufficientExemplarsError(missing[0], 0, per_attribute)
    excluded = set(exclude_ids)
    entries = []
    for attr in editable:
        if attr.id not in dirs:
            continue
        files = [p for p in _list_images(dirs[attr.id]) if p.stem not in excluded]
        if len(files) < per_attribute:
            raise InsufficientExemplarsError(attr.id, len(files), per_attribute)
        caption = regularization_caption(attr)
        entries.extend(RegEntry(str(p), caption, attr.id, p.stem) for p in files[:per_attribute])
    reg = RegularizationSet(entries)
    if manifest_path is not None:
        reg.write_manifest(manifest_path)
    return reg


@dataclass
class SubjectSet:
    subject_id: str
    images: list

    def __post_init__(self):
        if not self.images:
            raise InsufficientExemplarsError(self.subject_id, 0, 1)

    def check_for_method(self, method: str) -> None:
        want = EXPECTED_INPUTS.get(method)
        if want is not None and len(self.images) != want:
            warnings.warn(f"{self.subject_id}: {method} expects {want} input images, got {len(self.images)}",
                          stacklevel=2)

    @classmethod
    def from_directory(cls, directory, size: Optional[int] = None, limit: Optional[int] = None) -> "SubjectSet":
        directory = Path(directory)
        files = _list_images(directory)[:limit]
        return cls(directory.name, [load_image(p, size) for p in files])


@dataclass
class TrainConfig:
    steps: int = 50
    lr: float = 1e-3
    batch_size: int = 4
    seed: int = 0
    rare_identifier: str = "sks"
    class_noun: str = "person"
    max_grad_norm: float = 1.0
    checkpoint_every: int = 10
    # token learning only
    placeholder: str = "<sks>"
    init_token: str = "person"
    prompt_template: str = "photo of a {token} person"
    objective: str = "ti"

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if not self.lr > 0:
            raise ParameterError("lr must be > 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.objective not in ("ti", "mse"):
            raise ParameterError("objective must be 'ti' or 'mse'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenEmbedding:
    token: str
    vectors: np.ndarray
    backbone_id: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise DimensionError("token vectors must be [n_vectors, embed_dim]")
        if self.n_vectors not in ALLOWED_N_VECTORS:
            raise ParameterError(f"n_vectors must be one of {ALLOWED_N_VECTORS}")
        if not np.isfinite(self.vectors).all():
            raise ParameterError("token vectors must be finite")

    @property
    def n_vectors(self) -> int:
        return self.vectors.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, directory, extra: Optional[dict] = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "token.npy", self.vectors)
        meta = {"token": self.token, "backbone_id": self.backbone_id, "n_vectors": self.n_vectors,
                "embed_dim": self.embed_dim, **(extra or {})}
        (directory / "token.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "TokenEmbedding":
        directory = Path(directory)
        meta = json.loads((directory / "token.json").read_text())
        return cls(meta["token"], np.load(directory / "token.npy"), meta.get("backbone_id", ""))


def attach_embedding(backbone, embedding: TokenEmbedding) -> None:
    """Register a learned token on ``backbone`` (inference-time composition)."""
    if embedding.embed_dim != backbone.embed_dim:
        raise IncompatibleEmbeddingError(
            f"embedding dim {embedding.embed_dim} does not match backbone dim {backbone.embed_dim}"
        )
    if embedding.backbone_id and embedding.backbone_id != backbone.backbone_id:
        raise IncompatibleEmbeddingError(
            f"embedding trained on {embedding.backbone_id!r}, backbone is {backbone.backbone_id!r}"
        )
    backbone.add_token(embedding.token, torch.from_numpy(embedding.vectors))


@dataclass
class TrainRun:
    config: TrainConfig
    weights: LossWeights
    history: list = field(default_factory=list)
    backbone: object = None
    embedding: Optional[TokenEmbedding] = None

    @property
    def seed(self) -> int:
        return self.config.seed

    def write_history(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for row in self.history:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        return path

    def manifest(self) -> dict:
        return {
            "backbone_id": getattr(self.backbone, "backbone_id", ""),
            "seed": self.seed,
            "steps": len(self.history),
            "weights": self.weights.to_dict(),
            "config": self.config.to_dict(),
        }


def read_history(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _encode_all(backbone, images) -> torch.Tensor:
    with torch.no_grad():
        return backbone.encode(images_to_tensor(list(images), backbone.image_size))


def _noised(backbone, z0, gen):
    eps = torch.randn(z0.shape, generator=gen)
    t = torch.randint(0, backbone.schedule.num_train_timesteps, (z0.shape[0],), generator=gen)
    return eps, t, backbone.schedule.add_noise(z0, eps, t)


def _check_finite(out, step, last_good):
    if not torch.isfinite(out.total):
        raise DivergenceError(f"non-finite loss at step {step}", step, last_good)


def finetune_global(backbone, subject: SubjectSet, reg: Optional[RegularizationSet],
                    weights: LossWeights, config: Optional[TrainConfig] = None) -> TrainRun:
    """Fine-tune the denoiser on the subject with prior and contrastive terms.

    Only denoiser parameters are optimized; the text encoder and the
    autoencoder stay frozen. Each step draws a subject batch and, when a
    regularization set is supplied, a prior batch captioned per attribute.
    """
    config = config or TrainConfig()
    gen = torch.Generator().manual_seed(config.seed)
    template = PromptTemplate(config.rare_identifier, config.class_noun)
    prompt = build_edit_prompt(template, load_taxonomy().reconstruction)

    z_subj = _encode_all(backbone, subject.images)
    frozen = backbone.text_encoder_parameters()
    flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            cond = backbone.embed_text(prompt)
            if reg is not None and len(reg):
                z_reg = _encode_all(backbone, [load_image(e.image_path) for e in reg.entries])
                captions = sorted({e.caption for e in reg.entries})
                cap_cond = dict(zip(captions, backbone.embed_text(captions)))
                reg_cond = torch.stack([cap_cond[e.caption] for e in reg.entries])
            else:
                z_reg = None

        params = backbone.denoiser_parameters()
        opt = torch.optim.Adam(params, lr=config.lr)
        last_good = copy.deepcopy(backbone.denoiser.state_dict())
        history = []
        bs = config.batch_size
        for step in range(config.steps):
            idx = torch.randint(0, z_subj.shape[0], (bs,), generator=gen)
            z0 = z_subj[idx]
            eps, t, z_t = _noised(backbone, z0, gen)
            eps_pred = backbone.predict_noise(z_t, t, cond.expand(bs, -1))
            prior_true = prior_pred = None
            if z_reg is not None:
                ridx = torch.randint(0, z_reg.shape[0], (bs,), generator=gen)
                r_eps, r_t, r_zt = _noised(backbone, z_reg[ridx], gen)
                prior_true = r_eps
                prior_pred = backbone.predict_noise(r_zt, r_t, reg_cond[ridx])
            feats = None
            if bs >= 2:
                x0_hat = backbone.schedule.predict_x0(z_t, eps_pred, t)
                feats = (z0.flatten(1), x0_hat.flatten(1))
            batch = NoisePredictionBatch(
                eps, eps_pred, prior_true, prior_pred,
                feats[0] if feats else None, feats[1] if feats else None,
            )
            out = db_prop_loss(batch, weights)
            _check_finite(out, step, last_good)
            opt.zero_grad()
            out.total.backward()
            if config.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(params, config.max_grad_norm)
            opt.step()
            history.append({"step": step, **out.as_log()})
            if (step + 1) % config.checkpoint_every == 0:
                last_good = copy.deepcopy(backbone.denoiser.state_dict())
    finally:
        for p, f in zip(frozen, flags):
            p.requires_grad_(f)
    log.info("finetune_global %s: %d steps, final total %.4f", subject.subject_id, config.steps,
             history[-1]["total"])
    return TrainRun(config, weights, history, backbone=backbone)


def learn_token_embedding(backbone, exemplars, n_vectors: int = 1,
                          weights: Optional[LossWeights] = None,
                          config: Optional[TrainConfig] = None, *, register: bool = True) -> TrainRun:
    """Learn ``n_vectors`` embedding rows for ``config.placeholder``.

    Every backbone parameter is frozen; the new rows live in a separate
    tensor and are appended to the token table afterwards (when
    ``register``), so existing rows never change.
    """
    if n_vectors not in ALLOWED_N_VECTORS:
        raise ParameterError(f"n_vectors must be one of {ALLOWED_N_VECTORS}")
    weights = weights or LossWeights()
    config = config or TrainConfig(lr=5e-3)
    images = exemplars.images if isinstance(exemplars, SubjectSet) else list(exemplars)
    gen = torch.Generator().manual_seed(config.seed)
    prompt = config.prompt_template.format(token=config.placeholder)

    z_all = _encode_all(backbone, images)
    init_id = backbone.tokenizer.index[config.init_token]
    init = backbone.token_embedding.weight.detach()[init_id]
    vectors = torch.nn.Parameter(init.repeat(n_vectors, 1).clone())

    all_params = list(backbone.parameters())
    flags = [p.requires_grad for p in all_params]
    for p in all_params:
        p.requires_grad_(False)
    try:
        opt = torch.optim.Adam([vectors], lr=config.lr)
        last_good = vectors.detach().clone()
        history = []
        bs = config.batch_size
        for step in range(config.steps):
            idx = torch.randint(0, z_all.shape[0], (bs,), generator=gen)
            eps, t, z_t = _noised(backbone, z_all[idx], gen)
            cond = backbone.embed_text(prompt, overrides={config.placeholder: vectors})
            eps_pred = backbone.predict_noise(z_t, t, cond.expand(bs, -1))
            if config.objective == "mse":
                total = mse_noise_loss(eps, eps_pred, weights.norm)
                row = {"total": float(total.detach()), "mse": float(total.detach())}
                if not torch.isfinite(total):
                    raise DivergenceError(f"non-finite loss at step {step}", step, {"vectors": last_good})
            else:
                out = ti_loss(NoisePredictionBatch(eps, eps_pred), weights)
                _check_finite(out, step, {"vectors": last_good})
                total, row = out.total, out.as_log()
            opt.zero_grad()
            total.backward()
            opt.step()
            history.append({"step": step, **row})
            if (step + 1) % config.checkpoint_every == 0:
                last_good = vectors.detach().clone()
    finally:
        for p, f in zip(all_params, flags):
            p.requires_grad_(f)
    emb = TokenEmbedding(config.placeholder, vectors.detach().numpy().copy(), backbone.backbone_id)
    if register:
        attach_embedding(backbone, emb)
    return TrainRun(config, weights, history, backbone=backbone, embedding=emb)
