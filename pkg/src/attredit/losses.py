"""Noise-matching, contrastive and embedding losses for the editing frameworks.

All functions take torch tensors and are differentiable with autograd. They
hold no state, so they are safe to call from several threads.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .exceptions import (
    DegenerateFeatureError,
    DimensionError,
    IncompleteBatchError,
    InsufficientBatchError,
    ParameterError,
)

NORMS = ("mse", "mean-abs")


@dataclass
class LossWeights:
    lambda_p: float = 1.0
    lambda_s: float = 0.1
    lambda_sl: float = 0.1
    lambda_c: float = 0.1
    temperature: float = 0.5
    smooth_l1_beta: float = 1.0
    norm: str = "mse"

    def __post_init__(self):
        for name in ("lambda_p", "lambda_s", "lambda_sl", "lambda_c"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.temperature <= 0:
            raise ParameterError("temperature must be > 0")
        if self.smooth_l1_beta <= 0:
            raise ParameterError("smooth_l1_beta must be > 0")
        if self.norm not in NORMS:
            raise ParameterError(f"norm must be one of {NORMS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = cls.__dataclass_fields__
        extra = set(d) - set(known)
        if extra:
            raise ParameterError(f"unknown loss fields {sorted(extra)}")
        return cls(**d)

    def replace(self, **kw) -> "LossWeights":
        return LossWeights(**{**self.to_dict(), **kw})


@dataclass
class NoisePredictionBatch:
    eps_true: torch.Tensor
    eps_pred: torch.Tensor
    prior_eps_true: Optional[torch.Tensor] = None
    prior_eps_pred: Optional[torch.Tensor] = None
    z0_feats: Optional[torch.Tensor] = None
    zt_feats: Optional[torch.Tensor] = None

    def __post_init__(self):
        _check_pair(self.eps_true, self.eps_pred)
        if self.eps_true.ndim < 1 or self.eps_true.shape[0] < 1:
            raise DimensionError("batch must contain at least one sample")
        if (self.prior_eps_true is None) != (self.prior_eps_pred is None):
            raise IncompleteBatchError("prior branch needs both targets and predictions")
        if self.prior_eps_true is not None:
            _check_pair(self.prior_eps_true, self.prior_eps_pred)
        if (self.z0_feats is None) != (self.zt_feats is None):
            raise IncompleteBatchError("contrastive branch needs both z0 and zt features")
        if self.z0_feats is not None:
            _check_pair(self.z0_feats, self.zt_feats)

    @property
    def has_prior(self) -> bool:
        return self.prior_eps_true is not None

    @property
    def has_features(self) -> bool:
        return self.z0_feats is not None


@dataclass
class LossOutput:
    total: torch.Tensor
    terms: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)

    def as_log(self) -> dict:
        row = {"total": float(self.total.detach())}
        row.update({k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in self.terms.items()})
        row.update({f"{k}_weighted": float(v.detach()) if torch.is_tensor(v) else float(v)
                    for k, v in self.weighted.items()})
        return row


def _check_pair(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    x = x.reshape(x.shape[0], -1)
    norms = x.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise DegenerateFeatureError("zero-norm feature row")
    return x / norms


def mse_noise_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor, norm: str = "mse") -> torch.Tensor:
    _check_pair(eps_true, eps_pred)
    diff = eps_true - eps_pred
    if norm == "mse":
        return (diff * diff).mean()
    if norm == "mean-abs":
        return diff.abs().mean()
    raise ParameterError(f"unknown norm {norm!r}")


def ntxent_contrastive(z0_feats: torch.Tensor, zt_feats: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """NT-Xent over the 2B views; (z0_i, zt_i) are the positive pairs.

    Both directions are averaged, i.e. the mean of the 2B per-view
    cross-entropies.
    """
    _check_pair(z0_feats, zt_feats)
    if temperature <= 0:
        raise ParameterError("temperature must be > 0")
    b = z0_feats.shape[0]
    if b < 2:
        raise InsufficientBatchError("NT-Xent needs at least 2 samples")
    views = torch.cat([_unit_rows(z0_feats), _unit_rows(zt_feats)], dim=0)
    logits = views @ views.T / temperature
    self_mask = torch.eye(2 * b, dtype=torch.bool, device=views.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    positives = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)]).to(views.device)
    return F.cross_entropy(logits, positives)


def smooth_l1(a: torch.Tensor, b: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    _check_pair(a, b)
    if beta <= 0:
        raise ParameterError("beta must be > 0")
    d = (a - b).abs()
    return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).mean()


def cosine_embedding_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean of ``1 - cos(a_i, b_i)`` over rows (all pairs treated as similar)."""
    _check_pair(a, b)
    cos = (_unit_rows(a) * _unit_rows(b)).sum(dim=1)
    return (1.0 - cos).mean()


def db_prop_loss(batch: NoisePredictionBatch, w: LossWeights) -> LossOutput:
    base = mse_noise_loss(batch.eps_true, batch.eps_pred, w.norm)
    zero = base.new_zeros(())
    prior = contrast = zero
    if w.lambda_p > 0:
        if not batch.has_prior:
            raise IncompleteBatchError("lambda_p > 0 but the prior branch is missing")
        prior = mse_noise_loss(batch.prior_eps_true, batch.prior_eps_pred, w.norm)
    if w.lambda_s > 0:
        if not batch.has_features:
            raise IncompleteBatchError("lambda_s > 0 but contrastive features are missing")
        contrast = ntxent_contrastive(batch.z0_feats, batch.zt_feats, w.temperature)
    weighted = {"prior": w.lambda_p * prior, "contrastive": w.lambda_s * contrast}
    total = base + weighted["prior"] + weighted["contrastive"]
    return LossOutput(total, {"mse": base, "prior": prior, "contrastive": contrast}, weighted)


def ti_loss(batch: NoisePredictionBatch, w: LossWeights) -> LossOutput:
    base = mse_noise_loss(batch.eps_true, batch.eps_pred, w.norm)
    zero = base.new_zeros(())
    sl = cos = zero
    if w.lambda_sl > 0:
        sl = smooth_l1(batch.eps_true, batch.eps_pred, w.smooth_l1_beta)
    if w.lambda_c > 0:
        cos = cosine_embedding_loss(batch.eps_true, batch.eps_pred)
    weighted = {"smooth_l1": w.lambda_sl * sl, "cosine": w.lambda_c * cos}
    total = base + weighted["smooth_l1"] + weighted["cosine"]
    return LossOutput(total, {"mse": base, "smooth_l1": sl, "cosine": cos}, weighted)


def cn_ip_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor, norm: str = "mse") -> torch.Tensor:
    """Noise-matching objective of the mask- and depth-conditioned inpainter.

    The conditioning lives inside the noise predictor, so the loss has the
    same form as the plain ControlNet and inpainting objectives.
    """
    return mse_noise_loss(eps_true, eps_pred, norm)
