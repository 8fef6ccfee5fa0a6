"""Backbone contract and a small deterministic toy backbone.

Real runs plug a Stable-Diffusion-family model in behind the same methods;
the toy backbone exists so every engine contract can be exercised on a CPU
in seconds.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..exceptions import DimensionError, TokenizationError
from ..taxonomy import load_taxonomy


class Backbone(Protocol):
    backbone_id: str
    image_size: int
    latent_downsample_factor: int
    latent_channels: int
    schedule: "NoiseSchedule"

    def encode(self, images: torch.Tensor) -> torch.Tensor: ...

    def decode(self, latents: torch.Tensor) -> torch.Tensor: ...

    def embed_text(self, prompts, overrides: Optional[dict] = None) -> torch.Tensor: ...

    def predict_noise(self, z_t, t, text_condition, control_features=None, mask=None) -> torch.Tensor: ...

    def denoiser_parameters(self): ...

    def text_encoder_parameters(self): ...


class NoiseSchedule:
    """Linear-beta DDPM forward process with deterministic DDIM sampling."""

    def __init__(self, num_train_timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        self.num_train_timesteps = num_train_timesteps
        betas = np.linspace(beta_start, beta_end, num_train_timesteps, dtype=np.float64)
        self.alphas_cumprod = torch.from_numpy(np.cumprod(1.0 - betas)).float()

    def alpha_bar(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        out = torch.where(t >= 0, self.alphas_cumprod[t.clamp(min=0)], torch.ones(()))
        return out

    def add_noise(self, z0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
        ab = self.alpha_bar(t).reshape(-1, *([1] * (z0.ndim - 1)))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * eps

    def predict_x0(self, z_t, eps, t) -> torch.Tensor:
        ab = self.alpha_bar(t).reshape(-1, *([1] * (z_t.ndim - 1)))
        return (z_t - (1 - ab).sqrt() * eps) / ab.sqrt()

    def sampling_timesteps(self, steps: int) -> list[tuple[int, int]]:
        """Descending ``(t, t_prev)`` pairs; the last ``t_prev`` is -1 (clean)."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        ts = np.linspace(self.num_train_timesteps - 1, 0, steps).round().astype(int).tolist()
        return list(zip(ts, ts[1:] + [-1]))

    def ddim_step(self, z_t, eps, t: int, t_prev: int) -> torch.Tensor:
        x0 = self.predict_x0(z_t, eps, t)
        ab_prev = self.alpha_bar(t_prev)
        return ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps


_PUNCT = re.compile(r"[.,!?;:]+$")
BASE_WORDS = (
    "photo of a an the person man woman face portrait picture with wearing who is looks and "
    "hair eyes eye lips lip color colored orange blue green red gray grey white pink purple "
    "blonde smile happy angry expression sks zwx ohwx phol xqz"
).split()


def default_vocabulary() -> list[str]:
    words = list(BASE_WORDS)
    for a in load_taxonomy():
        words.extend(a.prompt_fragment.lower().split())
    seen, vocab = set(), []
    for w in words:
        if w and w not in seen:
            seen.add(w)
            vocab.append(w)
    return vocab


class Tokenizer:
    def __init__(self, vocabulary: Sequence[str]):
        self.vocab = list(vocabulary)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        # placeholder -> list of vocabulary entries it expands to
        self.placeholders: dict[str, list[str]] = {}

    def add_placeholder(self, token: str, n_vectors: int) -> list[int]:
        if token in self.index or token in self.placeholders:
            raise TokenizationError(f"token {token!r} already exists")
        names = [f"{token}_{i}" for i in range(n_vectors)]
        ids = []
        for name in names:
            self.index[name] = len(self.vocab)
            self.vocab.append(name)
            ids.append(self.index[name])
        self.placeholders[token] = names
        return ids

    def words(self, prompt: str) -> list[str]:
        out = []
        for raw in prompt.lower().split():
            w = _PUNCT.sub("", raw)
            if w:
                out.append(w)
        return out

    def encode(self, prompt: str, extra: Sequence[str] = ()) -> list:
        """Token ids; words in ``extra`` are returned as strings (overrides)."""
        ids = []
        for w in self.words(prompt):
            if w in extra:
                ids.append(w)
            elif w in self.placeholders:
                ids.extend(self.index[n] for n in self.placeholders[w])
            elif w in self.index:
                ids.append(self.index[w])
            else:
                raise TokenizationError(f"unknown token {w!r} in prompt {prompt!r}")
        return ids


def _timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ToyDenoiser(nn.Module):
    def __init__(self, latent_channels: int, cond_dim: int, hidden: int = 32, time_dim: int = 16):
        super().__init__()
        self.time_dim = time_dim
        # latent + mask + control channels
        self.conv_in = nn.Conv2d(latent_channels + 2, hidden, 3, padding=1)
        self.film = nn.Linear(cond_dim + time_dim, 2 * hidden)
        self.conv_mid = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv_out = nn.Conv2d(hidden, latent_channels, 3, padding=1)

    def forward(self, z_t, t, cond, mask, control):
        h = F.silu(self.conv_in(torch.cat([z_t, mask, control], dim=1)))
        emb = torch.cat([cond, _timestep_features(t, self.time_dim)], dim=1)
        scale, shift = self.film(emb).chunk(2, dim=1)
        h = h * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = F.silu(self.conv_mid(h))
        return self.conv_out(h)


class ToyBackbone(nn.Module):
    """4-channel 8x8 latents over 64x64 RGB images, fixed linear autoencoder."""

    backbone_id = "toy-v1"

    def __init__(self, seed: int = 0, image_size: int = 64, latent_channels: int = 4,
                 downsample: int = 8, embed_dim: int = 32, hidden: int = 32,
                 vocabulary: Optional[Sequence[str]] = None):
        super().__init__()
        if image_size % downsample:
            raise ValueError("image_size must be a multiple of downsample")
        self.seed = seed
        self.image_size = image_size
        self.latent_downsample_factor = downsample
        self.latent_channels = latent_channels
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.schedule = NoiseSchedule()
        self.tokenizer = Tokenizer(vocabulary or default_vocabulary())

        gen = torch.Generator().manual_seed(seed)
        mix = torch.randn(latent_channels, 3, generator=gen)
        q, _ = torch.linalg.qr(mix)  # orthonormal columns
        self.register_buffer("enc_mix", q.contiguous())
        self.register_buffer("dec_mix", torch.linalg.pinv(q).contiguous())

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.token_embedding = nn.Embedding(len(self.tokenizer.vocab), embed_dim)
            self.text_proj = nn.Linear(embed_dim, embed_dim)
            self.denoiser = ToyDenoiser(latent_channels, embed_dim, hidden)
        with torch.no_grad():
            self.denoiser.conv_out.weight.mul_(0.1)
            self.denoiser.conv_out.bias.zero_()

    # -- autoencoder --------------------------------------------------------

    def _check_images(self, images: torch.Tensor):
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[-1] != self.image_size \
                or images.shape[-2] != self.image_size:
            raise DimensionError(
                f"expected [B, 3, {self.image_size}, {self.image_size}] images, got {tuple(images.shape)}"
            )

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        self._check_images(images)
        pooled = F.avg_pool2d(images * 2 - 1, self.latent_downsample_factor)
        return torch.einsum("lc,bchw->blhw", self.enc_mix, pooled)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        rgb = torch.einsum("cl,blhw->bchw", self.dec_mix, latents)
        rgb = ((rgb + 1) / 2).clamp(0, 1)
        return F.interpolate(rgb, scale_factor=self.latent_downsample_factor, mode="nearest")

    # -- text ---------------------------------------------------------------

    def embed_text(self, prompts, overrides: Optional[dict] = None) -> torch.Tensor:
        """Mean-pooled token embeddings through a projection; '' is all zeros.

        ``overrides`` maps a placeholder string to a ``[n, embed_dim]`` tensor
        that stands in for the placeholder (textual-inversion training).
        """
        if isinstance(prompts, str):
            prompts = [prompts]
        overrides = overrides or {}
        rows = []
        for prompt in prompts:
            ids = self.tokenizer.encode(prompt, extra=tuple(overrides))
            if not ids:
                rows.append(torch.zeros(self.embed_dim))
                continue
            vecs = []
            for i in ids:
                if isinstance(i, str):
                    vecs.append(overrides[i])
                else:
                    vecs.append(self.token_embedding.weight[i][None])
            pooled = torch.cat(vecs, dim=0).mean(dim=0)
            rows.append(torch.tanh(self.text_proj(pooled)))
        return torch.stack(rows)

    def add_token(self, token: str, vectors: torch.Tensor) -> None:
        """Append learned rows for ``token`` to the embedding table."""
        vectors = torch.as_tensor(vectors, dtype=self.token_embedding.weight.dtype)
        if vectors.ndim != 2 or vectors.shape[1] != self.embed_dim:
            raise DimensionError(f"expected [n, {self.embed_dim}] vectors, got {tuple(vectors.shape)}")
        self.tokenizer.add_placeholder(token, vectors.shape[0])
        old = self.token_embedding.weight.detach()
        table = nn.Embedding(old.shape[0] + vectors.shape[0], self.embed_dim)
        with torch.no_grad():
            table.weight.copy_(torch.cat([old, vectors.detach()], dim=0))
        table.weight.requires_grad_(self.token_embedding.weight.requires_grad)
        self.token_embedding = table

    # -- denoiser -----------------------------------------------------------

    def predict_noise(self, z_t, t, text_condition, control_features=None, mask=None) -> torch.Tensor:
        b, _, h, w = z_t.shape
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(b)
        if text_condition.shape[0] == 1 and b > 1:
            text_condition = text_condition.expand(b, -1)
        if mask is None:
            mask = z_t.new_zeros(b, 1, h, w)
        if control_features is None:
            control_features = z_t.new_zeros(b, 1, h, w)
        if mask.shape[0] == 1 and b > 1:
            mask = mask.expand(b, -1, -1, -1)
        if control_features.shape[0] == 1 and b > 1:
            control_features = control_features.expand(b, -1, -1, -1)
        out = self.denoiser(z_t, t, text_condition, mask, control_features)
        if out.shape != z_t.shape:
            raise DimensionError("noise prediction shape mismatch")
        return out

    def control_from_map(self, grid: np.ndarray, scale: float = 1.0) -> torch.Tensor:
        g = torch.as_tensor(np.asarray(grid, dtype=np.float32))[None, None]
        return F.avg_pool2d(g, self.latent_downsample_factor) * scale

    def denoiser_parameters(self):
        return list(self.denoiser.parameters())

    def text_encoder_parameters(self):
        return [self.token_embedding.weight, *self.text_proj.parameters()]

    # -- persistence ----------------------------------------------------------

    def config(self) -> dict:
        return {
            "backbone_id": self.backbone_id,
            "seed": self.seed,
            "image_size": self.image_size,
            "latent_channels": self.latent_channels,
            "downsample": self.latent_downsample_factor,
            "embed_dim": self.embed_dim,
            "hidden": self.hidden,
        }

    def save(self, directory, extra: Optional[dict] = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), directory / "model.pt")
        manifest = {
            **self.config(),
            "vocabulary": self.tokenizer.vocab,
            "placeholders": self.tokenizer.placeholders,
            **(extra or {}),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "ToyBackbone":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        placeholders = manifest.get("placeholders", {})
        base_vocab = [w for w in manifest["vocabulary"]
                      if not any(w in names for names in placeholders.values())]
        model = cls(seed=manifest["seed"], image_size=manifest["image_size"],
                    latent_channels=manifest["latent_channels"], downsample=manifest["downsample"],
                    embed_dim=manifest["embed_dim"], hidden=manifest["hidden"], vocabulary=base_vocab)
        for token, names in placeholders.items():
            model.add_token(token, torch.zeros(len(names), model.embed_dim))
        model.load_state_dict(torch.load(directory / "model.pt", weights_only=True))
        return model


def parameter_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def images_to_tensor(images, size: Optional[int] = None) -> torch.Tensor:
    """``[H, W, 3]`` float arrays in [0, 1] (or a stacked array) to ``[B, 3, H, W]``."""
    arrs = [np.asarray(im, dtype=np.float32) for im in (images if isinstance(images, (list, tuple)) else [images])]
    if len(arrs) == 1 and arrs[0].ndim == 4:
        arrs = list(arrs[0])
    out = []
    for a in arrs:
        if a.ndim == 2:
            a = np.repeat(a[..., None], 3, axis=2)
        if size is not None and a.shape[:2] != (size, size):
            from PIL import Image

            a = np.asarray(Image.fromarray((a * 255).round().astype(np.uint8)).resize((size, size), Image.BILINEAR),
                           dtype=np.float32) / 255.0
        out.append(torch.from_numpy(np.ascontiguousarray(a[..., :3].transpose(2, 0, 1))))
    return torch.stack(out)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """``[1, 3, H, W]`` or ``[3, H, W]`` tensor to an ``[H, W, 3]`` float array."""
    if t.ndim == 4:
        t = t[0]
    return t.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float64)
