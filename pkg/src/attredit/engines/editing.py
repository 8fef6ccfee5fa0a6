"""Inference: txt2img generation and mask-guided local editing."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .. import masks as mask_ops
from ..exceptions import ConditioningUnavailableError, DimensionError
from ..masks import BinaryMask, ConditioningMap
from ..taxonomy import PromptTemplate, attributes_in_prompt, build_edit_prompt, load_taxonomy
from .backbone import images_to_tensor, tensor_to_image

log = logging.getLogger(__name__)

DEFAULT_STEPS = 50
DEFAULT_GUIDANCE = 3.0


class DegenerateMaskWarning(UserWarning):
    pass


class PromptMaskMismatchWarning(UserWarning):
    pass


def _guided_noise(backbone, z, t, cond, uncond, guidance, control=None, mask=None):
    if guidance == 1.0:
        return backbone.predict_noise(z, t, cond, control, mask)
    both = backbone.predict_noise(
        torch.cat([z, z]), t, torch.cat([uncond, cond]),
        None if control is None else torch.cat([control, control]),
        None if mask is None else torch.cat([mask, mask]),
    )
    eps_u, eps_c = both.chunk(2)
    return eps_u + guidance * (eps_c - eps_u)


@torch.no_grad()
def generate_global(handle, prompt: str, seed: int = 0, steps: int = DEFAULT_STEPS,
                    guidance_scale: float = DEFAULT_GUIDANCE) -> np.ndarray:
    """Sample an image for ``prompt`` from pure noise (deterministic DDIM)."""
    cond = handle.embed_text(prompt)
    uncond = handle.embed_text("")
    gen = torch.Generator().manual_seed(seed)
    side = handle.image_size // handle.latent_downsample_factor
    z = torch.randn((1, handle.latent_channels, side, side), generator=gen)
    for t, t_prev in handle.schedule.sampling_timesteps(steps):
        eps = _guided_noise(handle, z, t, cond, uncond, guidance_scale)
        z = handle.schedule.ddim_step(z, eps, t, t_prev)
    return tensor_to_image(handle.decode(z))


@dataclass
class LocalEditResult:
    image: np.ndarray
    blend_calls: int
    latent_mask: BinaryMask
    steps: int


def check_prompt_mask(prompt: str, regions: Sequence[str]) -> list[str]:
    """Attributes named in ``prompt`` whose regions miss the masked ones."""
    chosen = set(regions)
    bad = []
    for attr in attributes_in_prompt(prompt):
        if attr.regions and not chosen & set(attr.regions):
            bad.append(attr.id)
    return bad


@torch.no_grad()
def edit_local(backbone, image: np.ndarray, mask: BinaryMask, prompt: str,
               conditioning: Optional[ConditioningMap], steps: int = DEFAULT_STEPS,
               guidance: float = DEFAULT_GUIDANCE, controlnet_scale: float = 1.0, seed: int = 0,
               *, composite: bool = True, regions: Optional[Sequence[str]] = None,
               require_conditioning: bool = True) -> LocalEditResult:
    """Regenerate the masked region of ``image`` following ``prompt``.

    Every denoising step blends the sample with the noised input latent
    through the latent-resolution mask, so unmasked latent cells follow the
    input exactly. With ``composite`` the decoded result is pasted back
    over the input in pixel space, which makes the background bit-exact.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[:2] != mask.shape:
        raise DimensionError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    if conditioning is None:
        if require_conditioning:
            raise ConditioningUnavailableError("no depth or edge conditioning supplied")
    elif conditioning.shape != mask.shape:
        raise DimensionError(f"conditioning {conditioning.shape} does not match image {mask.shape}")
    if mask.is_empty:
        warnings.warn("all-zero mask: nothing to edit, returning a reconstruction",
                      DegenerateMaskWarning, stacklevel=2)
    if regions is not None:
        bad = check_prompt_mask(prompt, regions)
        if bad:
            warnings.warn(f"prompt asks for {bad} but the mask covers {list(regions)}; "
                          "the output will be close to a reconstruction", PromptMaskMismatchWarning, stacklevel=2)

    x = images_to_tensor([image])
    z0 = backbone.encode(x)
    m_lat = mask_ops.downsample_mask(mask, backbone.latent_downsample_factor)
    m_in = torch.tensor(np.array(m_lat.grid), dtype=z0.dtype)[None, None]
    control = None
    if conditioning is not None:
        control = backbone.control_from_map(conditioning.grid, controlnet_scale)

    cond = backbone.embed_text(prompt)
    uncond = backbone.embed_text("")
    gen = torch.Generator().manual_seed(seed)
    eps_known = torch.randn(z0.shape, generator=gen)
    z = torch.randn(z0.shape, generator=gen)
    calls = 0
    for t, t_prev in backbone.schedule.sampling_timesteps(steps):
        eps = _guided_noise(backbone, z, t, cond, uncond, guidance, control, m_in)
        z_gen = backbone.schedule.ddim_step(z, eps, t, t_prev)
        z_known = backbone.schedule.add_noise(z0, eps_known, t_prev) if t_prev >= 0 else z0
        z = mask_ops.blend_latents(m_lat, z_known, z_gen)
        calls += 1

    out = tensor_to_image(backbone.decode(z))
    if composite:
        out = np.where(mask.grid.astype(bool)[..., None], out, image)
    return LocalEditResult(out, calls, m_lat, steps)


def reconstruct(backbone, image: Optional[np.ndarray] = None, *, mode: str = "local", seed: int = 0,
                steps: int = DEFAULT_STEPS, template: Optional[PromptTemplate] = None,
                composite: bool = True) -> np.ndarray:
    """The "no attribute" output: empty-mask edit or reconstruction prompt."""
    if mode == "local":
        if image is None:
            raise ValueError("local reconstruction needs an input image")
        h, w = np.asarray(image).shape[:2]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateMaskWarning)
            res = edit_local(backbone, image, BinaryMask.zeros(h, w), "", None, steps, seed=seed,
                             composite=composite, require_conditioning=False)
        return res.image
    if mode == "global":
        template = template or PromptTemplate("sks")
        prompt = build_edit_prompt(template, load_taxonomy().reconstruction)
        return generate_global(backbone, prompt, seed, steps)
    raise ValueError(f"mode must be 'local' or 'global', got {mode!r}")
