"""Binary edit masks, conditioning maps and latent blending.

Mask convention: 1 marks pixels to edit (foreground), 0 marks pixels to keep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .exceptions import (
    ConditioningUnavailableError,
    DimensionError,
    MissingRegionError,
    ParameterError,
)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2 or g.shape[0] == 0 or g.shape[1] == 0:
            raise DimensionError(f"mask must be a non-empty 2-D grid, got shape {g.shape}")
        if g.dtype == bool:
            g = g.astype(np.uint8)
        elif not np.isin(g, (0, 1)).all():
            raise ParameterError("mask values must be 0 or 1")
        g = g.astype(np.uint8)
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def is_empty(self) -> bool:
        return not self.grid.any()

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.grid, other.grid)

    def __hash__(self):
        return hash((self.grid.shape, self.grid.tobytes()))

    def __or__(self, other):
        return mask_union(self, other)

    def __and__(self, other):
        return mask_intersect(self, other)

    def __invert__(self):
        return mask_complement(self)

    @classmethod
    def zeros(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.zeros((h, w), dtype=np.uint8))

    @classmethod
    def ones(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.ones((h, w), dtype=np.uint8))

    def save_png(self, path) -> None:
        Image.fromarray(self.grid * 255, mode="L").save(path)

    @classmethod
    def load_png(cls, path) -> "BinaryMask":
        arr = np.asarray(Image.open(path).convert("L"))
        return cls((arr >= 128).astype(np.uint8))


def _same_dims(a: BinaryMask, b: BinaryMask):
    if a.shape != b.shape:
        raise DimensionError(f"mask dims differ: {a.shape} vs {b.shape}")


def mask_union(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _same_dims(a, b)
    return BinaryMask(a.grid | b.grid)


def mask_intersect(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _same_dims(a, b)
    return BinaryMask(a.grid & b.grid)


def mask_complement(a: BinaryMask, b: Optional[BinaryMask] = None) -> BinaryMask:
    """``1 - a``; with ``b`` given, the set difference ``b AND NOT a``."""
    inv = BinaryMask(1 - a.grid)
    if b is None:
        return inv
    _same_dims(a, b)
    return BinaryMask(b.grid & inv.grid)


def dilate_mask(m: BinaryMask, radius: int) -> BinaryMask:
    if radius < 0:
        raise ParameterError("radius must be >= 0")
    if radius == 0:
        return m
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    disk = (yy * yy + xx * xx) <= radius * radius
    return BinaryMask(ndimage.binary_dilation(m.grid.astype(bool), structure=disk))


def downsample_mask(m: BinaryMask, factor: int) -> BinaryMask:
    """Block-max pooling: a latent cell is foreground if any of its pixels is.

    Grids that are not a multiple of ``factor`` are zero-padded on the
    bottom/right before pooling; :func:`upsample_mask` crops back.
    """
    if not isinstance(factor, (int, np.integer)) or factor <= 0:
        raise ParameterError(f"factor must be a positive integer, got {factor!r}")
    h, w = m.shape
    hp, wp = -(-h // factor) * factor, -(-w // factor) * factor
    g = np.zeros((hp, wp), dtype=np.uint8)
    g[:h, :w] = m.grid
    blocks = g.reshape(hp // factor, factor, wp // factor, factor)
    return BinaryMask(blocks.max(axis=(1, 3)))


def upsample_mask(m: BinaryMask, factor: int, shape: Optional[tuple[int, int]] = None) -> BinaryMask:
    g = np.repeat(np.repeat(m.grid, factor, axis=0), factor, axis=1)
    if shape is not None:
        g = g[: shape[0], : shape[1]]
    return BinaryMask(g)


def blend_latents(m_latent: BinaryMask, z_known, z_unknown):
    """Keep ``z_known`` where the mask is 0, take ``z_unknown`` where it is 1.

    Works on numpy arrays or torch tensors of shape ``[..., H, W]``; the mask
    broadcasts over leading (batch, channel) dims. Selection is exact, so
    background cells are bit-identical to ``z_known``.
    """
    if tuple(z_known.shape) != tuple(z_unknown.shape):
        raise DimensionError(f"latent shapes differ: {tuple(z_known.shape)} vs {tuple(z_unknown.shape)}")
    if tuple(z_known.shape[-2:]) != m_latent.shape:
        raise DimensionError(f"mask {m_latent.shape} does not match latent {tuple(z_known.shape[-2:])}")
    if isinstance(z_known, np.ndarray):
        return np.where(m_latent.grid.astype(bool), z_unknown, z_known)
    import torch

    sel = torch.as_tensor(m_latent.grid.astype(bool), device=z_known.device)
    return torch.where(sel, z_unknown, z_known)


class RegionLibrary:
    """Per-image region masks, e.g. CelebAMask-HQ parsing annotations."""

    def __init__(self, entries: Optional[dict] = None):
        self._entries: dict[str, dict[str, BinaryMask]] = {}
        for image_id, regions in (entries or {}).items():
            for name, m in regions.items():
                self.add(image_id, name, m)

    def add(self, image_id: str, region: str, mask: BinaryMask) -> None:
        regions = self._entries.setdefault(str(image_id), {})
        if regions:
            first = next(iter(regions.values()))
            if first.shape != mask.shape:
                raise DimensionError(f"{image_id}/{region}: {mask.shape} differs from {first.shape}")
        regions[region] = mask

    def regions(self, image_id: str) -> dict[str, BinaryMask]:
        try:
            return self._entries[str(image_id)]
        except KeyError:
            raise MissingRegionError(f"image {image_id}", self.image_ids()) from None

    def image_ids(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, image_id) -> bool:
        return str(image_id) in self._entries

    @classmethod
    def from_directory(cls, root, vocabulary: Sequence[str], image_ids: Optional[Iterable[str]] = None) -> "RegionLibrary":
        """Read ``<image_id>_<region>.png`` files anywhere below ``root``."""
        wanted = None if image_ids is None else {str(i) for i in image_ids}
        suffixes = sorted(vocabulary, key=len, reverse=True)
        lib = cls()
        for path in sorted(Path(root).rglob("*.png")):
            stem = path.stem
            for region in suffixes:
                if stem.endswith("_" + region):
                    image_id = stem[: -len(region) - 1]
                    if wanted is None or image_id in wanted:
                        lib.add(image_id, region, BinaryMask.load_png(path))
                    break
        return lib


def make_mask(lib: RegionLibrary, image_id: str, regions: Sequence[str]) -> BinaryMask:
    available = lib.regions(image_id)
    if not regions:
        raise ParameterError("at least one region is required")
    out = None
    for name in regions:
        if name not in available:
            raise MissingRegionError(name, available)
        out = available[name] if out is None else mask_union(out, available[name])
    return out


# -- conditioning maps --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConditioningMap:
    kind: str
    grid: np.ndarray
    source_image_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("depth", "canny_edge"):
            raise ParameterError(f"unknown conditioning kind {self.kind!r}")
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 2:
            raise DimensionError("conditioning grid must be 2-D")
        if self.kind == "depth" and (g.min() < 0 or g.max() > 1):
            raise ParameterError("depth values must lie in [0, 1]")
        if self.kind == "canny_edge" and not np.isin(g, (0, 1)).all():
            raise ParameterError("edge maps must be binary")
        object.__setattr__(self, "grid", g)

    @property
    def shape(self):
        return self.grid.shape

    def save(self, path) -> Path:
        """Write the PNG (8-bit edges, 16-bit depth) and a JSON sidecar."""
        path = Path(path)
        if self.kind == "canny_edge":
            Image.fromarray((self.grid * 255).astype(np.uint8), mode="L").save(path)
        else:
            Image.fromarray(np.round(self.grid * 65535).astype(np.uint16)).save(path)
        sidecar = {"kind": self.kind, "source_image_id": self.source_image_id, "normalization": "minmax", **self.meta}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "ConditioningMap":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        arr = np.asarray(Image.open(path))
        if meta["kind"] == "canny_edge":
            grid = (arr >= 128).astype(np.float64)
        else:
            grid = arr.astype(np.float64) / 65535.0
        kind = meta.pop("kind")
        src = meta.pop("source_image_id", "")
        meta.pop("normalization", None)
        return cls(kind, grid, src, meta)


def to_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            return img[..., 0]
        return img[..., :3] @ np.array([0.299, 0.587, 0.114])
    if img.ndim != 2:
        raise DimensionError(f"cannot convert shape {img.shape} to grayscale")
    return img


# NMS neighbour offsets (dy, dx) for the four quantized gradient directions.
_DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[y, x] = a[y + dy, x + dx]`` with zeros outside the grid."""
    out = np.zeros_like(a)
    h, w = a.shape
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    yd = slice(max(0, dy), min(h, h + dy))
    xd = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = a[yd, xd]
    return out


def gradient_magnitude(image, sigma: float = 1.0):
    g = to_gray(image)
    g = g - g.min()
    if sigma > 0:
        g = ndimage.gaussian_filter(g, sigma, mode="nearest")
    gx = ndimage.sobel(g, axis=1, mode="nearest")
    gy = ndimage.sobel(g, axis=0, mode="nearest")
    # Rounding drops float noise so constant offsets cannot flip NMS ties.
    mag = np.round(np.hypot(gx, gy), 9)
    return mag, gx, gy


def canny_edge(image, low_threshold: float, high_threshold: float, sigma: float = 1.0,
               source_image_id: str = "") -> ConditioningMap:
    """Gaussian smoothing, Sobel gradients, non-maximum suppression, hysteresis.

    Thresholds are in units of the Sobel magnitude of the input intensities
    (so ~0.1/0.2 for images in [0, 1], ~100/200 for 8-bit images).
    """
    if not (0 <= low_threshold < high_threshold):
        raise ParameterError("need 0 <= low_threshold < high_threshold")
    mag, gx, gy = gradient_magnitude(image, sigma)
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    keep = np.zeros(mag.shape, dtype=bool)
    for k, (dy, dx) in enumerate(_DIRECTIONS):
        fwd = _shift(mag, dy, dx)
        bwd = _shift(mag, -dy, -dx)
        # strict on one side, non-strict on the other: plateaus of width two
        # keep exactly one pixel
        keep |= (sector == k) & (mag > fwd) & (mag >= bwd)
    thin = np.where(keep, mag, 0.0)
    strong = thin > high_threshold
    weak = thin > low_threshold
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n:
        hit = np.unique(labels[strong])
        edges = np.isin(labels, hit[hit > 0])
    else:
        edges = np.zeros_like(weak)
    return ConditioningMap("canny_edge", edges.astype(np.float64), source_image_id,
                           {"low_threshold": low_threshold, "high_threshold": high_threshold, "sigma": sigma})


class DepthModelClient(Protocol):
    client_id: str

    def predict(self, image) -> np.ndarray:
        """Raw (unnormalized) depth for an ``[H, W, 3]`` image."""


def normalize_depth(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise ConditioningUnavailableError("depth model returned non-finite values")
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def _resize(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grid.shape == shape:
        return grid
    img = Image.fromarray(grid.astype(np.float32), mode="F")
    return np.asarray(img.resize((shape[1], shape[0]), Image.BILINEAR), dtype=np.float64)


def depth_map(image, client: DepthModelClient, source_image_id: str = "") -> ConditioningMap:
    img = np.asarray(image)
    try:
        raw = np.asarray(client.predict(img), dtype=np.float64)
    except ConditioningUnavailableError:
        raise
    except Exception as exc:
        raise ConditioningUnavailableError(f"depth client {getattr(client, 'client_id', '?')} failed: {exc}") from exc
    if raw.ndim != 2:
        raise ConditioningUnavailableError(f"depth client returned shape {raw.shape}")
    grid = normalize_depth(_resize(raw, img.shape[:2]))
    return ConditioningMap("depth", grid, source_image_id, {"client_id": getattr(client, "client_id", "")})
