"""Matcher, VQA and depth clients: in-tree stubs and thin HTTP adapters.

Endpoints for the HTTP clients come from ``ATTREDIT_MATCHER_URL``,
``ATTREDIT_VQA_URL`` and ``ATTREDIT_DEPTH_URL``. Each service receives a JSON
body with a base64 PNG under ``"image"``.
"""

from __future__ import annotations

import base64
import hashlib
import io
import os
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .exceptions import ConditioningUnavailableError, MatcherUnavailableError, VQAUnavailableError

EMBED_DIM = 512


def to_uint8(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0, 1) * 255).round().astype(np.uint8)
    return arr


def image_key(image) -> str:
    """Content hash used to key stub answers and caches."""
    arr = np.ascontiguousarray(to_uint8(image))
    return hashlib.sha1(arr.tobytes() + str(arr.shape).encode()).hexdigest()[:16]


def encode_png(image) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@dataclass
class MatchResult:
    vector: Optional[np.ndarray]
    detect_ok: bool
    confidence: float = 1.0


class MatcherClient(Protocol):
    matcher_id: str

    def embed(self, image) -> MatchResult: ...


class VQAClient(Protocol):
    client_id: str

    def answer(self, image, question: str) -> str: ...


# -- stubs -------------------------------------------------------------------------

class StubMatcher:
    """Deterministic 512-D random projection of a downsampled image.

    Near-constant images count as "no face detected". Confidence grows with
    image contrast, which is enough to exercise quality filtering.
    """

    def __init__(self, matcher_id: str = "arcface", seed: int = 0, grid: int = 16,
                 min_std: float = 0.02):
        self.matcher_id = matcher_id
        self.grid = grid
        self.min_std = min_std
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((EMBED_DIM, grid * grid * 3)) / np.sqrt(grid * grid * 3)
        self.calls = 0

    def _features(self, image) -> np.ndarray:
        from PIL import Image

        arr = to_uint8(image)
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        small = np.asarray(Image.fromarray(arr[..., :3]).resize((self.grid, self.grid), Image.BILINEAR),
                           dtype=np.float64) / 255.0
        return (small - small.mean()).reshape(-1)

    def embed(self, image) -> MatchResult:
        self.calls += 1
        std = float(np.asarray(to_uint8(image), dtype=np.float64).std() / 255.0)
        if std < self.min_std:
            return MatchResult(None, False, 0.0)
        return MatchResult(self._proj @ self._features(image), True, min(1.0, std * 4))


class UnreachableMatcher:
    """Stands in for a matcher service that is down."""

    def __init__(self, matcher_id: str = "arcface"):
        self.matcher_id = matcher_id

    def embed(self, image) -> MatchResult:
        raise MatcherUnavailableError(f"matcher {self.matcher_id!r} is unreachable")


class StubVQA:
    """Canned VQA answers.

    ``mode="yes"`` always says yes, ``"no"`` always no. ``"echo"`` and
    ``"inverted"`` answer from ``truth``, a mapping ``(image_key, question)
    -> bool``; unknown pairs fall back to ``default``. ``answers`` pins raw
    strings for specific pairs and wins over the mode.
    """

    def __init__(self, mode: str = "yes", truth: Optional[dict] = None, answers: Optional[dict] = None,
                 default: str = "I am not sure.", client_id: Optional[str] = None, fail_times: int = 0):
        if mode not in ("yes", "no", "echo", "inverted"):
            raise ValueError(f"unknown stub mode {mode!r}")
        self.mode = mode
        self.truth = truth or {}
        self.answers = answers or {}
        self.default = default
        self.client_id = client_id or f"stub-{mode}"
        self._fail = fail_times
        self.calls = 0

    def answer(self, image, question: str) -> str:
        self.calls += 1
        if self._fail > 0:
            self._fail -= 1
            raise VQAUnavailableError("stub outage")
        key = (image_key(image), question)
        if key in self.answers:
            return self.answers[key]
        if self.mode == "yes":
            return "Yes."
        if self.mode == "no":
            return "No."
        if key not in self.truth:
            return self.default
        value = bool(self.truth[key])
        if self.mode == "inverted":
            value = not value
        return "Yes." if value else "No."


class StubDepth:
    """Depth from a radial falloff modulated by luminance; deterministic."""

    def predict(self, image) -> np.ndarray:
        raw = np.asarray(image)
        arr = raw.astype(np.float64) / (255.0 if raw.dtype == np.uint8 else 1.0)
        gray = arr.mean(axis=2) if arr.ndim == 3 else arr
        h, w = gray.shape
        yy, xx = np.mgrid[0:h, 0:w]
        radial = 1.0 - np.hypot((yy - h / 2) / h, (xx - w / 2) / w)
        return radial + 0.2 * gray


# -- HTTP adapters ----------------------------------------------------------------

def _post(url: str, payload: dict, timeout: float, error_cls):
    import requests

    try:
        resp = requests.post(url, json=payload, timeout=timeout)
        resp.raise_for_status()
        return resp.json()
    except (requests.RequestException, ValueError) as exc:
        raise error_cls(f"request to {url} failed: {exc}") from exc


def _endpoint(explicit: Optional[str], env: str, error_cls) -> str:
    url = explicit or os.environ.get(env)
    if not url:
        raise error_cls(f"no endpoint configured; pass a URL or set {env}")
    return url


class HttpMatcher:
    """Expects ``{"detected": bool, "embedding": [...], "confidence": float}``."""

    def __init__(self, matcher_id: str, url: Optional[str] = None, timeout: float = 30.0):
        self.matcher_id = matcher_id
        self.url = _endpoint(url, "ATTREDIT_MATCHER_URL", MatcherUnavailableError)
        self.timeout = timeout

    def embed(self, image) -> MatchResult:
        body = _post(self.url, {"image": encode_png(image), "matcher": self.matcher_id}, self.timeout,
                     MatcherUnavailableError)
        if not body.get("detected", False):
            return MatchResult(None, False, float(body.get("confidence", 0.0)))
        return MatchResult(np.asarray(body["embedding"], dtype=np.float64), True,
                           float(body.get("confidence", 1.0)))


class HttpVQA:
    """Expects ``{"answer": str}``; decoding settings are sent with every call."""

    def __init__(self, client_id: str = "llava-v1.5-7b", url: Optional[str] = None, timeout: float = 60.0,
                 temperature: float = 0.0, max_new_tokens: int = 32):
        self.client_id = client_id
        self.url = _endpoint(url, "ATTREDIT_VQA_URL", VQAUnavailableError)
        self.timeout = timeout
        self.decoding = {"temperature": temperature, "max_new_tokens": max_new_tokens}

    def answer(self, image, question: str) -> str:
        body = _post(self.url, {"image": encode_png(image), "question": question, "model": self.client_id,
                                **self.decoding}, self.timeout, VQAUnavailableError)
        return str(body.get("answer") or "")


class HttpDepth:
    """Expects ``{"depth": [[...], ...]}`` (any scale; normalized downstream)."""

    def __init__(self, url: Optional[str] = None, timeout: float = 60.0):
        self.url = _endpoint(url, "ATTREDIT_DEPTH_URL", ConditioningUnavailableError)
        self.timeout = timeout

    def predict(self, image) -> np.ndarray:
        body = _post(self.url, {"image": encode_png(image)}, self.timeout, ConditioningUnavailableError)
        return np.asarray(body["depth"], dtype=np.float64)
