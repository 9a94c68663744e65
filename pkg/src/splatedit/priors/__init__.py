"""Pluggable prior-model backends: deterministic mocks and a remote client.

Engine code talks to a PriorBackends bundle, never to a concrete backend;
the bundle records every call (capability, input digest, latency) so runs
can be audited, and knows whether it is mock or remote for reproducibility
metadata.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgumentError
from .mocks import (COLOR_VOCAB, DIFFUSION_STEPS, FULL_EMBED_DIM, T_MAX,
                    T_MIN, MockDenoiser, MockDepthEstimator,
                    MockDepthInpainter, MockEmbedder, MockRgbInpainter,
                    MockSegmenter, alpha_bar, hash_unit, luminance)

__all__ = [
    "COLOR_VOCAB",
    "DIFFUSION_STEPS",
    "FULL_EMBED_DIM",
    "T_MAX",
    "T_MIN",
    "BackendCall",
    "EmbeddingSpace",
    "MockDenoiser",
    "MockDepthEstimator",
    "MockDepthInpainter",
    "MockEmbedder",
    "MockRgbInpainter",
    "MockSegmenter",
    "PriorBackends",
    "alpha_bar",
    "hash_unit",
    "luminance",
    "mock_bundle",
    "remote_bundle",
]


@dataclass(frozen=True)
class EmbeddingSpace:
    """Dimensions of the full and compressed language-embedding spaces."""

    full_dim: int = FULL_EMBED_DIM
    compressed_dim: int = 16

    def __post_init__(self):
        if not 0 < self.compressed_dim <= self.full_dim:
            raise InvalidArgumentError(
                "compressed_dim must satisfy 0 < d <= full_dim")


@dataclass(frozen=True)
class BackendCall:
    """One recorded backend invocation."""

    capability: str
    digest: str
    ms: float


def _digest(*parts) -> str:
    h = hashlib.sha1()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        else:
            h.update(repr(p).encode("utf-8"))
    return h.hexdigest()[:12]


@dataclass
class PriorBackends:
    """The bundle of prior-model capabilities the engine consumes."""

    depth_estimator: object
    rgb_inpainter: object
    depth_inpainter: object
    segmenter: object
    embedder: object
    denoiser: object
    kind: str = "mock"
    call_log: list[BackendCall] = field(default_factory=list)

    def _record(self, capability, digest, t0):
        self.call_log.append(BackendCall(
            capability=capability, digest=digest,
            ms=(time.perf_counter() - t0) * 1000.0))

    def estimate_depth(self, image):
        t0 = time.perf_counter()
        out = self.depth_estimator.estimate_depth(image)
        self._record("depth", _digest(np.asarray(image)), t0)
        return out

    def inpaint_rgb(self, image, mask):
        t0 = time.perf_counter()
        out = self.rgb_inpainter.inpaint_rgb(image, mask)
        self._record("inpaint_rgb",
                     _digest(np.asarray(image), np.asarray(mask)), t0)
        return out

    def inpaint_depth(self, depth, fixed_mask, rgb_guide=None):
        t0 = time.perf_counter()
        out = self.depth_inpainter.inpaint_depth(depth, fixed_mask, rgb_guide)
        self._record("inpaint_depth",
                     _digest(np.asarray(depth), np.asarray(fixed_mask)), t0)
        return out

    def segment(self, image):
        t0 = time.perf_counter()
        out = self.segmenter.segment(image)
        self._record("segment", _digest(np.asarray(image)), t0)
        return out

    def embed_image(self, image, mask=None):
        t0 = time.perf_counter()
        out = self.embedder.embed_image(image, mask)
        self._record("embed_image", _digest(
            np.asarray(image),
            np.asarray(mask) if mask is not None else "full"), t0)
        return out

    def embed_text(self, text):
        t0 = time.perf_counter()
        out = self.embedder.embed_text(text)
        self._record("embed_text", _digest(text), t0)
        return out

    def denoise(self, image, t, prompt, cfg_scale=5.0):
        t0 = time.perf_counter()
        out = self.denoiser.denoise(image, t, prompt, cfg_scale)
        self._record("denoise",
                     _digest(np.asarray(image), t, prompt, cfg_scale), t0)
        return out

    @property
    def embed_dim(self) -> int:
        return self.embedder.dim

    def metadata(self) -> dict:
        return {"kind": self.kind, "embed_dim": self.embed_dim,
                "calls": len(self.call_log)}


def mock_bundle(embed_dim: int = FULL_EMBED_DIM) -> PriorBackends:
    """Fully offline deterministic backend bundle."""
    return PriorBackends(
        depth_estimator=MockDepthEstimator(),
        rgb_inpainter=MockRgbInpainter(),
        depth_inpainter=MockDepthInpainter(),
        segmenter=MockSegmenter(),
        embedder=MockEmbedder(embed_dim),
        denoiser=MockDenoiser(),
        kind="mock",
    )


def remote_bundle(base_url: str, *, timeout: float = 30.0,
                  max_inflight: int = 4,
                  embed_dim: int = FULL_EMBED_DIM) -> PriorBackends:
    """Bundle backed by a model server speaking the /v1 JSON protocol."""
    from .remote import RemoteBackend
    remote = RemoteBackend(base_url, timeout=timeout,
                           max_inflight=max_inflight, embed_dim=embed_dim)
    return PriorBackends(
        depth_estimator=remote,
        rgb_inpainter=remote,
        depth_inpainter=remote,
        segmenter=remote,
        embedder=remote,
        denoiser=remote,
        kind="remote",
    )
