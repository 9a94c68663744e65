"""HTTP client for an externally hosted prior-model server.

Protocol: POST {base}/v1/{capability} with JSON bodies; arrays travel as
base64-encoded little-endian float32 with an explicit shape.  Requests are
bounded by an in-flight semaphore, time out after `timeout` seconds, and are
retried once before raising a backend error naming the capability.
"""
from __future__ import annotations

import base64
import threading

import numpy as np
import requests

from ..errors import BackendError, InvalidArgumentError


def encode_plane(arr) -> dict:
    a = np.asarray(arr, dtype=np.float32)
    return {"shape": list(a.shape),
            "data": base64.b64encode(
                np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")}


def decode_plane(obj) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"malformed plane payload: {exc}") from exc
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != count * 4:
        raise InvalidArgumentError(
            f"plane payload length {len(raw)} != 4*{count}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


class RemoteBackend:
    """All prior capabilities served by one /v1 JSON endpoint set."""

    def __init__(self, base_url: str, *, timeout: float = 30.0,
                 max_inflight: int = 4, embed_dim: int = 512,
                 session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = float(timeout)
        self.dim = int(embed_dim)
        self._gate = threading.Semaphore(int(max_inflight))
        self._session = session or requests.Session()

    def _post(self, capability: str, payload: dict) -> dict:
        url = f"{self.base_url}/v1/{capability}"
        last = None
        for _ in range(2):  # one retry
            with self._gate:
                try:
                    resp = self._session.post(url, json=payload,
                                              timeout=self.timeout)
                except requests.RequestException as exc:
                    last = str(exc)
                    continue
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError as exc:
                    last = f"bad JSON body: {exc}"
                    continue
            last = f"HTTP {resp.status_code}: {resp.text[:200]}"
        raise BackendError(f"{capability} failed after retry: {last}",
                           capability=capability, backend="remote")

    def estimate_depth(self, image):
        out = self._post("depth", {"image": encode_plane(image)})
        return decode_plane(out["depth"])

    def inpaint_rgb(self, image, mask):
        out = self._post("inpaint_rgb", {
            "image": encode_plane(image),
            "mask": encode_plane(np.asarray(mask, dtype=np.float32)),
        })
        return decode_plane(out["image"])

    def inpaint_depth(self, depth, fixed_mask, rgb_guide=None):
        payload = {
            "depth": encode_plane(depth),
            "fixed_mask": encode_plane(np.asarray(fixed_mask, dtype=np.float32)),
        }
        if rgb_guide is not None:
            payload["rgb_guide"] = encode_plane(rgb_guide)
        out = self._post("inpaint_depth", payload)
        return decode_plane(out["depth"])

    def segment(self, image):
        out = self._post("segment", {"image": encode_plane(image)})
        return [decode_plane(m) > 0.5 for m in out["masks"]]

    def embed_image(self, image, mask=None):
        payload = {"image": encode_plane(image)}
        if mask is not None:
            payload["mask"] = encode_plane(np.asarray(mask, dtype=np.float32))
        out = self._post("embed_image", payload)
        return decode_plane(out["vector"])

    def embed_text(self, text):
        out = self._post("embed_text", {"text": str(text)})
        return decode_plane(out["vector"])

    def denoise(self, image, t, prompt, cfg_scale=5.0):
        out = self._post("denoise", {
            "image": encode_plane(image), "t": int(t),
            "prompt": str(prompt), "cfg_scale": float(cfg_scale),
        })
        return decode_plane(out["image"])
