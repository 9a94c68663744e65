"""Deterministic stand-ins for the pretrained model stack.

Every mock is a pure function of its inputs (plus fixed hash-derived
constants), so outputs are byte-identical across runs and platforms.  They
are not learned models: each one reproduces just the structural behavior the
engine depends on (monotone relative depth, harmonic hole fill, color-blob
segmentation, color-anchored embeddings, target-seeking denoising).
"""
from __future__ import annotations

import hashlib

import numpy as np
from scipy import ndimage

from ..errors import InvalidArgumentError
from ..scene import check_image, check_mask
from .fill import fit_plane, harmonic_fill

FULL_EMBED_DIM = 512

# linear forward-diffusion schedule: signal fraction alpha_bar(t) = 1 - t/1000
DIFFUSION_STEPS = 1000
T_MIN = 20
T_MAX = 980

# color words the embedder anchors in its image/text shared space
COLOR_VOCAB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
}


def alpha_bar(t: int) -> float:
    if not T_MIN <= t <= T_MAX:
        raise InvalidArgumentError(
            f"diffusion step must be in [{T_MIN}, {T_MAX}], got {t}")
    return 1.0 - t / DIFFUSION_STEPS


def _hash_rng(tag: str) -> np.random.Generator:
    digest = hashlib.sha1(tag.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def hash_unit(tag: str, dim: int) -> np.ndarray:
    v = _hash_rng(tag).normal(size=dim)
    return v / np.linalg.norm(v)


def luminance(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return 0.2126 * img[:, :, 0] + 0.7152 * img[:, :, 1] + 0.0722 * img[:, :, 2]


class MockDepthEstimator:
    """Relative depth from luminance: brighter pixels are nearer.

    The output is only defined up to an affine map; metric scaling into the
    camera's depth range happens at lifting time.
    """

    def estimate_depth(self, image: np.ndarray) -> np.ndarray:
        check_image(image)
        return 2.0 - luminance(image)


class MockRgbInpainter:
    """Harmonic extension of the un-masked image into the masked region."""

    def inpaint_rgb(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        check_image(image)
        check_mask(mask, image.shape[:2])
        img = np.asarray(image, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return img.copy()
        if mask.all():
            raise InvalidArgumentError("mask covers the whole image")
        out = np.empty_like(img)
        for c in range(3):
            out[:, :, c] = harmonic_fill(img[:, :, c], ~mask)
        return out


class MockDepthInpainter:
    """Plane-plus-harmonic-residual completion that never touches known
    pixels.

    A least-squares plane over the known region carries the dominant depth
    gradient into the hole (a half-known linear ramp continues exactly); the
    residual is filled harmonically so the seam stays smooth.
    """

    def inpaint_depth(self, depth: np.ndarray, fixed_mask: np.ndarray,
                      rgb_guide: np.ndarray | None = None) -> np.ndarray:
        depth = np.asarray(depth, dtype=np.float64)
        if depth.ndim != 2:
            raise InvalidArgumentError("depth must be (H, W)")
        check_mask(fixed_mask, depth.shape)
        fixed = np.asarray(fixed_mask, dtype=bool)
        if not fixed.any():
            raise InvalidArgumentError("fixed_mask anchors nothing")
        if fixed.all():
            return depth.copy()
        plane = fit_plane(depth, fixed)
        residual = np.where(fixed, depth - plane, 0.0)
        filled = harmonic_fill(residual, fixed, init=0.0)
        out = plane + filled
        out[fixed] = depth[fixed]
        return out


class MockSegmenter:
    """Connected components of the color-quantized image.

    Pixels are binned to `levels` values per channel; each 4-connected
    component of a constant quantized color larger than min_area becomes one
    mask.  Masks are disjoint and ordered by their first pixel in row-major
    order.
    """

    def __init__(self, levels: int = 8, min_area: int = 8):
        self.levels = int(levels)
        self.min_area = int(min_area)

    def segment(self, image: np.ndarray) -> list[np.ndarray]:
        check_image(image)
        img = np.asarray(image, dtype=np.float64)
        q = np.clip((img * self.levels).astype(np.int64), 0, self.levels - 1)
        flat = (q[:, :, 0] * self.levels + q[:, :, 1]) * self.levels \
            + q[:, :, 2]
        four = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        masks = []
        for color in np.unique(flat):
            labels, count = ndimage.label(flat == color, structure=four)
            for k in range(1, count + 1):
                m = labels == k
                if int(m.sum()) >= self.min_area:
                    masks.append(m)
        masks.sort(key=lambda m: int(np.flatnonzero(m.ravel())[0]))
        return masks


class MockEmbedder:
    """Shared text/image embedding space anchored on color words.

    Images embed by the mean color of the masked region projected onto three
    fixed random-basis axes; text embeds the same way when it contains a
    color word, and as a content-hashed random unit vector otherwise.  The
    shared anchors give the cross-modal and cross-view consistency the
    query pipeline needs, while unrelated texts stay near-orthogonal.
    """

    def __init__(self, dim: int = FULL_EMBED_DIM):
        if dim < 8:
            raise InvalidArgumentError("embedding dim too small")
        self.dim = int(dim)
        self._axes = np.stack([
            hash_unit(f"color-axis:{name}:{self.dim}", self.dim)
            for name in ("r", "g", "b")
        ])

    def _color_vector(self, rgb) -> np.ndarray:
        c = (np.asarray(rgb, dtype=np.float64) + 0.05) / 1.05
        v = c @ self._axes
        return v / np.linalg.norm(v)

    def embed_image(self, image: np.ndarray,
                    mask: np.ndarray | None = None) -> np.ndarray:
        check_image(image)
        img = np.asarray(image, dtype=np.float64)
        if mask is None:
            mean = img.reshape(-1, 3).mean(axis=0)
        else:
            check_mask(mask, img.shape[:2])
            mask = np.asarray(mask, dtype=bool)
            if not mask.any():
                raise InvalidArgumentError("empty mask has no content")
            mean = img[mask].mean(axis=0)
        return self._color_vector(mean)

    def embed_text(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise InvalidArgumentError("text must be a non-empty string")
        words = [w.strip(".,!?;:()[]\"'") for w in text.lower().split()]
        anchors = [COLOR_VOCAB[w] for w in words if w in COLOR_VOCAB]
        if anchors:
            return self._color_vector(np.mean(anchors, axis=0))
        return hash_unit(f"text:{self.dim}:{text}", self.dim)


class MockDenoiser:
    """Target-seeking noise predictor.

    For a registered prompt target Z the prediction is the exact noise that
    explains x_t as a diffusion of Z, so distillation descends toward Z.
    Prompts without a registered target seek flat mid-gray.  The guidance
    scale is accepted for interface parity; the closed form is already fully
    conditioned on the prompt.
    """

    def __init__(self):
        self._targets: dict[str, np.ndarray] = {}

    def set_target(self, prompt: str, image: np.ndarray) -> None:
        check_image(image)
        self._targets[prompt] = np.asarray(image, dtype=np.float64).copy()

    def target_for(self, prompt: str, shape) -> np.ndarray:
        z = self._targets.get(prompt)
        if z is None:
            return np.full(shape, 0.5)
        if z.shape != tuple(shape):
            raise InvalidArgumentError(
                f"target for {prompt!r} has shape {z.shape}, need {tuple(shape)}")
        return z

    def denoise(self, image: np.ndarray, t: int, prompt: str,
                cfg_scale: float = 5.0) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise InvalidArgumentError("denoise expects an (H, W, 3) image")
        ab = alpha_bar(int(t))
        z = self.target_for(prompt, img.shape)
        return (img - np.sqrt(ab) * z) / np.sqrt(1.0 - ab)
