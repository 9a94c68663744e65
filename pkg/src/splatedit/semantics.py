"""Language side of the scene: embedding compression, relevancy scoring,
text and box queries, and the distillation objective for per-Gaussian
embeddings.

Per-Gaussian embeddings live in a low-dimensional space chosen by a
mean-centered SVD over full-width vectors sampled from the source views.
Queries decode back to full width, score against the query text and a fixed
set of canonical distractor phrases, and return index selections stamped
with the scene revision so later edits can detect staleness.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError

CANONICAL_PHRASES = ("object", "things", "stuff", "texture")

# clusters holding less than this fraction of box candidates are outliers
BBOX_OUTLIER_RHO = 0.1
KMEANS_K = 3
KMEANS_ITERS = 50


class EmbeddingCodec:
    """Linear compressor between full-width and per-Gaussian embeddings.

    encode(v) = basis @ (v - mean); decode(c) = basis.T @ c + mean.  The
    basis rows are the leading right-singular vectors of the centered
    sample matrix, so reconstruction error matches principal-component
    analysis at the same width.
    """

    def __init__(self, mean: np.ndarray | None = None,
                 basis: np.ndarray | None = None):
        self.mean = None if mean is None else np.asarray(mean, np.float64)
        self.basis = None if basis is None else np.asarray(basis, np.float64)

    @property
    def fitted(self) -> bool:
        return self.basis is not None

    @property
    def dim(self) -> int:
        self._need_fit()
        return self.basis.shape[0]

    @property
    def full_dim(self) -> int:
        self._need_fit()
        return self.basis.shape[1]

    def _need_fit(self) -> None:
        if not self.fitted:
            raise InvalidStateError("codec is not fitted")

    @classmethod
    def fit(cls, samples: np.ndarray, dim: int) -> "EmbeddingCodec":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2:
            raise InvalidArgumentError("samples must be (N, C)")
        n, width = samples.shape
        if not 1 <= dim <= width:
            raise InvalidArgumentError(
                f"dim must be in [1, {width}], got {dim}")
        if n < dim:
            raise InvalidArgumentError(
                f"need at least {dim} samples to fit width {dim}, got {n}")
        mean = samples.mean(axis=0)
        _, _, vt = np.linalg.svd(samples - mean, full_matrices=False)
        basis = vt[:dim].copy()
        # canonical signs: largest-magnitude entry of each row positive
        lead = np.argmax(np.abs(basis), axis=1)
        signs = np.sign(basis[np.arange(dim), lead])
        signs[signs == 0] = 1.0
        return cls(mean=mean, basis=basis * signs[:, None])

    def encode(self, vectors: np.ndarray) -> np.ndarray:
        self._need_fit()
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.shape[-1] != self.full_dim:
            raise InvalidArgumentError(
                f"expected trailing dim {self.full_dim}, got {vectors.shape}")
        return (vectors - self.mean) @ self.basis.T

    def decode(self, codes: np.ndarray) -> np.ndarray:
        self._need_fit()
        codes = np.asarray(codes, dtype=np.float64)
        if codes.shape[-1] != self.dim:
            raise InvalidArgumentError(
                f"expected trailing dim {self.dim}, got {codes.shape}")
        return codes @ self.basis + self.mean

    def to_json(self) -> dict:
        self._need_fit()
        return {"mean": [float(v) for v in self.mean],
                "basis": [[float(v) for v in row] for row in self.basis]}

    @classmethod
    def from_json(cls, data: dict) -> "EmbeddingCodec":
        try:
            mean = np.asarray(data["mean"], dtype=np.float64)
            basis = np.asarray(data["basis"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"bad codec JSON: {exc}") from exc
        if basis.ndim != 2 or mean.shape != (basis.shape[1],):
            raise InvalidArgumentError("codec JSON shapes disagree")
        return cls(mean=mean, basis=basis)


def canonical_vectors(embedder) -> np.ndarray:
    """Full-width embeddings of the canonical distractor phrases, (4, C)."""
    return np.stack([embedder.embed_text(p) for p in CANONICAL_PHRASES])


def relevancy_score(vectors: np.ndarray, query: np.ndarray,
                    canon: np.ndarray) -> np.ndarray:
    """Worst-case softmax preference for the query over each distractor.

    vectors (..., C) are unit-normalized first (zero vectors score 0.5
    against everything); query (C,) and canon (K, C) are used as given.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    canon = np.atleast_2d(np.asarray(canon, dtype=np.float64))
    if vectors.shape[-1] != query.shape[-1] \
            or canon.shape[-1] != query.shape[-1]:
        raise InvalidArgumentError("embedding widths disagree")
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    unit = vectors / np.maximum(norms, 1e-12)
    dq = unit @ query                          # (...,)
    dc = unit @ canon.T                        # (..., K)
    m = np.maximum(dq[..., None], dc)
    eq = np.exp(dq[..., None] - m)
    ec = np.exp(dc - m)
    return (eq / (eq + ec)).min(axis=-1)


def gaussian_relevancy(scene, embedder, text: str):
    """Relevancy of each active Gaussian to the text.

    Returns (active_indices, scores).  Requires a fitted codec whose width
    matches the scene embeddings.
    """
    codec = scene.codec
    if codec is None or not codec.fitted:
        raise InvalidStateError("scene has no fitted embedding codec")
    if codec.dim != scene.embed_dim:
        raise InvalidStateError(
            f"codec width {codec.dim} != scene embedding width "
            f"{scene.embed_dim}")
    active = scene.active_indices()
    full = codec.decode(scene.embed[active].astype(np.float64))
    scores = relevancy_score(full, embedder.embed_text(text),
                             canonical_vectors(embedder))
    return active, scores


@dataclass(frozen=True, eq=False)
class Selection:
    """Sorted Gaussian indices bound to the scene revision they came from."""

    indices: np.ndarray
    revision: int
    origin: str = ""

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size and np.any(np.diff(idx) <= 0):
            idx = np.unique(idx)
        object.__setattr__(self, "indices", idx)

    @property
    def count(self) -> int:
        return int(self.indices.size)

    def to_json(self) -> dict:
        return {"indices": [int(i) for i in self.indices],
                "revision": int(self.revision), "origin": self.origin}

    @classmethod
    def from_json(cls, data: dict) -> "Selection":
        try:
            return cls(indices=np.asarray(data["indices"], dtype=np.int64),
                       revision=int(data["revision"]),
                       origin=str(data.get("origin", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"bad selection JSON: {exc}") from exc


def query_text(scene, embedder, text: str, *, tau: float = 0.5) -> Selection:
    """Select active Gaussians whose relevancy to the text exceeds tau."""
    active, scores = gaussian_relevancy(scene, embedder, text)
    return Selection(indices=active[scores > tau], revision=scene.revision,
                     origin=f"text:{text}")


def _kmeans(points: np.ndarray, k: int, iters: int, seed: int):
    """Seeded kmeans++ followed by Lloyd iterations; returns labels."""
    rng = np.random.default_rng(seed)
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            centers[j] = points[int(rng.integers(n))]
        else:
            centers[j] = points[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        moved = False
        for j in range(k):
            sel = labels == j
            if sel.any():
                c = points[sel].mean(axis=0)
                if not np.array_equal(c, centers[j]):
                    moved = True
                centers[j] = c
        if not moved:
            break
    return labels


def query_bbox(scene, camera, rect, *, k: int = KMEANS_K,
               rho: float = BBOX_OUTLIER_RHO, iters: int = KMEANS_ITERS,
               seed: int = 0) -> Selection:
    """Select active Gaussians whose centers project into a pixel rect.

    rect is (u0, v0, u1, v1) in pixels and must lie within the viewport.
    Candidates additionally need their camera-space depth inside the
    camera's near/far range, then are clustered by their compressed
    embeddings; clusters holding less than rho of the candidates are
    treated as stray background splats and dropped.  A rect covering
    nothing yields an empty selection.
    """
    rect = np.asarray(rect, dtype=np.float64).reshape(-1)
    if rect.shape != (4,):
        raise InvalidArgumentError("rect must be (u0, v0, u1, v1)")
    u0, v0, u1, v1 = rect
    if not (0.0 <= u0 < u1 <= camera.width
            and 0.0 <= v0 < v1 <= camera.height):
        raise InvalidArgumentError("rect must lie within the viewport")
    active = scene.active_indices()
    x = scene.x[active].astype(np.float64)
    cam_pts = x @ camera.R.T + camera.t
    z = cam_pts[:, 2]
    in_depth = (z > camera.z_near) & (z < camera.z_far)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * cam_pts[:, 0] / z + camera.cx
        v = camera.fy * cam_pts[:, 1] / z + camera.cy
    inside = in_depth & (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)
    candidates = active[inside]
    origin = "bbox"
    if candidates.size == 0:
        return Selection(indices=candidates, revision=scene.revision,
                         origin=origin)
    emb = scene.embed[candidates].astype(np.float64)
    k_eff = min(int(k), candidates.size)
    labels = _kmeans(emb, k_eff, int(iters), int(seed))
    counts = np.bincount(labels, minlength=k_eff)
    keep = counts >= rho * candidates.size
    if not keep.any():
        keep[np.argmax(counts)] = True
    return Selection(indices=candidates[keep[labels]],
                     revision=scene.revision, origin=origin)


def distill_loss(feature_img: np.ndarray, masks, codes: np.ndarray):
    """Sum-squared gap between rendered embeddings and per-region targets.

    Every mask pixel contributes against its region's code; overlapping
    masks accumulate.  Returns (loss, gradient wrt feature_img).
    """
    feature_img = np.asarray(feature_img, dtype=np.float64)
    if feature_img.ndim != 3:
        raise InvalidArgumentError("feature image must be (H, W, D)")
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if len(masks) != codes.shape[0]:
        raise InvalidArgumentError(
            f"{len(masks)} masks vs {codes.shape[0]} codes")
    if codes.size and codes.shape[1] != feature_img.shape[2]:
        raise InvalidArgumentError("code width does not match feature width")
    loss = 0.0
    grad = np.zeros_like(feature_img)
    for mask, code in zip(masks, codes):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != feature_img.shape[:2]:
            raise InvalidArgumentError("mask shape does not match features")
        diff = feature_img[mask] - code
        loss += float((diff ** 2).sum())
        grad[mask] += 2.0 * diff
    return loss, grad
