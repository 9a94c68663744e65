"""Projection of 3D Gaussians to screen-space splats, shared by both kernels.

The EWA splatting approximation: with t = W x + b the camera-frame center
(W the world-to-camera rotation), the perspective Jacobian at t is

    J = [[fx/tz, 0, -fx*tx/tz^2],
         [0, fy/tz, -fy*ty/tz^2]]

and the screen covariance is V = (J W) Sigma (J W)^T + blur * I, with a fixed
blur of 0.3 px^2 that keeps V positive definite and splats at least roughly a
pixel wide.  A splat is culled iff its center depth leaves (z_near, z_far) or
the 3 sigma bounding box misses the viewport.  Contributions are cut at the
3 sigma ellipse (Mahalanobis q2 > 9), which makes the tiled result independent
of tile size and lets a brute-force reference reproduce it exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError, RenderError
from ..geometry import quats_to_rots
from ..scene import Camera, GaussianScene

TILE = 16
BLUR = 0.3          # screen-space variance floor, px^2
CUTOFF_Q2 = 9.0     # 3 sigma ellipse
ALPHA_CLAMP = 0.99
MIN_ALPHA = 1.0 / 255.0
T_STOP = 1e-6       # transmittance below which a pixel stops compositing
DEPTH_EPS = 1e-6    # accumulated alpha below which depth stays 0

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Real SH basis values for unit directions, shape (M, (degree+1)^2)."""
    m = dirs.shape[0]
    nb = (degree + 1) ** 2
    out = np.empty((m, nb))
    out[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[:, 4] = SH_C2[0] * xy
        out[:, 5] = SH_C2[1] * yz
        out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * xz
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = SH_C3[1] * xy * z
        out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_sh_colors(degree: int, sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Colors from flat (M, 3*(degree+1)^2) coefficients; 0.5 offset, no clamp."""
    basis = sh_basis(degree, dirs)
    coeff = sh.reshape(sh.shape[0], -1, 3)
    return np.einsum("mb,mbc->mc", basis, coeff) + 0.5


@dataclass
class PreparedSplats:
    """Screen-space splats, depth sorted, plus the tile index."""

    idx: np.ndarray       # (M,) absolute scene index per splat
    mean2d: np.ndarray    # (M, 2)
    conic: np.ndarray     # (M, 3) inverse covariance packed (A, B, C)
    cov2d: np.ndarray     # (M, 3) covariance packed, blur included
    z: np.ndarray         # (M,) camera depth
    opa: np.ndarray       # (M,)
    color: np.ndarray     # (M, 3)
    feat: np.ndarray      # (M, d)
    radius: np.ndarray    # (M,)
    bbox: np.ndarray      # (M, 4) int64 inclusive pixel bounds x0, x1, y0, y1
    tvec: np.ndarray      # (M, 3) camera-frame centers
    sh_basis: np.ndarray  # (M, n_basis) for the color backward
    entry_splat: np.ndarray  # (K,) int64 sorted positions, grouped by tile
    tile_ranges: np.ndarray  # (n_tiles + 1,) int64
    tile_size: int
    width: int
    height: int

    @property
    def count(self) -> int:
        return self.idx.shape[0]


def _validate_finite(scene: GaussianScene, active: np.ndarray) -> None:
    for name in ("x", "scale", "q", "alpha", "sh", "embed"):
        arr = getattr(scene, name)[active]
        bad = ~np.isfinite(arr)
        if bad.any():
            where = np.nonzero(bad.reshape(arr.shape[0], -1).any(axis=1))[0][0]
            raise RenderError(
                f"non-finite {name} on gaussian {int(active[where])}",
                gaussian_index=int(active[where]),
            )


def prepare(scene: GaussianScene, camera: Camera, *, tile_size: int = TILE,
            feature_override: np.ndarray | None = None) -> PreparedSplats:
    """Project active Gaussians and build the depth-sorted tile index.

    feature_override replaces the per-Gaussian embedding as the composited
    feature (row count must match the scene); used for score heatmaps and
    object id planes.
    """
    if tile_size < 1:
        raise InvalidArgumentError("tile_size must be >= 1")
    active = scene.active_indices()
    _validate_finite(scene, active)

    feats_full = scene.embed if feature_override is None else np.asarray(
        feature_override, dtype=np.float64)
    if feature_override is not None:
        if feats_full.ndim != 2 or feats_full.shape[0] != scene.n:
            raise InvalidArgumentError(
                f"feature_override must be (N, k) with N={scene.n}")
        if not np.all(np.isfinite(feats_full)):
            raise InvalidArgumentError("feature_override has non-finite values")

    x = scene.x[active].astype(np.float64)
    W = camera.R
    t = x @ W.T + camera.t
    tz = t[:, 2]
    infr = (tz > camera.z_near) & (tz < camera.z_far)

    active = active[infr]
    x, t, tz = x[infr], t[infr], tz[infr]
    tx, ty = t[:, 0], t[:, 1]
    fx, fy = camera.fx, camera.fy

    u = fx * tx / tz + camera.cx
    v = fy * ty / tz + camera.cy

    # Screen covariance: V = (J W) Sigma (J W)^T + BLUR I.
    sigma = _batch_cov3d(scene.scale[active].astype(np.float64),
                         scene.q[active].astype(np.float64))
    J = np.zeros((x.shape[0], 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / tz**2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / tz**2
    JW = J @ W
    V = np.einsum("nij,njk,nlk->nil", JW, sigma, JW)
    a = V[:, 0, 0] + BLUR
    b = V[:, 0, 1]
    c = V[:, 1, 1] + BLUR

    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)

    x0 = np.ceil(u - radius)
    x1 = np.floor(u + radius)
    y0 = np.ceil(v - radius)
    y1 = np.floor(v + radius)
    x0 = np.clip(x0, 0, camera.width - 1)
    x1 = np.clip(x1, 0, camera.width - 1)
    y0 = np.clip(y0, 0, camera.height - 1)
    y1 = np.clip(y1, 0, camera.height - 1)
    onscreen = (u + radius >= 0) & (u - radius <= camera.width - 1) \
        & (v + radius >= 0) & (v - radius <= camera.height - 1)

    keep = onscreen
    active = active[keep]
    m = active.shape[0]
    u, v, tz, t = u[keep], v[keep], tz[keep], t[keep]
    a, b, c, det, radius = a[keep], b[keep], c[keep], det[keep], radius[keep]
    bbox = np.stack([x0[keep], x1[keep], y0[keep], y1[keep]], axis=1).astype(np.int64)

    conic = np.stack([c / det, -b / det, a / det], axis=1)
    cov2d = np.stack([a, b, c], axis=1)

    dirs = x[keep] - camera.center
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.divide(dirs, norms, out=np.zeros_like(dirs), where=norms > 0)
    basis = sh_basis(scene.sh_degree, dirs)
    coeff = scene.sh[active].astype(np.float64).reshape(
        m, scene.sh_coeffs // 3, 3)
    color = np.einsum("mb,mbc->mc", basis, coeff) + 0.5

    # Front-to-back order with ties broken by scene index.
    order = np.lexsort((active, tz))
    active = active[order]
    mean2d = np.stack([u, v], axis=1)[order]
    conic = np.ascontiguousarray(conic[order])
    cov2d = np.ascontiguousarray(cov2d[order])
    z = np.ascontiguousarray(tz[order])
    opa = scene.alpha[active].astype(np.float64)
    color = np.ascontiguousarray(color[order])
    feat = np.ascontiguousarray(feats_full[active].astype(np.float64))
    radius = radius[order]
    bbox = np.ascontiguousarray(bbox[order])
    tvec = np.ascontiguousarray(t[order])
    basis = np.ascontiguousarray(basis[order])
    mean2d = np.ascontiguousarray(mean2d)

    entry_splat, tile_ranges = _build_tiles(bbox, tile_size,
                                            camera.width, camera.height)
    return PreparedSplats(
        idx=active, mean2d=mean2d, conic=conic, cov2d=cov2d, z=z, opa=opa,
        color=color, feat=feat, radius=radius, bbox=bbox, tvec=tvec,
        sh_basis=basis, entry_splat=entry_splat, tile_ranges=tile_ranges,
        tile_size=tile_size, width=camera.width, height=camera.height,
    )


def _batch_cov3d(scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    R = quats_to_rots(quats)
    return np.einsum("nij,nj,nkj->nik", R, scales**2, R)


def _build_tiles(bbox: np.ndarray, tile: int, width: int, height: int):
    m = bbox.shape[0]
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    if m == 0:
        return (np.zeros(0, dtype=np.int64),
                np.zeros(n_tiles + 1, dtype=np.int64))
    tx0 = bbox[:, 0] // tile
    tx1 = bbox[:, 1] // tile
    ty0 = bbox[:, 2] // tile
    ty1 = bbox[:, 3] // tile
    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    total = int(counts.sum())
    splat_of = np.repeat(np.arange(m, dtype=np.int64), counts)
    # Per-entry tile coordinates, enumerated row-major inside each bbox.
    offsets = np.concatenate([[0], np.cumsum(counts)])[:-1]
    local = np.arange(total, dtype=np.int64) - np.repeat(offsets, counts)
    w_tiles = np.repeat(tx1 - tx0 + 1, counts)
    lty = local // w_tiles
    ltx = local - lty * w_tiles
    tile_id = (np.repeat(ty0, counts) + lty) * tiles_x + np.repeat(tx0, counts) + ltx
    order = np.lexsort((splat_of, tile_id))
    entry_splat = splat_of[order]
    tile_sorted = tile_id[order]
    tile_ranges = np.searchsorted(tile_sorted, np.arange(n_tiles + 1)).astype(np.int64)
    return entry_splat, tile_ranges


# ---------------------------------------------------------------------------
# Geometry backward: chain per-splat screen gradients to parameter gradients.
# ---------------------------------------------------------------------------

def geometry_backward(scene: GaussianScene, camera: Camera, prep: PreparedSplats,
                      g_mean2d, g_conic, g_z, g_opa, g_color, g_feat,
                      *, feature_override: bool = False):
    """Map splat-space gradients back to parameter arrays.

    Inputs are per sorted splat; returns dict of full-size (N, ...) float64
    arrays with zeros for culled or inactive Gaussians.  When the feature
    plane was overridden the embedding gradient is zeroed.
    """
    n = scene.n
    m = prep.count
    out = {
        "x": np.zeros((n, 3)),
        "scale": np.zeros((n, 3)),
        "q": np.zeros((n, 4)),
        "alpha": np.zeros((n,)),
        "sh": np.zeros((n, scene.sh_coeffs)),
        "embed": np.zeros((n, scene.embed_dim)),
    }
    if m == 0:
        return out

    W = camera.R
    fx, fy = camera.fx, camera.fy
    tx, ty, tz = prep.tvec[:, 0], prep.tvec[:, 1], prep.tvec[:, 2]

    # conic = inv(V): dL/dV = -C G C with both symmetric.
    A, B, C = prep.conic[:, 0], prep.conic[:, 1], prep.conic[:, 2]
    Cm = np.empty((m, 2, 2))
    Cm[:, 0, 0] = A
    Cm[:, 0, 1] = Cm[:, 1, 0] = B
    Cm[:, 1, 1] = C
    G = np.empty((m, 2, 2))
    G[:, 0, 0] = g_conic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * g_conic[:, 1]
    G[:, 1, 1] = g_conic[:, 2]
    GV = -np.einsum("nij,njk,nkl->nil", Cm, G, Cm)

    # V = JW Sigma JW^T + blur I.
    quats = scene.q[prep.idx].astype(np.float64)
    scales = scene.scale[prep.idx].astype(np.float64)
    R3 = quats_to_rots(quats)
    sigma = np.einsum("nij,nj,nkj->nik", R3, scales**2, R3)
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / tz**2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / tz**2
    JW = J @ W

    g_sigma = np.einsum("nji,njk,nkl->nil", JW, GV, JW)
    g_JW = 2.0 * np.einsum("nij,njk,nkl->nil", GV, JW, sigma)
    g_J = g_JW @ W.T

    # t gradients: projection, Jacobian entries, and the depth plane.
    g_t = np.zeros((m, 3))
    g_t[:, 0] = g_mean2d[:, 0] * fx / tz + g_J[:, 0, 2] * (-fx / tz**2)
    g_t[:, 1] = g_mean2d[:, 1] * fy / tz + g_J[:, 1, 2] * (-fy / tz**2)
    g_t[:, 2] = (
        g_mean2d[:, 0] * (-fx * tx / tz**2)
        + g_mean2d[:, 1] * (-fy * ty / tz**2)
        + g_J[:, 0, 0] * (-fx / tz**2)
        + g_J[:, 1, 1] * (-fy / tz**2)
        + g_J[:, 0, 2] * (2.0 * fx * tx / tz**3)
        + g_J[:, 1, 2] * (2.0 * fy * ty / tz**3)
        + g_z
    )
    g_x = g_t @ W

    # Sigma = R D R^T with D = diag(s^2).
    RtAR = np.einsum("nji,njk,nkl->nil", R3, g_sigma, R3)
    g_scale = 2.0 * scales * np.einsum("nii->ni", RtAR)
    g_R = 2.0 * np.einsum("nij,njk,nk->nik", g_sigma, R3, scales**2)

    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    qh = quats / norms
    w, xq, yq, zq = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    zero = np.zeros(m)
    dRdq = np.empty((4, m, 3, 3))
    dRdq[0] = 2.0 * np.stack([
        np.stack([zero, -zq, yq], axis=1),
        np.stack([zq, zero, -xq], axis=1),
        np.stack([-yq, xq, zero], axis=1),
    ], axis=1)
    dRdq[1] = 2.0 * np.stack([
        np.stack([zero, yq, zq], axis=1),
        np.stack([yq, -2 * xq, -w], axis=1),
        np.stack([zq, w, -2 * xq], axis=1),
    ], axis=1)
    dRdq[2] = 2.0 * np.stack([
        np.stack([-2 * yq, xq, w], axis=1),
        np.stack([xq, zero, zq], axis=1),
        np.stack([-w, zq, -2 * yq], axis=1),
    ], axis=1)
    dRdq[3] = 2.0 * np.stack([
        np.stack([-2 * zq, -w, xq], axis=1),
        np.stack([w, -2 * zq, yq], axis=1),
        np.stack([xq, yq, zero], axis=1),
    ], axis=1)
    g_qh = np.einsum("nij,knij->nk", g_R, dRdq)
    # Through the normalization q_hat = q / |q|.
    g_q = (g_qh - qh * np.sum(g_qh * qh, axis=1, keepdims=True)) / norms

    g_sh = (prep.sh_basis[:, :, None] * g_color[:, None, :]).reshape(m, -1)

    np.add.at(out["x"], prep.idx, g_x)
    np.add.at(out["scale"], prep.idx, g_scale)
    np.add.at(out["q"], prep.idx, g_q)
    np.add.at(out["alpha"], prep.idx, g_opa)
    np.add.at(out["sh"], prep.idx, g_sh)
    if not feature_override:
        np.add.at(out["embed"], prep.idx, g_feat)
    return out
