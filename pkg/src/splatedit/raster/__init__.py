"""Differentiable tiled rasterizer for 3D Gaussian scenes.

`rasterize` renders color, depth, alpha and a composited feature plane in one
pass.  `RenderContext` adds the analytic backward pass used for training.
`rasterize_reference` is a deliberately slow, independently coded renderer
kept as a correctness oracle for the fast path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._backend import active_backend
from ..errors import BehindCameraError, InvalidArgumentError, InvalidStateError
from ..geometry import covariance_3d
from ..scene import Camera, GaussianScene
from .prepare import (ALPHA_CLAMP, BLUR, CUTOFF_Q2, DEPTH_EPS, MIN_ALPHA,
                      T_STOP, PreparedSplats, geometry_backward, prepare,
                      sh_basis)

__all__ = [
    "ParamGrads",
    "RenderContext",
    "RenderOutput",
    "Splat2D",
    "UpstreamGrads",
    "project_gaussian",
    "rasterize",
    "rasterize_reference",
]


@dataclass
class RenderOutput:
    """Images from one render, all float64.

    rgb is background-composited, depth is the alpha-normalized expected view
    depth (zero where nothing was hit), alpha is total coverage in [0, 1] and
    feature is the unnormalized alpha-weighted feature accumulation.
    """

    rgb: np.ndarray      # (H, W, 3)
    depth: np.ndarray    # (H, W)
    alpha: np.ndarray    # (H, W)
    feature: np.ndarray  # (H, W, d)


@dataclass
class UpstreamGrads:
    """Loss gradients with respect to the render outputs; None means zero."""

    rgb: np.ndarray | None = None
    depth: np.ndarray | None = None
    alpha: np.ndarray | None = None
    feature: np.ndarray | None = None


@dataclass
class ParamGrads:
    """Loss gradients per Gaussian parameter array, full scene size."""

    x: np.ndarray      # (N, 3)
    scale: np.ndarray  # (N, 3)
    q: np.ndarray      # (N, 4)
    alpha: np.ndarray  # (N,)
    sh: np.ndarray     # (N, sh_coeffs)
    embed: np.ndarray  # (N, d)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"x": self.x, "scale": self.scale, "q": self.q,
                "alpha": self.alpha, "sh": self.sh, "embed": self.embed}


@dataclass(frozen=True)
class Splat2D:
    """Screen-space footprint of one Gaussian under a camera."""

    mean2d: np.ndarray  # (2,) pixel center
    cov2d: np.ndarray   # (2, 2) screen covariance, blur included
    conic: np.ndarray   # (3,) packed inverse covariance (a, b, c)
    depth: float
    radius: float       # 3 sigma in pixels


def _as_override(feature_override, n):
    if feature_override is None:
        return None
    arr = np.asarray(feature_override, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != n:
        raise InvalidArgumentError(
            f"feature_override must have one row per Gaussian ({n})")
    return arr


def _run_forward(prep: PreparedSplats):
    h, w = prep.height, prep.width
    d = prep.feat.shape[1]
    rgb = np.zeros((h, w, 3))
    sz = np.zeros((h, w))
    tfin = np.ones((h, w))
    featimg = np.zeros((h, w, d))
    last_pos = np.full((h, w), -1, dtype=np.int64)
    if prep.count:
        if active_backend() == "numba":
            from ._composite_numba import forward_kernel
            forward_kernel(prep.mean2d, prep.conic, prep.z, prep.opa,
                           prep.color, prep.feat, prep.entry_splat,
                           prep.tile_ranges, prep.tile_size, h, w,
                           rgb, sz, tfin, featimg, last_pos)
        else:
            from ._composite_numpy import forward_kernel
            forward_kernel(prep.mean2d, prep.conic, prep.z, prep.opa,
                           prep.color, prep.feat, prep.bbox, h, w,
                           rgb, sz, tfin, featimg, last_pos)
    return rgb, sz, tfin, featimg, last_pos


def _finalize(rgb, sz, tfin, featimg, background):
    cover = 1.0 - tfin
    rgb = rgb + tfin[:, :, None] * background
    hit = cover > DEPTH_EPS
    depth = np.where(hit, sz / np.where(hit, cover, 1.0), 0.0)
    return RenderOutput(rgb=rgb, depth=depth, alpha=cover, feature=featimg)


class RenderContext:
    """One differentiable render: forward() then backward(upstream).

    The context pins the scene revision at forward time; a backward call
    after the scene changed raises InvalidStateError instead of silently
    producing gradients for stale geometry.
    """

    def __init__(self, scene: GaussianScene, camera: Camera, *,
                 tile_size: int = 16, feature_override=None):
        self.scene = scene
        self.camera = camera
        self.tile_size = tile_size
        self._override = _as_override(feature_override, scene.n)
        self._cache = None

    def forward(self) -> RenderOutput:
        prep = prepare(self.scene, self.camera, tile_size=self.tile_size,
                       feature_override=self._override)
        rgb, sz, tfin, featimg, last_pos = _run_forward(prep)
        out = _finalize(rgb, sz, tfin, featimg, self.scene.background)
        self._cache = {
            "prep": prep, "sz": sz, "tfin": tfin, "last_pos": last_pos,
            "bg": np.array(self.scene.background, dtype=np.float64),
            "revision": self.scene.revision,
        }
        return out

    def backward(self, upstream: UpstreamGrads) -> ParamGrads:
        if self._cache is None:
            raise InvalidStateError("backward() before forward()")
        cache = self._cache
        if self.scene.revision != cache["revision"]:
            raise InvalidStateError(
                f"scene revision changed since forward "
                f"({cache['revision']} -> {self.scene.revision})")
        prep: PreparedSplats = cache["prep"]
        h, w = prep.height, prep.width
        d = prep.feat.shape[1]
        g_rgb = self._upstream_image(upstream.rgb, (h, w, 3), "rgb")
        g_depth = self._upstream_image(upstream.depth, (h, w), "depth")
        g_alpha = self._upstream_image(upstream.alpha, (h, w), "alpha")
        g_feat = self._upstream_image(upstream.feature, (h, w, d), "feature")

        tfin = cache["tfin"]
        sz = cache["sz"]
        cover = 1.0 - tfin
        hit = cover > DEPTH_EPS
        safe = np.where(hit, cover, 1.0)
        # depth = sz / cover, so the loss reaches sz and (through cover) tfin
        dldsz = np.where(hit, g_depth / safe, 0.0)
        dldtfin = (np.einsum("yxc,c->yx", g_rgb, cache["bg"]) - g_alpha
                   + dldsz * sz / safe)

        m = prep.count
        gm2 = np.zeros((m, 2))
        gconic = np.zeros((m, 3))
        gz = np.zeros((m,))
        gopa = np.zeros((m,))
        gcol = np.zeros((m, 3))
        gfeat = np.zeros((m, d))
        if m:
            if active_backend() == "numba":
                from ._composite_numba import backward_kernel
                backward_kernel(prep.mean2d, prep.conic, prep.z, prep.opa,
                                prep.color, prep.feat, prep.entry_splat,
                                prep.tile_ranges, prep.tile_size, h, w,
                                g_rgb, g_feat, dldsz, dldtfin, tfin,
                                cache["last_pos"], gm2, gconic, gz, gopa,
                                gcol, gfeat)
            else:
                from ._composite_numpy import backward_kernel
                backward_kernel(prep.mean2d, prep.conic, prep.z, prep.opa,
                                prep.color, prep.feat, prep.bbox, h, w,
                                g_rgb, g_feat, dldsz, dldtfin, tfin,
                                cache["last_pos"], gm2, gconic, gz, gopa,
                                gcol, gfeat)
        grads = geometry_backward(self.scene, self.camera, prep, gm2, gconic,
                                  gz, gopa, gcol, gfeat,
                                  feature_override=self._override is not None)
        return ParamGrads(**grads)

    @staticmethod
    def _upstream_image(arr, shape, name):
        if arr is None:
            return np.zeros(shape)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.shape != shape:
            raise InvalidArgumentError(
                f"upstream {name} gradient must have shape {shape}, "
                f"got {arr.shape}")
        return arr


def rasterize(scene: GaussianScene, camera: Camera, *, tile_size: int = 16,
              feature_override=None) -> RenderOutput:
    """Render the scene from a camera; see RenderOutput for the planes."""
    return RenderContext(scene, camera, tile_size=tile_size,
                         feature_override=feature_override).forward()


def project_gaussian(camera: Camera, x, scale, q) -> Splat2D:
    """Screen-space mean, covariance and extent of a single Gaussian."""
    x = np.asarray(x, dtype=np.float64)
    t = camera.R @ x + camera.t
    if t[2] <= 0.0:
        raise BehindCameraError(f"gaussian at camera depth {t[2]:.6g}")
    cov = covariance_3d(scale, q)
    fx, fy = camera.fx, camera.fy
    tx, ty, tz = t
    J = np.array([
        [fx / tz, 0.0, -fx * tx / (tz * tz)],
        [0.0, fy / tz, -fy * ty / (tz * tz)],
    ])
    JW = J @ camera.R
    V = JW @ cov @ JW.T + BLUR * np.eye(2)
    det = V[0, 0] * V[1, 1] - V[0, 1] * V[1, 0]
    conic = np.array([V[1, 1], -V[0, 1], V[0, 0]]) / det
    mid = 0.5 * (V[0, 0] + V[1, 1])
    lam = mid + np.sqrt(max(mid * mid - det, 0.0))
    mean2d = np.array([camera.fx * tx / tz + camera.cx,
                       camera.fy * ty / tz + camera.cy])
    return Splat2D(mean2d=mean2d, cov2d=V, conic=conic, depth=float(tz),
                   radius=float(3.0 * np.sqrt(lam)))


def _reference_rotation(q):
    w, xq, yq, zq = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (yq * yq + zq * zq), 2 * (xq * yq - w * zq), 2 * (xq * zq + w * yq)],
        [2 * (xq * yq + w * zq), 1 - 2 * (xq * xq + zq * zq), 2 * (yq * zq - w * xq)],
        [2 * (xq * zq - w * yq), 2 * (yq * zq + w * xq), 1 - 2 * (xq * xq + yq * yq)],
    ])


def _reference_sh(degree, direction):
    """Real spherical harmonic basis for one unit direction, bands 0..3."""
    dx, dy, dz = direction
    vals = [0.28209479177387814]
    if degree >= 1:
        vals += [-0.4886025119029199 * dy,
                 0.4886025119029199 * dz,
                 -0.4886025119029199 * dx]
    if degree >= 2:
        vals += [1.0925484305920792 * dx * dy,
                 -1.0925484305920792 * dy * dz,
                 0.31539156525252005 * (2 * dz * dz - dx * dx - dy * dy),
                 -1.0925484305920792 * dx * dz,
                 0.5462742152960396 * (dx * dx - dy * dy)]
    if degree >= 3:
        vals += [-0.5900435899266435 * dy * (3 * dx * dx - dy * dy),
                 2.890611442640554 * dx * dy * dz,
                 -0.4570457994644658 * dy * (4 * dz * dz - dx * dx - dy * dy),
                 0.3731763325901154 * dz * (2 * dz * dz - 3 * dx * dx - 3 * dy * dy),
                 -0.4570457994644658 * dx * (4 * dz * dz - dx * dx - dy * dy),
                 1.445305721320277 * dz * (dx * dx - dy * dy),
                 -0.5900435899266435 * dx * (dx * dx - 3 * dy * dy)]
    return np.array(vals)


def rasterize_reference(scene: GaussianScene, camera: Camera, *,
                        feature_override=None) -> RenderOutput:
    """Brute-force renderer sharing no projection or tiling code with the
    fast path.  Per Gaussian it evaluates the full image; compositing order
    and skip rules match the production contract exactly."""
    override = _as_override(feature_override, scene.n)
    h, w = camera.height, camera.width
    rgb = np.zeros((h, w, 3))
    sz = np.zeros((h, w))
    trans = np.ones((h, w))
    active = [i for i in range(scene.n) if scene.active[i]]
    d = override.shape[1] if override is not None else scene.embed_dim
    featimg = np.zeros((h, w, d))

    splats = []
    for i in active:
        x = scene.x[i].astype(np.float64)
        t = camera.R @ x + camera.t
        if not (camera.z_near < t[2] < camera.z_far):
            continue
        R = _reference_rotation(scene.q[i])
        s = scene.scale[i].astype(np.float64)
        cov = R @ np.diag(s * s) @ R.T
        fx, fy = camera.fx, camera.fy
        tx, ty, tz = t
        J = np.array([
            [fx / tz, 0.0, -fx * tx / (tz * tz)],
            [0.0, fy / tz, -fy * ty / (tz * tz)],
        ])
        JW = J @ camera.R
        V = JW @ cov @ JW.T + BLUR * np.eye(2)
        mean = np.array([fx * tx / tz + camera.cx, fy * ty / tz + camera.cy])
        view = x - camera.center
        view = view / np.linalg.norm(view)
        basis = _reference_sh(scene.sh_degree, view)
        coeff = scene.sh[i].astype(np.float64).reshape(-1, 3)
        color = coeff.T @ basis + 0.5
        feat = override[i] if override is not None \
            else scene.embed[i].astype(np.float64)
        splats.append((float(tz), i, mean, np.linalg.inv(V), color, feat))
    splats.sort(key=lambda rec: (rec[0], rec[1]))

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for tz, i, mean, inv, color, feat in splats:
        ddx = xs - mean[0]
        ddy = ys - mean[1]
        q2 = (inv[0, 0] * ddx * ddx + (inv[0, 1] + inv[1, 0]) * ddx * ddy
              + inv[1, 1] * ddy * ddy)
        a = np.minimum(float(scene.alpha[i]) * np.exp(-0.5 * q2), ALPHA_CLAMP)
        valid = (trans >= T_STOP) & (q2 <= CUTOFF_Q2) & (a >= MIN_ALPHA)
        weight = np.where(valid, a * trans, 0.0)
        rgb += color * weight[:, :, None]
        sz += tz * weight
        featimg += feat * weight[:, :, None]
        trans = np.where(valid, trans * (1.0 - a), trans)

    rgb = rgb + trans[:, :, None] * np.asarray(scene.background, dtype=np.float64)
    cover = 1.0 - trans
    depth = np.zeros((h, w))
    covered = cover > DEPTH_EPS
    depth[covered] = sz[covered] / cover[covered]
    return RenderOutput(rgb=rgb, depth=depth, alpha=cover, feature=featimg)
