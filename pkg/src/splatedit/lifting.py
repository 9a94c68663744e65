"""Single-image scene initialization and novel-view expansion.

Initialization places one Gaussian per sampled pixel at its unprojected
depth, copying the pixel color into the spherical-harmonic DC term.
Expansion renders a novel view, finds the uncovered pixels, inpaints color
and depth there, and lifts only those pixels as new Gaussians; existing
Gaussians are never touched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .geometry import lift_pixel, lift_pixels, orbit_camera
from .raster import RenderOutput, rasterize
from .raster.prepare import SH_C0
from .scene import Camera, GaussianScene, check_depth, check_image

HOLE_TAU_ALPHA = 0.5


@dataclass(frozen=True)
class LiftConfig:
    """Knobs for pixel-to-Gaussian initialization."""

    pixel_stride: int = 1
    init_opacity_range: tuple = (0.9, 0.98)
    scale_factor: float = 0.15
    rng_seed: int = 0

    def __post_init__(self):
        if int(self.pixel_stride) < 1:
            raise InvalidArgumentError("pixel_stride must be >= 1")
        lo, hi = self.init_opacity_range
        if not 0.0 < lo < hi < 1.0:
            raise InvalidArgumentError(
                "init_opacity_range must satisfy 0 < lo < hi < 1")
        if self.scale_factor <= 0.0:
            raise InvalidArgumentError("scale_factor must be positive")


@dataclass(frozen=True)
class ExpansionReport:
    """What one expansion pass did at one novel camera."""

    hole_pixel_count: int
    added_gaussian_count: int
    novel_camera: Camera

    def __post_init__(self):
        if self.added_gaussian_count > self.hole_pixel_count:
            raise InvalidArgumentError(
                "cannot add more Gaussians than hole pixels")


def _dc_from_colors(colors: np.ndarray, sh_coeffs: int) -> np.ndarray:
    """SH arrays with the DC term reproducing the given colors."""
    m = colors.shape[0]
    sh = np.zeros((m, sh_coeffs))
    sh[:, 0:3] = (colors - 0.5) / SH_C0
    return sh


def _lift_batch(scene: GaussianScene, camera: Camera, uv: np.ndarray,
                depths: np.ndarray, colors: np.ndarray,
                cfg: LiftConfig) -> np.ndarray:
    """Append one Gaussian per (pixel, depth, color) row; returns indices."""
    m = uv.shape[0]
    rng = np.random.default_rng(cfg.rng_seed)
    lo, hi = cfg.init_opacity_range
    radius = cfg.scale_factor * depths / camera.fx
    return scene.append(
        x=lift_pixels(camera, uv.astype(np.float64), depths),
        scale=np.repeat(radius[:, None], 3, axis=1),
        q=np.tile([1.0, 0.0, 0.0, 0.0], (m, 1)),
        alpha=rng.uniform(lo, hi, size=m),
        sh=_dc_from_colors(colors, scene.sh_coeffs),
    )


def init_scene_from_image(image, depth, camera: Camera,
                          cfg: LiftConfig | None = None, *,
                          embed_dim: int = 16,
                          background=None) -> GaussianScene:
    """Lift a posed RGB-D image into a fresh scene, one Gaussian per
    sampled pixel."""
    cfg = cfg or LiftConfig()
    img = check_image(image)
    dep = check_depth(depth)
    h, w = img.shape[:2]
    if dep.shape != (h, w):
        raise InvalidArgumentError(
            f"depth {dep.shape} does not match image {(h, w)}")
    if (h, w) != (camera.height, camera.width):
        raise InvalidArgumentError(
            f"camera is {camera.height}x{camera.width}, image is {h}x{w}")
    stride = int(cfg.pixel_stride)
    if h % stride or w % stride:
        raise InvalidArgumentError(
            f"stride {stride} must divide the {h}x{w} grid")
    vs, us = np.mgrid[0:h:stride, 0:w:stride]
    us = us.ravel()
    vs = vs.ravel()
    scene = GaussianScene(embed_dim=embed_dim, background=background)
    _lift_batch(scene, camera, np.stack([us, vs], axis=1),
                dep[vs, us], img[vs, us], cfg)
    return scene


def hole_mask(render: RenderOutput, tau_alpha: float = HOLE_TAU_ALPHA):
    """Pixels whose accumulated coverage falls below tau_alpha."""
    if not 0.0 < tau_alpha < 1.0:
        raise InvalidArgumentError("tau_alpha must lie in (0, 1)")
    return render.alpha < tau_alpha


def expand_scene(scene: GaussianScene, novel_camera: Camera, priors,
                 cfg: LiftConfig | None = None, *,
                 tau_alpha: float = HOLE_TAU_ALPHA) -> ExpansionReport:
    """Fill the novel view's uncovered pixels with inpainted Gaussians.

    Renders the view, inpaints color over the hole mask and depth with the
    covered pixels held fixed, then lifts every hole pixel.  Existing
    Gaussians are untouched; covered pixels keep their rendered depth
    bit-exact through the inpainting step.
    """
    cfg = cfg or LiftConfig()
    render = rasterize(scene, novel_camera)
    mask = hole_mask(render, tau_alpha)
    holes = int(mask.sum())
    if holes == 0:
        return ExpansionReport(hole_pixel_count=0, added_gaussian_count=0,
                               novel_camera=novel_camera)
    rgb_filled = priors.inpaint_rgb(np.clip(render.rgb, 0.0, 1.0), mask)
    depth_filled = priors.inpaint_depth(render.depth, ~mask, rgb_filled)
    ys, xs = np.nonzero(mask)
    # inpainted depth may extrapolate outside the frustum; keep lifted
    # points strictly inside so they survive depth culling
    depths = np.clip(depth_filled[ys, xs],
                     novel_camera.z_near * (1.0 + 1e-6),
                     novel_camera.z_far * (1.0 - 1e-6))
    added = _lift_batch(scene, novel_camera, np.stack([xs, ys], axis=1),
                        depths, np.clip(rgb_filled[ys, xs], 0.0, 1.0), cfg)
    return ExpansionReport(hole_pixel_count=holes,
                           added_gaussian_count=int(added.size),
                           novel_camera=novel_camera)


def imagined_cameras(camera: Camera, pivot_depth: float,
                     yaw_degrees: float = 15.0) -> list:
    """The two default novel views: yaw left and right about the point on
    the principal ray at pivot_depth."""
    if not np.isfinite(pivot_depth) or pivot_depth <= 0:
        raise InvalidArgumentError("pivot_depth must be positive")
    pivot = lift_pixel(camera, camera.cx, camera.cy, float(pivot_depth))
    yaw = float(np.radians(yaw_degrees))
    return [orbit_camera(camera, yaw, pivot),
            orbit_camera(camera, -yaw, pivot)]
