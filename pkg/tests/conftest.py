"""Shared fixtures: cameras, synthetic scenes, and the color test card."""
from __future__ import annotations

import numpy as np
import pytest

from splatedit.scene import Camera, GaussianScene, sh_dim


def make_camera(width=128, height=128, f=100.0, T=None, z_near=0.5, z_far=10.0):
    if T is None:
        T = np.eye(4)
    return Camera(
        fx=f, fy=f, cx=(width - 1) / 2.0 if width % 2 == 0 else width // 2,
        cy=(height - 1) / 2.0 if height % 2 == 0 else height // 2,
        width=width, height=height, T=T, z_near=z_near, z_far=z_far,
    )


@pytest.fixture
def identity_camera():
    # fx = fy = 100, principal point at pixel (64, 64) of a 129 px image would
    # be exact; for the common 128 px case the midpoint is 63.5.  Tests that
    # need the (64, 64) example build their own camera below.
    return make_camera()


@pytest.fixture
def example_camera():
    # The worked example configuration: fx = fy = 100, cx = cy = 64.
    return Camera(fx=100.0, fy=100.0, cx=64.0, cy=64.0,
                  width=128, height=128, T=np.eye(4))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_scene(rng, n=40, embed_dim=4, sh_degree=0, z_range=(0.8, 5.0),
                 spread=0.7, background=None):
    """Scene with n Gaussians scattered inside the default view frustum."""
    scene = GaussianScene(embed_dim=embed_dim, sh_degree=sh_degree,
                          background=background)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scene.append(
        x=np.column_stack([
            rng.uniform(-spread, spread, n),
            rng.uniform(-spread, spread, n),
            rng.uniform(z_range[0], z_range[1], n),
        ]),
        scale=np.exp(rng.uniform(np.log(0.01), np.log(0.15), (n, 3))),
        q=q,
        alpha=rng.uniform(0.1, 0.95, n),
        sh=rng.uniform(-0.4, 0.7, (n, sh_dim(sh_degree))),
        embed=rng.normal(size=(n, embed_dim)),
    )
    return scene


def color_card(height=64, width=64, noise=0.01, seed=0):
    """Gray card with red, blue, and green rectangles.

    Colors sit at the centers of the segmenter's 8-level quantization bins,
    so 3-sigma noise cannot flip a pixel's bin.
    """
    img = np.full((height, width, 3), 0.5625)

    def rect(y0, y1, x0, x1, color):
        img[y0 * height // 64:y1 * height // 64,
            x0 * width // 64:x1 * width // 64] = color

    rect(10, 30, 8, 28, [1.0, 0.0, 0.0])
    rect(36, 56, 30, 54, [0.0, 0.0, 1.0])
    rect(6, 20, 40, 60, [0.0, 1.0, 0.0])
    if noise:
        gen = np.random.default_rng(seed)
        img = np.clip(img + gen.normal(0.0, noise, img.shape), 0.0, 1.0)
    return img
