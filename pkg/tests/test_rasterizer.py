"""Rasterizer forward-pass tests: worked single/double splat examples, the
brute-force reference oracle, tile-size independence and backend parity."""
from __future__ import annotations

import numpy as np
import pytest

from splatedit._backend import HAVE_NUMBA, use_backend
from splatedit.errors import (BehindCameraError, InvalidArgumentError,
                              InvalidStateError, RenderError)
from splatedit.raster import (RenderContext, UpstreamGrads, project_gaussian,
                              rasterize, rasterize_reference)
from splatedit.raster.io import read_pfm, read_png, write_pfm, write_png
from splatedit.scene import GaussianScene

from conftest import make_camera, random_scene

C0 = 0.28209479177387814  # constant spherical harmonic basis value

BACKENDS = ["numpy"] + (["numba"] if HAVE_NUMBA else [])


def sh_for(rgb):
    # degree-0 coefficients that evaluate to the given color: c = C0 k + 0.5
    return [(c - 0.5) / C0 for c in rgb]


def stored_color(rgb):
    # what the renderer actually shades after float32 coefficient storage
    return [C0 * float(np.float32((c - 0.5) / C0)) + 0.5 for c in rgb]


def flat_splat(scene, z, color, alpha, embed=None, scale=5.0):
    # at (0, 0, z) with a huge scale the footprint covers the image and the
    # center pixel sits exactly at the Gaussian mean (q2 = 0 there)
    if embed is None:
        embed = [0.0] * scene.embed_dim
    scene.append(x=[[0.0, 0.0, z]], scale=[[scale] * 3], q=[[1, 0, 0, 0]],
                 alpha=[alpha], sh=[sh_for(color)], embed=[embed])


class TestSingleSplat:
    """Hand-checked projection and shading of one Gaussian."""

    def test_projection_worked_example(self, example_camera):
        # s = 0.01 at depth 1 under f = 100: screen sigma = 100 * 0.01 = 1 px,
        # so cov2d = diag(1, 1) + 0.3 blur = diag(1.3, 1.3)
        sp = project_gaussian(example_camera, [0, 0, 1], [0.01] * 3,
                              [1, 0, 0, 0])
        np.testing.assert_allclose(sp.mean2d, [64.0, 64.0], atol=1e-12)
        np.testing.assert_allclose(sp.cov2d, np.diag([1.3, 1.3]), atol=1e-12)
        np.testing.assert_allclose(sp.conic, [1 / 1.3, 0.0, 1 / 1.3],
                                   atol=1e-12)
        assert sp.depth == 1.0
        assert sp.radius == pytest.approx(3.0 * np.sqrt(1.3), abs=1e-12)

    def test_behind_camera_raises(self, example_camera):
        with pytest.raises(BehindCameraError):
            project_gaussian(example_camera, [0, 0, -1], [0.01] * 3,
                             [1, 0, 0, 0])

    def test_center_pixel_shading(self, example_camera):
        scene = GaussianScene(embed_dim=2, sh_degree=0)
        scene.append(x=[[0, 0, 1]], scale=[[0.01] * 3], q=[[1, 0, 0, 0]],
                     alpha=[0.8], sh=[[0.5, 0.0, 0.0]], embed=[[1.0, 0.0]])
        out = rasterize(scene, example_camera)
        # a = 0.8 at the mean (as stored in float32); red = a * (C0*0.5 + 0.5)
        a = float(np.float32(0.8))
        expect_red = a * (C0 * 0.5 + 0.5)
        assert out.rgb[64, 64, 0] == pytest.approx(expect_red, abs=1e-12)
        assert out.rgb[64, 64, 1] == pytest.approx(a * 0.5, abs=1e-12)
        assert out.alpha[64, 64] == pytest.approx(0.8, abs=1e-7)
        assert out.depth[64, 64] == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(out.feature[64, 64], [0.8, 0.0], atol=1e-7)

    def test_opacity_clamp(self, example_camera):
        scene = GaussianScene(embed_dim=1, sh_degree=0)
        flat_splat(scene, 1.0, (1, 1, 1), 0.999)
        out = rasterize(scene, example_camera)
        # alpha caps at 0.99 regardless of stored opacity
        assert out.alpha[64, 64] == pytest.approx(0.99, abs=1e-7)

    def test_far_pixel_untouched(self, example_camera):
        scene = GaussianScene(embed_dim=1, sh_degree=0)
        scene.append(x=[[0, 0, 1]], scale=[[0.01] * 3], q=[[1, 0, 0, 0]],
                     alpha=[0.8], sh=[[0.5, 0, 0]], embed=[[1.0]])
        out = rasterize(scene, example_camera)
        # 3 sigma ellipse radius is ~3.4 px; the far corner is outside it
        assert out.alpha[0, 0] == 0.0
        assert out.depth[0, 0] == 0.0


class TestWorkedCompositing:
    """Front-to-back blending checked against hand arithmetic."""

    def test_two_layers(self, example_camera):
        scene = GaussianScene(embed_dim=2, sh_degree=0)
        flat_splat(scene, 1.0, (1, 0, 0), 0.5, embed=[1.0, 0.0])
        flat_splat(scene, 2.0, (0, 0, 1), 0.5, embed=[0.0, 1.0])
        out = rasterize(scene, example_camera)
        # center: front weight 0.5, back weight (1 - 0.5) * 0.5 = 0.25
        c1, c2 = stored_color((1, 0, 0)), stored_color((0, 0, 1))
        expect = [0.5 * c1[i] + 0.25 * c2[i] for i in range(3)]
        np.testing.assert_allclose(out.rgb[64, 64], expect, atol=1e-12)
        assert out.alpha[64, 64] == pytest.approx(0.75, abs=1e-12)
        # depth = (1 * 0.5 + 2 * 0.25) / 0.75 = 4/3
        assert out.depth[64, 64] == pytest.approx(4.0 / 3.0, abs=1e-12)
        np.testing.assert_allclose(out.feature[64, 64], [0.5, 0.25],
                                   atol=1e-12)

    def test_background_fills_remainder(self, example_camera):
        scene = GaussianScene(embed_dim=1, sh_degree=0,
                              background=[0.0, 0.0, 1.0])
        flat_splat(scene, 1.0, (1, 0, 0), 0.5)
        flat_splat(scene, 2.0, (0, 0, 1), 0.5)
        out = rasterize(scene, example_camera)
        # remaining transmittance 0.25 picks up the blue background
        c1, c2 = stored_color((1, 0, 0)), stored_color((0, 0, 1))
        expect = [0.5 * c1[i] + 0.25 * c2[i] + 0.25 * (i == 2)
                  for i in range(3)]
        np.testing.assert_allclose(out.rgb[64, 64], expect, atol=1e-12)
        # alpha and depth ignore the background
        assert out.alpha[64, 64] == pytest.approx(0.75, abs=1e-12)

    def test_equal_depth_breaks_ties_by_index(self, example_camera):
        scene = GaussianScene(embed_dim=1, sh_degree=0)
        flat_splat(scene, 1.0, (1, 0, 0), 0.5)  # index 0 wins the tie
        flat_splat(scene, 1.0, (0, 1, 0), 0.5)
        out = rasterize(scene, example_camera)
        c1, c2 = stored_color((1, 0, 0)), stored_color((0, 1, 0))
        expect = [0.5 * c1[i] + 0.25 * c2[i] for i in range(3)]
        np.testing.assert_allclose(out.rgb[64, 64], expect, atol=1e-12)

    def test_occluded_layers_contribute_exactly_zero(self, example_camera):
        # alpha 0.98 leaves transmittance (1 - a)^k at the center; after four
        # layers that is ~1.6e-7 < 1e-6, so layers five and six are dead there
        # and the center pixel must be bit-identical with and without them
        def build(extra):
            scene = GaussianScene(embed_dim=1, sh_degree=0)
            for k in range(4):
                flat_splat(scene, 1.0 + 0.2 * k, (1, 0, 0), 0.98)
            if extra:
                for k in range(2):
                    flat_splat(scene, 2.0 + 0.2 * k, (1, 1, 1), 0.98)
            return scene

        out4 = rasterize(build(False), example_camera)
        out6 = rasterize(build(True), example_camera)
        assert np.array_equal(out4.rgb[64, 64], out6.rgb[64, 64])
        assert out4.alpha[64, 64] == out6.alpha[64, 64]
        assert out4.depth[64, 64] == out6.depth[64, 64]
        # the white layers are alive away from the center where coverage
        # decays, so the images as a whole must differ
        assert not np.array_equal(out4.rgb, out6.rgb)
        a = float(np.float32(0.98))
        expect_red = stored_color((1, 0, 0))[0] * sum(
            a * (1.0 - a) ** k for k in range(4))
        assert out6.rgb[64, 64, 0] == pytest.approx(expect_red, rel=1e-12)


class TestReferenceAgreement:
    """The tiled path must match the brute-force renderer."""

    @pytest.mark.parametrize("seed", range(10))
    def test_random_scenes(self, seed):
        rng = np.random.default_rng(310000 + seed)
        scene = random_scene(rng, n=int(rng.integers(5, 100)),
                             sh_degree=int(rng.integers(0, 2)),
                             background=rng.uniform(0, 1, 3))
        cam = make_camera()
        out = rasterize(scene, cam)
        ref = rasterize_reference(scene, cam)
        np.testing.assert_allclose(out.rgb, ref.rgb, atol=1e-5)
        np.testing.assert_allclose(out.depth, ref.depth, atol=1e-5)
        np.testing.assert_allclose(out.alpha, ref.alpha, atol=1e-5)
        np.testing.assert_allclose(out.feature, ref.feature, atol=1e-5)

    def test_high_degree_sh_scene(self):
        rng = np.random.default_rng(42)
        scene = random_scene(rng, n=30, sh_degree=3)
        cam = make_camera(T=np.array([
            [0.0, 0.0, 1.0, -2.0],
            [0.0, 1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0, 2.0],
            [0.0, 0.0, 0.0, 1.0],
        ]))
        out = rasterize(scene, cam)
        ref = rasterize_reference(scene, cam)
        np.testing.assert_allclose(out.rgb, ref.rgb, atol=1e-5)

    def test_offscreen_and_behind_mixture(self):
        # Gaussians behind the camera or far outside the frustum must be
        # culled identically by both paths
        scene = GaussianScene(embed_dim=1, sh_degree=0)
        xs = [[0, 0, 1], [0, 0, -2], [5, 5, 1], [0, 0, 0.1], [0, 0, 20],
              [0.3, -0.2, 2]]
        n = len(xs)
        scene.append(x=xs, scale=np.full((n, 3), 0.05),
                     q=np.tile([1.0, 0, 0, 0], (n, 1)),
                     alpha=np.full(n, 0.7), sh=np.tile(sh_for((1, 0, 0)), (n, 1)),
                     embed=np.ones((n, 1)))
        cam = make_camera()
        out = rasterize(scene, cam)
        ref = rasterize_reference(scene, cam)
        np.testing.assert_allclose(out.rgb, ref.rgb, atol=1e-6)
        np.testing.assert_allclose(out.alpha, ref.alpha, atol=1e-6)

    def test_inactive_rows_skipped(self):
        rng = np.random.default_rng(9)
        scene = random_scene(rng, n=20)
        scene.active[::2] = False
        scene.bump()
        cam = make_camera()
        out = rasterize(scene, cam)
        ref = rasterize_reference(scene, cam)
        np.testing.assert_allclose(out.rgb, ref.rgb, atol=1e-6)


class TestTileAndBackend:
    """Output must not depend on tile size; backends must agree."""

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_tile_size_independence(self, backend):
        rng = np.random.default_rng(77)
        scene = random_scene(rng, n=50, background=[0.2, 0.3, 0.4])
        cam = make_camera()
        with use_backend(backend):
            base = rasterize(scene, cam, tile_size=16)
            for ts in (8, 64):
                other = rasterize(scene, cam, tile_size=ts)
                assert np.array_equal(base.rgb, other.rgb)
                assert np.array_equal(base.depth, other.depth)
                assert np.array_equal(base.alpha, other.alpha)
                assert np.array_equal(base.feature, other.feature)

    @pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
    def test_backend_parity(self):
        rng = np.random.default_rng(78)
        scene = random_scene(rng, n=60, background=[0.1, 0.0, 0.9])
        cam = make_camera()
        with use_backend("numba"):
            a = rasterize(scene, cam)
        with use_backend("numpy"):
            b = rasterize(scene, cam)
        np.testing.assert_allclose(a.rgb, b.rgb, atol=1e-12)
        np.testing.assert_allclose(a.depth, b.depth, atol=1e-12)
        np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-12)
        np.testing.assert_allclose(a.feature, b.feature, atol=1e-12)

    def test_determinism(self):
        rng = np.random.default_rng(79)
        scene = random_scene(rng, n=40)
        cam = make_camera()
        a = rasterize(scene, cam)
        b = rasterize(scene, cam)
        c = rasterize(scene.copy(), cam)
        for x, y in ((a, b), (a, c)):
            assert np.array_equal(x.rgb, y.rgb)
            assert np.array_equal(x.depth, y.depth)


class TestOutputContract:
    """Empty scenes, plane ranges and the feature override."""

    def test_empty_scene_is_background(self):
        scene = GaussianScene(embed_dim=3, sh_degree=0,
                              background=[0.25, 0.5, 0.75])
        cam = make_camera(width=32, height=24)
        out = rasterize(scene, cam)
        np.testing.assert_allclose(
            out.rgb, np.broadcast_to([0.25, 0.5, 0.75], (24, 32, 3)))
        assert np.all(out.alpha == 0.0)
        assert np.all(out.depth == 0.0)
        assert out.feature.shape == (24, 32, 3)
        assert np.all(out.feature == 0.0)

    def test_plane_ranges(self):
        rng = np.random.default_rng(80)
        scene = random_scene(rng, n=80)
        cam = make_camera()
        out = rasterize(scene, cam)
        assert np.all(out.alpha >= 0.0) and np.all(out.alpha <= 1.0)
        hit = out.alpha > 1e-6
        assert np.all(out.depth[hit] > cam.z_near)
        assert np.all(out.depth[hit] < cam.z_far)
        assert np.all(out.depth[~hit] == 0.0)

    def test_feature_override_scores(self, example_camera):
        rng = np.random.default_rng(81)
        scene = random_scene(rng, n=25, z_range=(1.0, 3.0))
        scores = rng.uniform(0, 1, scene.n)
        out = rasterize(scene, example_camera, feature_override=scores)
        ref = rasterize_reference(scene, example_camera,
                                  feature_override=scores[:, None])
        assert out.feature.shape == (128, 128, 1)
        np.testing.assert_allclose(out.feature, ref.feature, atol=1e-6)

    def test_feature_override_blocks_embed_grad(self, example_camera):
        rng = np.random.default_rng(82)
        scene = random_scene(rng, n=10, z_range=(1.0, 2.0))
        ctx = RenderContext(scene, example_camera,
                            feature_override=np.ones(scene.n))
        ctx.forward()
        g = ctx.backward(UpstreamGrads(rgb=np.ones((128, 128, 3)),
                                       feature=np.ones((128, 128, 1))))
        assert np.all(g.embed == 0.0)
        assert np.any(g.sh != 0.0)


class TestErrors:

    def test_nonfinite_param_names_gaussian(self, example_camera):
        rng = np.random.default_rng(83)
        scene = random_scene(rng, n=5)
        scene.x[3, 1] = np.nan
        with pytest.raises(RenderError) as exc:
            rasterize(scene, example_camera)
        assert exc.value.gaussian_index == 3

    def test_feature_override_row_mismatch(self, example_camera):
        rng = np.random.default_rng(84)
        scene = random_scene(rng, n=5)
        with pytest.raises(InvalidArgumentError):
            rasterize(scene, example_camera, feature_override=np.ones(4))

    def test_backward_before_forward(self, example_camera):
        rng = np.random.default_rng(85)
        scene = random_scene(rng, n=3)
        ctx = RenderContext(scene, example_camera)
        with pytest.raises(InvalidStateError):
            ctx.backward(UpstreamGrads(rgb=np.ones((128, 128, 3))))

    def test_backward_after_scene_change(self, example_camera):
        rng = np.random.default_rng(86)
        scene = random_scene(rng, n=3)
        ctx = RenderContext(scene, example_camera)
        ctx.forward()
        scene.bump()
        with pytest.raises(InvalidStateError):
            ctx.backward(UpstreamGrads(rgb=np.ones((128, 128, 3))))

    def test_bad_tile_size(self, example_camera):
        rng = np.random.default_rng(87)
        scene = random_scene(rng, n=3)
        with pytest.raises(InvalidArgumentError):
            rasterize(scene, example_camera, tile_size=0)


class TestImageIO:

    def test_pfm_round_trip_gray(self, tmp_path):
        rng = np.random.default_rng(88)
        img = rng.normal(size=(17, 23)).astype(np.float32)
        path = tmp_path / "depth.pfm"
        write_pfm(path, img)
        back = read_pfm(path)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, img)

    def test_pfm_round_trip_rgb(self, tmp_path):
        rng = np.random.default_rng(89)
        img = rng.normal(size=(8, 5, 3)).astype(np.float32)
        path = tmp_path / "c.pfm"
        write_pfm(path, img)
        np.testing.assert_array_equal(read_pfm(path), img)

    def test_png_round_trip_quantized(self, tmp_path):
        img = np.linspace(0, 1, 30).reshape(5, 6)
        path = tmp_path / "g.png"
        write_png(path, np.stack([img] * 3, axis=2))
        back = read_png(path)
        assert np.abs(back - img[:, :, None]).max() <= 0.5 / 255 + 1e-9

    def test_png_clamps(self, tmp_path):
        img = np.array([[[-0.5, 0.5, 1.5]]])
        path = tmp_path / "clamp.png"
        write_png(path, img)
        np.testing.assert_allclose(read_png(path)[0, 0], [0.0, 0.5, 1.0],
                                   atol=0.5 / 255)
