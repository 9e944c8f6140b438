import numpy as np
import pytest

from eva_splat.camera import CameraModel
from eva_splat.errors import ImageTooLarge, InvalidGaussianSet, TooManyGaussiansForOracle
from eva_splat.gaussians import GaussianSet, merge_views
from eva_splat.rasterizer import RenderTarget, oracle_render, render, render_backward

from conftest import alignment_scene, random_camera, random_gaussians, smooth_scene

FIELDS = ("color", "feature", "blended_depth", "final_transmittance")
BG = (0.2, 0.3, 0.4)


def frontal_cam(size=32, f=40.0):
    return CameraModel(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size)


def single(position, opacity, scale, color=(1.0, 0.5, 0.25), feature_dim=32):
    return GaussianSet.create(np.array([position], float), np.array([opacity]), np.full((1, 3), scale),
                              colors=np.array([color]), features=np.ones((1, feature_dim)))


def max_diff(a, b):
    return max(float(np.abs(np.asarray(getattr(a, f), np.float64) - getattr(b, f)).max()) for f in FIELDS)


class TestForwardExamples:
    @pytest.mark.parametrize("fn", [render, oracle_render])
    def test_empty_set(self, fn):
        out = fn(GaussianSet.empty(), frontal_cam(), BG)
        assert np.allclose(out.color, BG, atol=1e-7)
        assert np.all(out.feature == 0)
        assert np.all(out.final_transmittance == 1)

    @pytest.mark.parametrize("fn", [render, oracle_render])
    def test_alpha_clamp_single_term(self, fn):
        cam = frontal_cam()
        # (u, v) = (16, 16) has its center at (16.5, 16.5)
        pos = cam.unproject(16.5, 16.5, 2.0)
        gs = single(pos, 1.0, 0.5)
        out = fn(gs, cam, BG)
        expect = 0.99 * gs.colors[0] + 0.01 * np.array(BG)
        assert np.allclose(out.color[16, 16], expect, atol=1e-6)
        assert np.isclose(out.final_transmittance[16, 16], 0.01, atol=1e-7)

    @pytest.mark.parametrize("fn", [render, oracle_render])
    def test_all_zero_opacity(self, fn, rng):
        gs = random_gaussians(rng, 30)
        gs = gs.replace(opacities=np.zeros(30))
        out = fn(gs, random_camera(rng, 32), BG)
        assert np.allclose(out.color, BG, atol=1e-7)
        assert np.all(out.final_transmittance == 1)

    def test_two_term_expansion(self):
        cam = frontal_cam()
        near = cam.unproject(15.0, 16.0, 2.0)
        far = cam.unproject(18.0, 17.0, 3.0)
        c1, c2 = np.array([0.9, 0.1, 0.2]), np.array([0.1, 0.8, 0.6])
        g1, g2 = single(near, 0.6, 0.05, c1), single(far, 0.7, 0.08, c2)
        black = (0.0, 0.0, 0.0)
        # isolate each alpha: a white Gaussian over a black background renders its alpha
        a1 = oracle_render(g1.replace(colors=np.ones((1, 3))), cam, black).color[..., 0]
        a2 = oracle_render(g2.replace(colors=np.ones((1, 3))), cam, black).color[..., 0]
        both = oracle_render(merge_views([g2, g1]), cam, BG)
        bg = np.array(BG)
        expect = (c1 * a1[..., None] + c2 * (a2 * (1 - a1))[..., None]
                  + bg * ((1 - a1) * (1 - a2))[..., None])
        assert np.allclose(both.color, expect, atol=1e-12)

    @pytest.mark.parametrize("fn", [render, oracle_render])
    def test_feature_color_duplication_exact(self, fn, rng):
        gs = random_gaussians(rng, 60)
        feats = gs.features.copy()
        feats[:, :3] = gs.colors
        out = fn(gs.replace(features=feats), random_camera(rng, 48), (0.0, 0.0, 0.0))
        assert np.array_equal(out.feature[..., :3], out.color)

    def test_output_ranges(self, rng):
        for _ in range(5):
            gs = random_gaussians(rng, 150)
            cam = random_camera(rng, 48)
            for out in (render(gs, cam), oracle_render(gs, cam)):
                T = out.final_transmittance
                assert T.min() >= 0 and T.max() <= 1
                assert out.color.min() >= 0 and out.color.max() <= 1 + 1e-6

    def test_dtype(self, rng):
        gs, cam = random_gaussians(rng, 10), random_camera(rng, 16)
        assert render(gs, cam).color.dtype == np.float32
        assert oracle_render(gs, cam).color.dtype == np.float64


class TestInvariants:
    def test_oracle_equivalence_sample(self, rng):
        for _ in range(8):
            cam = random_camera(rng, 64)
            gs = random_gaussians(rng, int(rng.integers(1, 201)))
            assert max_diff(render(gs, cam, BG), oracle_render(gs, cam, BG)) <= 1e-5

    def test_non_square_and_partial_tiles(self, rng):
        cam = CameraModel.look_at([0.2, 0.1, -3], [0, 0, 0], [0, 1, 0], 40, 42, 50, 37)
        gs = random_gaussians(rng, 120)
        assert max_diff(render(gs, cam, BG), oracle_render(gs, cam, BG)) <= 1e-5

    def test_partition_of_unity(self, rng):
        for _ in range(5):
            gs = random_gaussians(rng, 120)
            cam = random_camera(rng, 48)
            for out in (render(gs, cam), oracle_render(gs, cam)):
                total = out.weight_sum.astype(np.float64) + out.final_transmittance
                assert np.abs(total - 1).max() <= 1e-6

    def test_merge_order_immaterial(self, rng):
        cam = random_camera(rng, 48)
        a, b = random_gaussians(rng, 40), random_gaussians(rng, 30)
        ab = render(merge_views([a, b]), cam, BG)
        ba = render(merge_views([b, a]), cam, BG)
        assert max_diff(ab, ba) <= 1e-6

    def test_merge_single_identity(self, rng):
        a = random_gaussians(rng, 5)
        m = merge_views([a])
        assert all(np.array_equal(getattr(a, k), getattr(m, k)) for k in a.columns())

    def test_deterministic(self, rng):
        gs, cam = random_gaussians(rng, 100), random_camera(rng, 48)
        r1, r2 = render(gs, cam, BG), render(gs, cam, BG)
        assert all(np.array_equal(getattr(r1, f), getattr(r2, f)) for f in FIELDS)

    @pytest.mark.parametrize("tilt_deg", [0.0, 10.0, 20.0])
    def test_per_pixel_alignment(self, tilt_deg, rng):
        scene = alignment_scene(rng, tilt_deg)
        cam, depth, mask, gs = scene
        out = render(gs, cam)
        err = np.abs(out.blended_depth[mask] - depth[mask]) / depth[mask]
        assert err.max() <= 1e-3


class TestErrors:
    def test_image_too_large(self):
        cam = CameraModel(fx=100, fy=100, cx=2500, cy=10, width=5000, height=20)
        with pytest.raises(ImageTooLarge):
            render(GaussianSet.empty(), cam)

    def test_oracle_limit(self):
        n = 10_001
        gs = GaussianSet.create(np.zeros((n, 3)) + [0, 0, 3], np.full(n, 0.5), np.full((n, 3), 0.1))
        with pytest.raises(TooManyGaussiansForOracle):
            oracle_render(gs, frontal_cam(8))

    def test_invalid_set(self):
        bad = GaussianSet(np.zeros((1, 3)), np.array([2.0]), np.ones((1, 3)), np.array([[1.0, 0, 0, 0]]),
                          np.zeros((1, 3)), np.zeros((1, 32)))
        with pytest.raises(InvalidGaussianSet):
            render(bad, frontal_cam(8))


def _blend_loss(gs, cam, d_target, fn=oracle_render):
    out = fn(gs, cam, BG, check=False)
    return sum(float(np.sum(getattr(d_target, f) * getattr(out, f))) for f in FIELDS)


class TestBackward:
    def test_zero_adjoint(self, rng):
        gs, cam = random_gaussians(rng, 30), random_camera(rng, 32)
        zero = RenderTarget.zeros(32, 32, 32)
        for g in render_backward(gs, cam, BG, zero).as_dict().values():
            assert np.all(g == 0)

    def test_none_fields_are_zero(self, rng):
        gs, cam = random_gaussians(rng, 30), random_camera(rng, 32)
        empty = RenderTarget(None, None, None, None)
        for g in render_backward(gs, cam, BG, empty).as_dict().values():
            assert np.all(g == 0)

    def test_single_center_pixel_color(self):
        cam = frontal_cam()
        gs = single(cam.unproject(10.5, 20.5, 2.0), 0.7, 0.2)
        alpha = oracle_render(gs.replace(colors=np.ones((1, 3))), cam).color[20, 10, 0]
        dt = RenderTarget.zeros(32, 32, 32)
        d_pixel = np.array([0.3, -1.2, 2.0])
        dt.color[20, 10] = d_pixel
        g = render_backward(gs, cam, BG, dt)
        assert np.allclose(g.d_color[0], alpha * d_pixel, atol=1e-12)

    def test_culled_gaussians_get_zero(self, rng):
        cam = frontal_cam()
        gs = random_gaussians(rng, 10, extent=0.3).replace(
            positions=np.vstack([random_gaussians(rng, 8, extent=0.3).positions + [0, 0, 3.0],
                                 [[0, 0, -2.0]], [[50.0, 0, 3.0]]]))
        dt = RenderTarget(rng.standard_normal((32, 32, 3)), rng.standard_normal((32, 32, 32)),
                          rng.standard_normal((32, 32)), rng.standard_normal((32, 32)))
        g = render_backward(gs, cam, BG, dt).as_dict()
        for arr in g.values():
            assert np.all(np.isfinite(arr))
            assert np.all(arr[8:] == 0)

    def test_finite_differences_smooth_regime(self):
        rng = np.random.default_rng(1)
        cam, gs = smooth_scene(rng)
        o = oracle_render(gs, cam, BG)
        assert o.final_transmittance.min() > 1e-3
        dt = RenderTarget(rng.standard_normal((32, 32, 3)), rng.standard_normal((32, 32, 32)),
                          rng.standard_normal((32, 32)), rng.standard_normal((32, 32)))
        grads = render_backward(gs, cam, BG, dt).as_dict()
        checked, worst = 0, 0.0
        for name, grad in grads.items():
            base = getattr(gs, name)
            for idx in np.ndindex(base.shape):
                h = 1e-4 * max(abs(base[idx]), 1e-2)
                p, m = base.copy(), base.copy()
                p[idx] += h
                m[idx] -= h
                fd = (_blend_loss(gs.replace(**{name: p}), cam, dt)
                      - _blend_loss(gs.replace(**{name: m}), cam, dt)) / (2 * h)
                if abs(grad[idx]) > 1e-6:
                    checked += 1
                    worst = max(worst, abs(fd - grad[idx]) / max(abs(grad[idx]), abs(fd)))
        assert checked > 800
        assert worst < 1e-3

    def test_linear_columns_general_scene(self, rng):
        # color and feature enter the blend linearly, so FD is exact on any scene
        gs, cam = random_gaussians(rng, 80), random_camera(rng, 32)
        dt = RenderTarget(rng.standard_normal((32, 32, 3)), rng.standard_normal((32, 32, 32)), None, None)
        full = RenderTarget(dt.color, dt.feature, np.zeros((32, 32)), np.zeros((32, 32)))
        g = render_backward(gs, cam, BG, dt)
        for name, grad in (("colors", g.d_color), ("features", g.d_feature)):
            base = getattr(gs, name)
            for _ in range(40):
                idx = tuple(int(rng.integers(s)) for s in base.shape)
                h = 1e-3
                p, m = base.copy(), base.copy()
                p[idx] += h
                m[idx] -= h
                fd = (_blend_loss(gs.replace(**{name: p}), cam, full)
                      - _blend_loss(gs.replace(**{name: m}), cam, full)) / (2 * h)
                assert abs(fd - grad[idx]) <= 1e-6 * max(1.0, abs(fd))
