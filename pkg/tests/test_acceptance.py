"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line
with the measured value next to its tolerance."""

import time
from pathlib import Path

import numpy as np
import pytest

from eva_splat import pipeline as P
from eva_splat.attention import EvaParams, FeatureGrid, eva_backward, eva_forward
from eva_splat.bench import bench_attention
from eva_splat.camera import DepthMap, depth_to_positions
from eva_splat.cli import main
from eva_splat.gaussians import GaussianSet
from eva_splat.losses import LossWeights, anchor_loss, render_loss
from eva_splat.rasterizer import RenderTarget, oracle_render, render, render_backward

from conftest import alignment_scene, random_camera, random_gaussians, smooth_scene
from test_attention import dense_row_oracle, make_grids
from test_losses import sets_for, two_view_rig

FIELDS = ("color", "feature", "blended_depth", "final_transmittance")


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, measured):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {measured}")
        return ok
    return emit


def rel_fd_error(fd, g):
    return abs(fd - g) / max(abs(fd), abs(g))


def test_c01_oracle_equivalence(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        cam = random_camera(rng, 64)
        gs = random_gaussians(rng, int(rng.integers(1, 201)))
        a, b = render(gs, cam, (0.2, 0.3, 0.4)), oracle_render(gs, cam, (0.2, 0.3, 0.4))
        worst = max(worst, max(float(np.abs(np.asarray(getattr(a, f), np.float64) - getattr(b, f)).max())
                               for f in FIELDS))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 60
    assert report(1, "oracle equivalence", ok, f"max dev {worst:.2e} (<= 1e-5), {elapsed:.1f} s (< 60 s)")


def test_c02_partition_of_unity(report):
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(50):
        cam = random_camera(rng, 64)
        out = oracle_render(random_gaussians(rng, int(rng.integers(1, 201))), cam)
        worst = max(worst, float(np.abs(out.weight_sum + out.final_transmittance - 1).max()))
    assert report(2, "partition of unity", worst <= 1e-6, f"max |sum - 1| {worst:.2e} (<= 1e-6)")


def _rasterizer_fd(rng):
    cam, gs = smooth_scene(rng, n=20, size=32)
    bg = (0.2, 0.3, 0.4)
    dt = RenderTarget(rng.standard_normal((32, 32, 3)), rng.standard_normal((32, 32, 32)),
                      rng.standard_normal((32, 32)), rng.standard_normal((32, 32)))

    def L(g):
        o = oracle_render(g, cam, bg, check=False)
        return sum(float(np.sum(getattr(o, f) * getattr(dt, f))) for f in FIELDS)

    grads = render_backward(gs, cam, bg, dt).as_dict()
    worst, n = 0.0, 0
    for name, grad in grads.items():
        base = getattr(gs, name)
        idxs = list(np.ndindex(base.shape))
        for k in rng.choice(len(idxs), min(60, len(idxs)), replace=False):
            idx = idxs[k]
            if abs(grad[idx]) <= 1e-6:
                continue
            h = 1e-4 * max(abs(base[idx]), 1e-2)
            p, m = base.copy(), base.copy()
            p[idx] += h
            m[idx] -= h
            fd = (L(gs.replace(**{name: p})) - L(gs.replace(**{name: m}))) / (2 * h)
            worst, n = max(worst, rel_fd_error(fd, grad[idx])), n + 1
    return worst, n


def _attention_fd(rng):
    V, H, W, C = 2, 8, 16, 8
    grids = make_grids(rng, V, H, W, C)
    p = EvaParams.init(H, W, C, heads=4, window=16, num_iterations=2, seed=1)
    p = p.replace(gamma=0.3 * rng.standard_normal((H, W, C)))
    d_out = [rng.standard_normal((H, W, C)) for _ in range(V)]

    def L(gr, pp):
        return sum(float(np.sum(o.data * d)) for o, d in zip(eva_forward(gr, pp), d_out))

    dX, dp = eva_backward(grids, p, d_out)
    h, worst, n = 1e-5, 0.0, 0
    for i in range(V):
        for idx in np.ndindex(H, W, C):
            if abs(dX[i][idx]) <= 1e-6:
                continue
            a = [g.data.copy() for g in grids]
            b = [g.data.copy() for g in grids]
            a[i][idx] += h
            b[i][idx] -= h
            fd = (L([FeatureGrid(k, x) for k, x in enumerate(a)], p)
                  - L([FeatureGrid(k, x) for k, x in enumerate(b)], p)) / (2 * h)
            worst, n = max(worst, rel_fd_error(fd, dX[i][idx])), n + 1
    for name, arr in p.arrays().items():
        for idx in np.ndindex(arr.shape):
            if abs(dp[name][idx]) <= 1e-6:
                continue
            a, b = arr.copy(), arr.copy()
            a[idx] += h
            b[idx] -= h
            fd = (L(grids, p.replace(**{name: a})) - L(grids, p.replace(**{name: b}))) / (2 * h)
            worst, n = max(worst, rel_fd_error(fd, dp[name][idx])), n + 1
    return worst, n


def _render_loss_fd(rng):
    a, b = rng.uniform(size=(32, 32, 3)), rng.uniform(size=(32, 32, 3))
    _, g = render_loss(a, b, 0.2)
    h, worst, n = 1e-6, 0.0, 0
    for idx in np.ndindex(a.shape):
        if abs(g[idx]) <= 1e-6:
            continue
        p, m = a.copy(), a.copy()
        p[idx] += h
        m[idx] -= h
        fd = (render_loss(p, b, 0.2)[0] - render_loss(m, b, 0.2)[0]) / (2 * h)
        worst, n = max(worst, rel_fd_error(fd, g[idx])), n + 1
    return worst, n


def _anchor_fd(rng):
    cams, maps, lms = two_view_rig(np.array([0.05, -0.1, 0.1]), offset=0.07)
    sets = sets_for(2, rng)
    w = LossWeights(tolerance=0.01)
    r = anchor_loss(sets, cams, maps, lms, w)
    worst, n = 0.0, 0
    for v in range(2):
        for name, grad in (("opacities", r.d_opacities[v]), ("scales", r.d_scales[v])):
            base = getattr(sets[v], name)
            for idx in np.ndindex(base.shape):
                if abs(grad[idx]) <= 1e-6:
                    continue
                h = 1e-7
                vals = []
                for sign in (1, -1):
                    x = base.copy()
                    x[idx] += sign * h
                    s = list(sets)
                    s[v] = s[v].replace(**{name: x})
                    vals.append(anchor_loss(s, cams, maps, lms, w).value)
                worst, n = max(worst, rel_fd_error((vals[0] - vals[1]) / (2 * h), grad[idx])), n + 1
        depth = maps[v].depth_in(cams[v])
        for idx in zip(*np.nonzero(r.d_depth[v])):
            h = 1e-6
            vals = []
            for sign in (1, -1):
                d = depth.copy()
                d[idx] += sign * h
                m = list(maps)
                m[v] = depth_to_positions(cams[v], DepthMap(d, maps[v].foreground_mask))
                vals.append(anchor_loss(sets, cams, m, lms, w).value)
            worst, n = max(worst, rel_fd_error((vals[0] - vals[1]) / (2 * h), r.d_depth[v][idx])), n + 1
    return worst, n


def test_c03_gradient_suite(report):
    rng = np.random.default_rng(103)
    t0 = time.perf_counter()
    results = {"rasterizer": _rasterizer_fd(rng), "attention": _attention_fd(rng),
               "ssim/render": _render_loss_fd(rng), "anchor": _anchor_fd(rng)}
    elapsed = time.perf_counter() - t0
    worst = max(w for w, _ in results.values())
    ok = worst < 1e-3 and elapsed < 300 and all(n > 0 for _, n in results.values())
    detail = ", ".join(f"{k} {w:.1e} ({n} entries)" for k, (w, n) in results.items())
    assert report(3, "gradient suite", ok, f"{detail}; worst < 1e-3, {elapsed:.0f} s (< 300 s)")


def test_c04_depth_alignment(report):
    rng = np.random.default_rng(104)
    worst = 0.0
    for tilt in (0.0, 5.0, 10.0, 15.0, 20.0):
        cam, depth, mask, gs = alignment_scene(rng, tilt)
        out = render(gs, cam)
        worst = max(worst, float((np.abs(out.blended_depth[mask] - depth[mask]) / depth[mask]).max()))
    assert report(4, "per-pixel depth alignment", worst <= 1e-3,
                  f"max |d - D|/D {worst:.2e} (<= 1e-3) over tilts 0-20 deg")


def test_c05_attention_cost_scaling(report):
    widths = (64, 128, 256, 512)
    eva = [bench_attention((2, 8, 16, W), "eva_w32", timing=False).peak_bytes for W in widths]
    full = [bench_attention((2, 8, 16, W), "full_cross_view", timing=False).peak_bytes for W in widths]
    s_eva = float(np.polyfit(np.log(widths), np.log(eva), 1)[0])
    s_full = float(np.polyfit(np.log(widths), np.log(full), 1)[0])
    big = (2, 64, 256, 256)
    e = bench_attention(big, "eva_w32", timing=False)
    f = bench_attention(big, "full_cross_view", timing=False)
    # the full cell exceeds the memory budget; its score buffer alone is a lower bound on its peak
    full_bytes = f.peak_bytes if f.peak_bytes is not None else f.required_bytes
    ratio = full_bytes / e.peak_bytes
    ok = abs(s_eva - 1) <= 0.15 and abs(s_full - 2) <= 0.15 and ratio >= 5
    assert report(5, "attention cost scaling", ok,
                  f"slopes eva {s_eva:.3f} (1 +/- 0.15), full {s_full:.3f} (2 +/- 0.15); "
                  f"256^2 eva {e.peak_bytes / 1e9:.2f} GB vs full >= {full_bytes / 1e9:.2f} GB, "
                  f"ratio >= {ratio:.0f}x (>= 5x)")


def test_c06_dense_equivalence(report):
    rng = np.random.default_rng(106)
    worst = 0.0
    for V in (2, 3):
        grids = make_grids(rng, V, 4, 16, 8)
        p = EvaParams.init(4, 16, 8, heads=2, window=16, num_iterations=1, seed=V)
        p = p.replace(gamma=0.3 * rng.standard_normal((4, 16, 8)))
        got = eva_forward(grids, p)
        want = dense_row_oracle(grids, p)
        worst = max(worst, max(float(np.abs(g.data - w).max()) for g, w in zip(got, want)))
    assert report(6, "dense-attention equivalence", worst <= 1e-6, f"max dev {worst:.2e} (<= 1e-6)")


def test_c07_analysis_by_synthesis(report):
    sc = P.generate_scene(3, 2, 45.0, 50, 64, landmarks=False)
    init = P.perturb_gaussians(sc.gaussians, 3, position=0.05, log_scale=0.3, opacity=0.2, color=0.2, rotation=0.3)
    targets = [oracle_render(sc.gaussians, c).color for c in sc.cameras]
    t0 = time.perf_counter()
    res = P.fit_gaussians(targets, sc.cameras, init, iterations=2000)
    elapsed = time.perf_counter() - t0
    start = min(P.fit_psnr(P.FitResult(init, [], [], 0.0, 0.0), targets, sc.cameras))
    final = min(P.fit_psnr(res, targets, sc.cameras))
    ok = final > 35 and elapsed < 60 and len(res.loss_trace) <= 2000
    assert report(7, "analysis-by-synthesis fit", ok,
                  f"min PSNR {start:.1f} -> {final:.2f} dB (> 35) in {len(res.loss_trace)} iterations, "
                  f"{elapsed:.1f} s (< 60 s)")


def test_c08_anchor_behavior(report):
    sc = P.generate_scene(0, 2, 45.0, 200, 64)
    rep = P.anchor_experiment(sc, offset=0.05)
    cams, maps, lms = two_view_rig(np.array([0.05, -0.1, 0.1]), offset=0.05)
    n = 6
    ones = [GaussianSet.create(np.zeros((n, 3)), np.ones(n), np.full((n, 3), 0.1)) for _ in cams]
    # zero scales are outside the valid set; the regularizer is evaluated on raw columns
    zeros = [GaussianSet(np.zeros((n, 3)), np.full(n, 0.5), np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.full((n, 3), 0.5), np.zeros((n, 32))) for _ in cams]
    w = LossWeights()
    op = anchor_loss(ones, cams, maps, lms, w).opacity_term
    sc_term = anchor_loss(zeros, cams, maps, lms, w).scale_term
    ok = rep["anchored"] < rep["baseline"] and op == 0.0 and sc_term == 0.0
    assert report(8, "anchor loss behavior", ok,
                  f"Dist floor {rep['floor']:.4f}, perturbed {rep['perturbed']:.4f}, "
                  f"baseline {rep['baseline']:.4f}, anchored {rep['anchored']:.4f} (< baseline); "
                  f"opacity term {op} (== 0), scale term {sc_term} (== 0)")


def test_c09_geometry(report):
    rng = np.random.default_rng(109)
    worst = 0.0
    n_total = 0
    for _ in range(100):
        cam = random_camera(rng)
        p = rng.uniform(-1, 1, (10_000, 3))
        uvd = np.stack(cam.project_points(p))
        again = np.stack(cam.project_points(cam.unproject_points(*uvd)))
        worst = max(worst, float(np.abs(again - uvd).max()))
        n_total += len(p)
    cams = [random_camera(rng) for _ in range(2)]
    pts = rng.uniform(-0.5, 0.5, (1000, 3))
    recon = [c.unproject_points(*c.project_points(pts)) for c in cams]
    two = max(float(np.abs(recon[0] - recon[1]).max()), float(np.abs(recon[0] - pts).max()))
    ok = worst < 1e-9 and two < 1e-6 and n_total == 10**6
    assert report(9, "geometry", ok, f"round trip {worst:.2e} over {n_total} samples (< 1e-9), "
                                     f"two-view {two:.2e} (< 1e-6)")


def _tree_bytes(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c10_determinism(report, tmp_path, monkeypatch):
    runs = []
    for name in ("first", "second"):
        work = tmp_path / name
        work.mkdir()
        monkeypatch.chdir(work)
        common = ["--seed", "0", "--deterministic"]
        assert main(["gen", *common, "--size", "64", "--gaussians", "60", "--out", "bundle"]) == 0
        assert main(["render", *common, "--bundle", "bundle", "--target-deg", "0", "--out", "render"]) == 0
        assert main(["fit", *common, "--bundle", "bundle", "--iters", "30", "--out", "fit"]) == 0
        runs.append(_tree_bytes(work))
    diff = sorted(k for k in set(runs[0]) | set(runs[1]) if runs[0].get(k) != runs[1].get(k))
    ok = not diff and len(runs[0]) > 10
    assert report(10, "determinism", ok, f"{len(runs[0])} files compared, {len(diff)} differ {diff[:3]}")


@pytest.mark.xfail(strict=False, reason="window-64 vs window-16 timing order is hardware dependent")
def test_reference_timing_order(report):
    shape = (2, 64, 256, 256)
    w16 = bench_attention(shape, "eva_w16", repeats=3).median_ms
    w64 = bench_attention(shape, "eva_w64", repeats=3).median_ms
    assert report(0, "reference timing order (informational)", w64 <= w16,
                  f"w64 {w64:.0f} ms vs w16 {w16:.0f} ms")
