"""Synthetic ring scenes, per-pixel Gaussian lifting, refiners and the
analysis-by-synthesis fitting loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .camera import CameraModel, DepthMap, PositionMap, depth_to_positions
from .errors import DivergenceDetected, InvalidRing, MaskMismatch
from .gaussians import FEATURE_DIM, GaussianSet, merge_views, normalize_quaternions
from .losses import Landmark, LandmarkSet, LossWeights, anchor_loss, psnr, render_loss
from .rasterizer import RenderTarget, oracle_render, render, render_backward

RING_RADIUS = 2.5
BLOB_RADIUS = 0.55
FACE_COUNT = 8
COVERAGE_THRESHOLD = 0.35
# mixed pixels: blend-weighted depth spread above this (meters) are masked out
DEPTH_SPREAD_LIMIT = 0.2
FOCAL_FACTOR = 0.9


# -- scenes -----------------------------------------------------------------------


def ring_camera(phi_deg: float, size: int, radius: float = RING_RADIUS) -> CameraModel:
    """Camera on the x-z ring at azimuth ``phi_deg``; phi = 0 sits on -z looking at the origin."""
    phi = math.radians(phi_deg)
    eye = radius * np.array([math.sin(phi), 0.0, -math.cos(phi)])
    f = FOCAL_FACTOR * size
    return CameraModel.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), f, f, size, size)


def ring_angles(n_views: int, delta_deg: float) -> np.ndarray:
    return (np.arange(n_views) - (n_views - 1) / 2.0) * delta_deg


@dataclass
class SyntheticScene:
    gaussians: GaussianSet
    cameras: list
    images: list  # (H, W, 3) float64, linear
    features: list  # (H, W, F) rendered feature planes
    depths: list  # DepthMap per view
    coverage: list  # 1 - final transmittance per view
    landmarks: LandmarkSet
    face_ids: np.ndarray
    seed: int
    delta_deg: float

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def position_maps(self) -> list:
        return [depth_to_positions(c, d) for c, d in zip(self.cameras, self.depths)]


def _random_quaternions(rng, n):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def _scene_gaussians(rng, n_gaussians: int) -> tuple[GaussianSet, np.ndarray]:
    n_face = min(FACE_COUNT, n_gaussians)
    n_blob = n_gaussians - n_face
    # uniform in a ball
    direction = rng.standard_normal((n_blob, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = BLOB_RADIUS * rng.uniform(0.0, 1.0, n_blob) ** (1.0 / 3.0)
    blob = direction * radius[:, None]
    blob_scales = np.exp(rng.uniform(math.log(0.06), math.log(0.14), (n_blob, 3)))

    # face: a 4x2 patch on the camera-facing side
    gx, gy = np.meshgrid(np.linspace(-0.24, 0.24, 4), np.linspace(-0.1, 0.1, 2))
    face = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, -(BLOB_RADIUS + 0.12))], axis=1)[:n_face]
    face += rng.uniform(-0.01, 0.01, face.shape)
    face_scales = np.full((n_face, 3), 0.04)

    positions = np.concatenate([blob, face])
    scales = np.concatenate([blob_scales, face_scales])
    opacities = np.concatenate([rng.uniform(0.9, 0.99, n_blob), np.full(n_face, 0.95)])
    colors = rng.uniform(0.1, 0.9, (n_gaussians, 3))
    features = 0.5 * rng.standard_normal((n_gaussians, FEATURE_DIM))
    gs = GaussianSet.create(positions, opacities, scales, _random_quaternions(rng, n_gaussians),
                            colors, features)
    return gs, np.arange(n_blob, n_gaussians)


def _depth_spread(gs: GaussianSet, cam: CameraModel, blended_depth, coverage):
    """Blend-weighted standard deviation of Gaussian depths per pixel."""
    z = cam.world_to_camera(gs.positions)[:, 2]
    second = oracle_render(gs.replace(features=(z * z)[:, None]), cam).feature[..., 0]
    safe = np.where(coverage > 0, coverage, 1.0)
    mean = blended_depth / safe
    return np.sqrt(np.maximum(second / safe - mean * mean, 0.0))


def generate_scene(seed: int, n_views: int = 2, delta_deg: float = 45.0, n_gaussians: int = 200,
                   image_size: int = 64, *, landmarks: bool = True) -> SyntheticScene:
    """Deterministic ring scene rendered with the brute-force oracle.

    Depth maps are the blended depth renormalized by coverage. Pixels are
    masked in when coverage reaches :data:`COVERAGE_THRESHOLD` and the blend
    does not straddle depth layers further apart than :data:`DEPTH_SPREAD_LIMIT`.
    """
    if n_views < 2:
        raise InvalidRing(f"need at least 2 views, got {n_views}")
    if not delta_deg > 0 or delta_deg * (n_views - 1) >= 360.0:
        raise InvalidRing(f"delta {delta_deg} deg with {n_views} views does not fit on a ring")
    rng = np.random.default_rng(seed)
    gs, face_ids = _scene_gaussians(rng, n_gaussians)
    cams = [ring_camera(phi, image_size) for phi in ring_angles(n_views, delta_deg)]

    images, feats, depths, coverage = [], [], [], []
    for cam in cams:
        out = oracle_render(gs, cam)
        cov = 1.0 - out.final_transmittance
        spread = _depth_spread(gs, cam, out.blended_depth, cov)
        mask = (cov >= COVERAGE_THRESHOLD) & (spread <= DEPTH_SPREAD_LIMIT)
        depth = np.where(mask, out.blended_depth / np.where(mask, cov, 1.0), 0.0)
        images.append(out.color)
        feats.append(out.feature)
        depths.append(DepthMap(depth, mask))
        coverage.append(cov)

    lms = []
    if landmarks:
        for v, cam in enumerate(cams):
            u, vv, z = cam.project_points(gs.positions[face_ids])
            for k, lid in enumerate(range(len(face_ids))):
                col, row = int(math.floor(u[k])), int(math.floor(vv[k]))
                if not (0 <= col < image_size and 0 <= row < image_size):
                    continue
                if not depths[v].foreground_mask[row, col]:
                    continue
                # occluded if something sits well in front of the face Gaussian
                if depths[v].values[row, col] < z[k] - 3.0 * gs.scales[face_ids[k]].max():
                    continue
                lms.append(Landmark(v, lid, float(u[k]), float(vv[k])))
    return SyntheticScene(gs, cams, images, feats, depths, coverage, LandmarkSet(lms), face_ids,
                          seed, float(delta_deg))


def audit_depths(scene: SyntheticScene, n_sigma: float = 3.0) -> np.ndarray:
    """Per view, the fraction of masked-in pixels whose unprojection is within
    ``n_sigma`` (Mahalanobis) of some ground-truth Gaussian center."""
    from .gaussians import covariance_3d

    gs = scene.gaussians
    inv = np.linalg.inv(np.stack([covariance_3d(s, q) for s, q in zip(gs.scales, gs.quaternions)]))
    fractions = []
    for pm in scene.position_maps():
        pts = pm.positions[pm.foreground_mask]
        d = pts[:, None, :] - gs.positions[None, :, :]
        m2 = np.einsum("pni,nij,pnj->pn", d, inv, d)
        fractions.append(float(np.mean(m2.min(axis=1) <= n_sigma**2)) if len(pts) else 1.0)
    return np.array(fractions)


# -- lifting ----------------------------------------------------------------------


@dataclass
class ConstantAttributes:
    """Same opacity / identity rotation / feature for every pixel; scale is
    ``scale_factor`` pixel footprints (depth / fx) unless ``scale`` is given."""

    opacity: float = 1.0
    scale_factor: float = 0.5
    scale: float | None = None
    feature: float = 0.0

    def maps(self, view: int, cam: CameraModel, pos_map: PositionMap):
        n = int(pos_map.foreground_mask.sum())
        depth = pos_map.depth_in(cam)[pos_map.foreground_mask]
        s = np.full(n, self.scale) if self.scale is not None else self.scale_factor * depth / cam.fx
        return {
            "opacities": np.full(n, self.opacity),
            "scales": np.repeat(s[:, None], 3, axis=1),
            "quaternions": np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
            "features": np.full((n, FEATURE_DIM), self.feature),
        }


@dataclass
class GroundTruthAttributes(ConstantAttributes):
    """Constant geometry, features taken from the scene's rendered feature planes."""

    scene: SyntheticScene | None = None

    def maps(self, view, cam, pos_map):
        out = super().maps(view, cam, pos_map)
        mask = pos_map.foreground_mask
        cov = self.scene.coverage[view][mask]
        out["features"] = self.scene.features[view][mask] / cov[:, None]
        return out


@dataclass
class FitAttributes:
    """Explicit per-view attribute arrays (e.g. produced by :func:`fit_gaussians`)."""

    per_view: list = field(default_factory=list)

    def maps(self, view, cam, pos_map):
        out = self.per_view[view]
        n = int(pos_map.foreground_mask.sum())
        for name, arr in out.items():
            if np.asarray(arr).shape[0] != n:
                raise MaskMismatch(f"view {view}: {name} has {np.asarray(arr).shape[0]} rows, mask has {n}")
        return out


def lift_views(images, pos_maps, cams, attributes) -> list:
    """One Gaussian per masked-in pixel, in row-major pixel order."""
    if not (len(images) == len(pos_maps) == len(cams)):
        raise MaskMismatch("images, position maps and cameras differ in count")
    sets = []
    for view, (img, pm, cam) in enumerate(zip(images, pos_maps, cams)):
        img = np.asarray(img, dtype=np.float64)
        if img.shape[:2] != pm.shape or pm.shape != (cam.height, cam.width):
            raise MaskMismatch(f"view {view}: image {img.shape[:2]}, mask {pm.shape}, camera "
                               f"{(cam.height, cam.width)}")
        mask = pm.foreground_mask
        attrs = attributes.maps(view, cam, pm)
        sets.append(GaussianSet.create(
            pm.positions[mask], attrs["opacities"], attrs["scales"], attrs["quaternions"],
            np.clip(img[mask], 0.0, 1.0), attrs["features"],
        ))
    return sets


# -- refiners ---------------------------------------------------------------------


class Refiner(Protocol):
    def __call__(self, image: np.ndarray, feature: np.ndarray) -> np.ndarray: ...


class IdentityRefiner:
    def __call__(self, image, feature):
        return image


@dataclass
class LinearRefiner:
    """Per-pixel affine map of ``[rgb, feature]`` (3 + F inputs) to rgb."""

    weight: np.ndarray  # (3, 3 + F)
    bias: np.ndarray  # (3,)

    @classmethod
    def identity(cls, feature_dim: int = FEATURE_DIM) -> "LinearRefiner":
        w = np.zeros((3, 3 + feature_dim))
        w[:, :3] = np.eye(3)
        return cls(w, np.zeros(3))

    def __call__(self, image, feature):
        x = np.concatenate([image, feature], axis=-1)
        return x @ self.weight.T + self.bias

    def backward(self, image, feature, d_out):
        """Returns (d_image, d_weight, d_bias)."""
        x = np.concatenate([image, feature], axis=-1).reshape(-1, self.weight.shape[1])
        g = d_out.reshape(-1, 3)
        d_img = (g @ self.weight[:, :3]).reshape(image.shape)
        return d_img, g.T @ x, g.sum(axis=0)


def refine(refiner, image, feature, loops: int):
    if loops < 0:
        raise ValueError("loop count must be >= 0")
    out = image
    for _ in range(loops):
        out = refiner(out, feature)
        if out.shape != image.shape:
            raise MaskMismatch(f"refiner changed the image shape to {out.shape}")
    return out


def fit_linear_refiner(samples, loops: int = 1, iterations: int = 200, step: float = 1e-2,
                       ssim_weight: float = 0.2, beta: float = 0.9, refiner: LinearRefiner | None = None):
    """Fit on ``[(image0, feature, target), ...]``; returns (best refiner, loss trace)."""
    ref = refiner or LinearRefiner.identity(samples[0][1].shape[-1])
    params = [ref.weight.copy(), ref.bias.copy()]

    def evaluate(w, b):
        cur = LinearRefiner(w, b)
        total, gw, gb = 0.0, np.zeros_like(w), np.zeros_like(b)
        for img0, feat, target in samples:
            chain = [img0]
            for _ in range(loops):
                chain.append(cur(chain[-1], feat))
            value, d = render_loss(chain[-1], target, ssim_weight)
            total += value
            for k in range(loops, 0, -1):
                d, dw, db = cur.backward(chain[k - 1], feat, d)
                gw += dw
                gb += db
        n = len(samples)
        return total / n, gw / n, gb / n

    loss, gw, gb = evaluate(*params)
    best = (loss, [p.copy() for p in params], gw, gb)
    trace = [loss]
    vel = [np.zeros_like(p) for p in params]
    prev = loss
    for _ in range(iterations):
        vel[0] = beta * vel[0] + gw
        vel[1] = beta * vel[1] + gb
        params = [params[0] - step * vel[0], params[1] - step * vel[1]]
        loss, gw, gb = evaluate(*params)
        if not math.isfinite(loss):
            raise DivergenceDetected("refiner loss is not finite")
        trace.append(loss)
        if loss < best[0]:
            best = (loss, [p.copy() for p in params], gw, gb)
        if loss > prev:
            step *= 0.5
            vel = [np.zeros_like(p) for p in params]
            loss, params, gw, gb = best[0], [p.copy() for p in best[1]], best[2], best[3]
        prev = loss
    return LinearRefiner(*best[1]), trace


# -- feed-forward path ---------------------------------------------------------------


@dataclass
class PipelineConfig:
    target: CameraModel
    source_views: tuple | None = None  # default: all scene views
    attributes: object = field(default_factory=ConstantAttributes)
    refiner: object = field(default_factory=IdentityRefiner)
    loops: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    oracle: bool = False


@dataclass
class PipelineOutput:
    image: np.ndarray  # rendered novel view
    feature: np.ndarray
    refined: np.ndarray
    gaussians: GaussianSet
    target: RenderTarget


def forward_pipeline(scene: SyntheticScene, config: PipelineConfig) -> PipelineOutput:
    views = tuple(range(scene.n_views)) if config.source_views is None else tuple(config.source_views)
    cams = [scene.cameras[v] for v in views]
    pos_maps = [depth_to_positions(scene.cameras[v], scene.depths[v]) for v in views]
    imgs = [scene.images[v] for v in views]

    class _Reindexed:
        # attribute sources are keyed by scene view id
        def maps(self, i, cam, pm):
            return config.attributes.maps(views[i], cam, pm)

    sets = lift_views(imgs, pos_maps, cams, _Reindexed())
    merged = merge_views(sets)
    draw = oracle_render if config.oracle else render
    out = draw(merged, config.target, config.background)
    image = np.asarray(out.color, dtype=np.float64)
    feature = np.asarray(out.feature, dtype=np.float64)
    refined = refine(config.refiner, image, feature, config.loops)
    return PipelineOutput(image, feature, refined, merged, out)


# -- fitting ------------------------------------------------------------------------

# multipliers on the base step per parameter group (activated coordinates)
DEFAULT_GROUP_RATES = {
    "positions": 0.05,
    "depths": 0.5,
    "opacities": 20.0,
    "scales": 5.0,
    "quaternions": 5.0,
    "colors": 20.0,
}
FIT_GROUPS = ("positions", "opacities", "scales", "quaternions", "colors")


@dataclass
class DepthParameterization:
    """Positions of per-pixel Gaussians written as ``center + depth * ray``.

    ``views[k]`` holds the camera, pixel rows/cols of the Gaussians lifted
    from view ``k`` and their slice in the merged set.
    """

    cams: list
    rows: list
    cols: list
    slices: list
    rays: np.ndarray  # (N, 3)
    centers: np.ndarray  # (N, 3)

    @classmethod
    def from_position_maps(cls, cams, pos_maps) -> "DepthParameterization":
        rows, cols, slices, rays, centers = [], [], [], [], []
        start = 0
        for cam, pm in zip(cams, pos_maps):
            r, c = np.nonzero(pm.foreground_mask)
            rows.append(r)
            cols.append(c)
            slices.append(slice(start, start + len(r)))
            start += len(r)
            rays.append(cam.ray_directions(c + 0.5, r + 0.5))
            centers.append(np.repeat(cam.center[None], len(r), axis=0))
        return cls(list(cams), rows, cols, slices, np.concatenate(rays), np.concatenate(centers))

    def depths_of(self, positions) -> np.ndarray:
        out = np.empty(len(positions))
        for cam, sl in zip(self.cams, self.slices):
            out[sl] = cam.world_to_camera(positions[sl])[:, 2]
        return out

    def positions(self, depths) -> np.ndarray:
        return self.centers + depths[:, None] * self.rays

    def position_maps(self, depths) -> list:
        pos = self.positions(depths)
        maps = []
        for cam, r, c, sl in zip(self.cams, self.rows, self.cols, self.slices):
            grid = np.full((cam.height, cam.width, 3), np.nan)
            grid[r, c] = pos[sl]
            mask = np.zeros((cam.height, cam.width), dtype=bool)
            mask[r, c] = True
            maps.append(PositionMap(grid, mask))
        return maps


@dataclass
class FitResult:
    gaussians: GaussianSet
    loss_trace: list  # loss evaluated at every iteration
    best_trace: list  # best-so-far, non-increasing
    best_loss: float
    step: float  # final step after halvings
    depths: np.ndarray | None = None
    anchor: object = None  # AnchorResult at the best iterate, if the anchor term was on


_EPS_OPACITY = 1e-6


def _to_raw(gs: GaussianSet, groups, depth_param):
    raw = {}
    for g in groups:
        if g == "depths":
            raw[g] = depth_param.depths_of(gs.positions)
        elif g == "opacities":
            o = np.clip(gs.opacities, _EPS_OPACITY, 1.0 - _EPS_OPACITY)
            raw[g] = np.log(o) - np.log1p(-o)
        elif g == "scales":
            raw[g] = np.log(gs.scales)
        else:
            raw[g] = getattr(gs, g).copy()
    return raw


def _activate(base: GaussianSet, raw, depth_param):
    cols = {}
    for g, val in raw.items():
        if g == "depths":
            cols["positions"] = depth_param.positions(val)
        elif g == "opacities":
            cols[g] = 1.0 / (1.0 + np.exp(-val))
        elif g == "scales":
            cols[g] = np.exp(val)
        elif g == "quaternions":
            cols[g] = normalize_quaternions(val)
        else:
            cols[g] = val
    return base.replace(**cols)


def _raw_grad(g, raw_val, act: GaussianSet, grads, depth_param):
    if g == "depths":
        return np.einsum("ni,ni->n", grads["positions"], depth_param.rays)
    if g == "opacities":
        o = act.opacities
        return grads["opacities"] * o * (1.0 - o)
    if g == "scales":
        return grads["scales"] * act.scales
    if g == "quaternions":
        q = act.quaternions
        dq = grads["quaternions"]
        norm = np.linalg.norm(raw_val, axis=1, keepdims=True)
        return (dq - q * np.sum(q * dq, axis=1, keepdims=True)) / norm
    return grads[g]


def fit_gaussians(targets, cams, init: GaussianSet, weights: LossWeights | None = None,
                  iterations: int = 2000, step: float = 1e-2, *, groups=FIT_GROUPS, rates=None,
                  beta: float = 0.9, background=(0.0, 0.0, 0.0), depth_param: DepthParameterization | None = None,
                  landmarks: LandmarkSet | None = None, use_anchor: bool = False,
                  target_loss: float | None = None, min_step: float = 1e-12, callback=None) -> FitResult:
    """Momentum descent on ``render * mean_v render_loss_v [+ anchor * anchor_loss]``.

    Steps are ``step * rates[group]`` in activated coordinates (logit opacity,
    log scale, raw quaternion, depth along the ray when ``depth_param`` is
    given). On a loss increase the step is halved, momentum is dropped and the
    iterate returns to the best point so far. Colors are clipped to [0, 1].
    The loop stops early once ``target_loss`` is reached or the step falls
    below ``min_step``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    init.validate()
    weights = weights or LossWeights()
    rates = {**DEFAULT_GROUP_RATES, **(rates or {})}
    groups = tuple(groups)
    if depth_param is not None and "positions" in groups:
        groups = tuple("depths" if g == "positions" else g for g in groups)
    if "depths" in groups and depth_param is None:
        raise ValueError("depth group needs a depth parameterization")
    if use_anchor and (depth_param is None or landmarks is None):
        raise ValueError("the anchor term needs a depth parameterization and landmarks")
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    n_views = len(cams)
    # pixel-count scaling turns the per-pixel mean into a per-Gaussian sized gradient
    pixel_scale = float(np.mean([c.width * c.height for c in cams]))

    def evaluate(raw):
        act = _activate(init, raw, depth_param)
        total = 0.0
        grads = {k: np.zeros_like(v) for k, v in act.columns().items()}
        for cam, target in zip(cams, targets):
            out = render(act, cam, background, check=False)
            value, d_img = render_loss(out.color, target, weights.render_ssim)
            total += weights.render * value / n_views
            d = RenderTarget(weights.render / n_views * d_img, None, None, None)
            for k, v in render_backward(act, cam, background, d, check=False).as_dict().items():
                grads[k] += v
        anchor = None
        if use_anchor:
            pos_maps = depth_param.position_maps(raw["depths"])
            sets = [act.subset(sl) for sl in depth_param.slices]
            anchor = anchor_loss(sets, depth_param.cams, pos_maps, landmarks, weights)
            total += weights.anchor * anchor.value
            for sl, r, c, d_op, d_sc, d_dep in zip(depth_param.slices, depth_param.rows, depth_param.cols,
                                                    anchor.d_opacities, anchor.d_scales, anchor.d_depth):
                grads["opacities"][sl] += weights.anchor * d_op
                grads["scales"][sl] += weights.anchor * d_sc
                # depth gradient enters through positions along the (Z-unit) ray
                grads["positions"][sl] += weights.anchor * d_dep[r, c][:, None] * depth_param.rays[sl] / np.einsum(
                    "ni,ni->n", depth_param.rays[sl], depth_param.rays[sl])[:, None]
        if not math.isfinite(total):
            raise DivergenceDetected(f"loss became {total}")
        raw_grads = {g: _raw_grad(g, raw[g], act, grads, depth_param) * pixel_scale for g in groups}
        return total, raw_grads, anchor

    raw = _to_raw(init, groups, depth_param)
    loss, grads, anchor = evaluate(raw)
    best = (loss, {k: v.copy() for k, v in raw.items()}, grads, anchor)
    trace, best_trace = [loss], [loss]
    vel = {g: np.zeros_like(v) for g, v in raw.items()}
    prev = loss
    for it in range(1, iterations):
        if (target_loss is not None and best[0] <= target_loss) or step < min_step:
            break
        for g in groups:
            vel[g] = beta * vel[g] + grads[g]
            raw[g] = raw[g] - step * rates[g] * vel[g]
            if g == "colors":
                raw[g] = np.clip(raw[g], 0.0, 1.0)
            elif g == "depths":
                raw[g] = np.maximum(raw[g], 1e-3)
        loss, grads, anchor = evaluate(raw)
        trace.append(loss)
        if loss < best[0]:
            best = (loss, {k: v.copy() for k, v in raw.items()}, grads, anchor)
        if loss > prev:
            step *= 0.5
            vel = {g: np.zeros_like(v) for g, v in raw.items()}
            loss, grads = best[0], best[2]
            raw = {k: v.copy() for k, v in best[1].items()}
        prev = loss
        best_trace.append(best[0])
        if callback is not None:
            callback(it, loss, best[0])
    fitted = _activate(init, best[1], depth_param)
    return FitResult(fitted, trace, best_trace, best[0], step,
                     best[1].get("depths"), best[3])


def perturb_gaussians(gs: GaussianSet, seed: int, *, position: float = 0.02, log_scale: float = 0.15,
                      opacity: float = 0.1, color: float = 0.08, rotation: float = 0.1) -> GaussianSet:
    """Deterministic noisy copy used as a fitting initialization."""
    rng = np.random.default_rng(seed)
    n = len(gs)
    q = normalize_quaternions(gs.quaternions + rotation * rng.standard_normal((n, 4)))
    return gs.replace(
        positions=gs.positions + position * rng.standard_normal((n, 3)),
        scales=gs.scales * np.exp(log_scale * rng.standard_normal((n, 3))),
        opacities=np.clip(gs.opacities + opacity * rng.standard_normal(n), 0.05, 0.99),
        colors=np.clip(gs.colors + color * rng.standard_normal((n, 3)), 0.0, 1.0),
        quaternions=q,
    )


def fit_psnr(result: FitResult, targets, cams) -> list:
    """PSNR of the fitted set against each target, rendered by the oracle."""
    return [psnr(oracle_render(result.gaussians, c).color, t) for c, t in zip(cams, targets)]


# -- controlled landmark perturbation -----------------------------------------------------


def perturb_landmark_depths(scene: SyntheticScene, offset: float = 0.05) -> list:
    """Depth maps with every landmark pixel pushed by ``+offset`` in view 0 and
    ``-offset`` in the other views."""
    out = []
    for view, depth in enumerate(scene.depths):
        values = depth.values.copy()
        for lm in scene.landmarks.landmarks:
            if lm.view_id == view:
                row, col = int(math.floor(lm.v)), int(math.floor(lm.u))
                if depth.foreground_mask[row, col]:
                    values[row, col] += offset if view == 0 else -offset
        out.append(DepthMap(values, depth.foreground_mask))
    return out


def landmark_distances(scene: SyntheticScene, pos_maps, sets, weights: LossWeights) -> dict:
    return anchor_loss(sets, scene.cameras, pos_maps, scene.landmarks, weights).distances


def anchor_experiment(scene: SyntheticScene, offset: float = 0.05, iterations: int = 300,
                      weights: LossWeights | None = None) -> dict:
    """Fit per-pixel depths from perturbed landmark depths, with and without the anchor term.

    Returns the mean cross-view landmark distance for the unperturbed depths
    (``floor``), the perturbed start, and both fits.
    """
    weights = weights or LossWeights()
    if not scene.landmarks.landmarks:
        raise ValueError("scene has no landmarks")
    gt_maps = scene.position_maps()
    pert_maps = [depth_to_positions(c, d) for c, d in zip(scene.cameras, perturb_landmark_depths(scene, offset))]
    sets = lift_views(scene.images, pert_maps, scene.cameras, ConstantAttributes())
    dp = DepthParameterization.from_position_maps(scene.cameras, pert_maps)
    init = merge_views(sets)

    def mean_dist(maps, gs_sets):
        d = landmark_distances(scene, maps, gs_sets, weights)
        return float(np.mean(list(d.values())))

    report = {"floor": mean_dist(gt_maps, sets), "perturbed": mean_dist(pert_maps, sets),
              "tolerance": weights.tolerance, "offset": offset}
    for name, use in (("baseline", False), ("anchored", True)):
        res = fit_gaussians(scene.images, scene.cameras, init, weights, iterations, groups=("positions",),
                            depth_param=dp, landmarks=scene.landmarks, use_anchor=use)
        fitted_sets = [res.gaussians.subset(sl) for sl in dp.slices]
        report[name] = mean_dist(dp.position_maps(res.depths), fitted_sets)
        report[f"{name}_iterations"] = len(res.loss_trace)
    return report
