"""Training objectives with analytic gradients, and PSNR/SSIM metrics.

Every ``*_loss`` function returns ``(value, gradient)``; metrics return plain floats.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .camera import CameraModel, DepthMap, PositionMap
from .errors import EmptyMask, NonFiniteComponent, ShapeMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0


@dataclass(frozen=True)
class LossWeights:
    render_ssim: float = 0.2  # lambda_render
    refine_ssim: float = 0.2  # lambda_refine
    render: float = 1.0  # lambda_1
    refine: float = 1.0  # lambda_2
    anchor: float = 0.1  # lambda_3
    opacity: float = 0.01
    scale: float = 0.01
    tolerance: float = 0.005  # t, meters
    anchor_hinge: bool = False  # max(Dist - t, 0) instead of max(Dist, t)

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, bool) and value < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0, got {value}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**d)


# -- depth ----------------------------------------------------------------------


def depth_loss(pred, gt: DepthMap, cam: CameraModel | None = None):
    """Mean squared depth error over pixels that are foreground in both maps.

    ``pred`` may be a :class:`DepthMap` or a :class:`PositionMap` (then ``cam``
    converts positions to camera-frame depth and the gradient is w.r.t. positions).
    """
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    mask = pred.foreground_mask & gt.foreground_mask
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("no foreground pixels shared by prediction and ground truth")
    if isinstance(pred, PositionMap):
        if cam is None:
            raise ValueError("a camera is required to compare positions with depth")
        z = np.where(mask, pred.depth_in(cam), 0.0)
    else:
        z = np.where(mask, pred.values, 0.0)
    diff = np.where(mask, z - gt.values, 0.0)
    value = float(np.sum(diff * diff) / count)
    grad = 2.0 * diff / count
    if isinstance(pred, PositionMap):
        grad = grad[..., None] * cam.rotation[2]
    return value, grad


# -- SSIM -----------------------------------------------------------------------


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' filtering over the first two axes."""
    k = g.shape[0]
    h, w = x.shape[0] - k + 1, x.shape[1] - k + 1
    rows = sum(g[i] * x[i:i + h] for i in range(k))
    return sum(g[j] * rows[:, j:j + w] for j in range(k))


def _filter_valid_adjoint(y, g, shape):
    k = g.shape[0]
    h, w = y.shape[0], y.shape[1]
    cols = np.zeros((h, shape[1]) + y.shape[2:])
    for j in range(k):
        cols[:, j:j + w] += g[j] * y
    out = np.zeros(shape)
    for i in range(k):
        out[i:i + h] += g[i] * cols
    return out


def _as_channels(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _ssim_parts(a, b):
    g = gaussian_window()
    C1 = SSIM_K1**2
    C2 = SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    e_aa, e_bb, e_ab = _filter_valid(a * a, g), _filter_valid(b * b, g), _filter_valid(a * b, g)
    A1 = 2 * mu_a * mu_b + C1
    A2 = 2 * (e_ab - mu_a * mu_b) + C2
    B1 = mu_a**2 + mu_b**2 + C1
    B2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + C2
    return g, mu_a, mu_b, A1, A2, B1, B2


def _check_pair(a, b):
    a, b = _as_channels(a), _as_channels(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeMismatch(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    return a, b


def ssim(a, b) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, data range 1), averaged over channels."""
    a, b = _check_pair(a, b)
    _, _, _, A1, A2, B1, B2 = _ssim_parts(a, b)
    return float(np.mean(A1 * A2 / (B1 * B2)))


def ssim_with_grad(a, b):
    """SSIM value and its gradient with respect to ``a``."""
    a_in = np.asarray(a)
    a, b = _check_pair(a, b)
    g, mu_a, mu_b, A1, A2, B1, B2 = _ssim_parts(a, b)
    S = A1 * A2 / (B1 * B2)
    n = S.size
    denom = B1 * B2
    d_mu_a = (2 * mu_b * A2 - 2 * mu_b * A1) / denom - S * (2 * mu_a / B1 - 2 * mu_a / B2)
    d_e_aa = -S / B2
    d_e_ab = 2 * A1 / denom
    grad = (
        _filter_valid_adjoint(d_mu_a, g, a.shape)
        + 2 * a * _filter_valid_adjoint(d_e_aa, g, a.shape)
        + b * _filter_valid_adjoint(d_e_ab, g, a.shape)
    ) / n
    return float(np.mean(S)), grad.reshape(a_in.shape)


# -- image losses ---------------------------------------------------------------


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def render_loss(pred, gt, ssim_weight: float):
    """``MSE(pred, gt) + ssim_weight * (1 - SSIM(pred, gt))`` and its gradient w.r.t. ``pred``.

    Also serves as the refinement loss when applied to the refined image.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"image shapes differ: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    value = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    if ssim_weight:
        s, ds = ssim_with_grad(pred, gt)
        value += ssim_weight * (1.0 - s)
        grad = grad - ssim_weight * ds
    return value, grad


refine_loss = render_loss


def psnr(a, b) -> float:
    err = mse(a, b)
    if err < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


# -- anchor ---------------------------------------------------------------------


@dataclass(frozen=True)
class Landmark:
    view_id: int
    landmark_id: int
    u: float
    v: float


@dataclass
class LandmarkSet:
    landmarks: list = field(default_factory=list)

    def in_view(self, view_id: int) -> dict:
        return {lm.landmark_id: lm for lm in self.landmarks if lm.view_id == view_id}

    def to_json(self) -> list:
        return [{"view_id": lm.view_id, "landmark_id": lm.landmark_id, "u": lm.u, "v": lm.v}
                for lm in self.landmarks]

    @classmethod
    def from_json(cls, items) -> "LandmarkSet":
        return cls([Landmark(int(d["view_id"]), int(d["landmark_id"]), float(d["u"]), float(d["v"]))
                    for d in items])


@dataclass
class AnchorResult:
    value: float
    opacity_term: float
    scale_term: float
    landmark_term: float
    d_opacities: list  # per view, (N_i,)
    d_scales: list  # per view, (N_i, 3)
    d_depth: list  # per view, (H, W) gradient w.r.t. depth at landmark pixels
    distances: dict  # (view_i, view_j, landmark_id) -> Dist


def landmark_points(cam: CameraModel, pos_map: PositionMap, lm: Landmark):
    """World point for a landmark, its depth, pixel index and d(point)/d(depth)."""
    col = min(max(int(math.floor(lm.u)), 0), cam.width - 1)
    row = min(max(int(math.floor(lm.v)), 0), cam.height - 1)
    if not pos_map.foreground_mask[row, col]:
        return None
    depth = float(cam.world_to_camera(pos_map.positions[row, col])[2])
    point = cam.unproject(lm.u, lm.v, depth)
    ray = cam.ray_directions(lm.u, lm.v)
    return point, depth, (row, col), ray


def anchor_loss(sets, cams, pos_maps, landmarks: LandmarkSet, weights: LossWeights) -> AnchorResult:
    """Opacity entropy + scale shrinkage + cross-view landmark distance with tolerance."""
    d_op, d_sc = [], []
    opacity_term = 0.0
    scale_term = 0.0
    for gs in sets:
        o = np.clip(gs.opacities, 1e-12, 1.0)
        # |o log o| = -o log o on (0, 1]
        opacity_term += float(np.sum(-o * np.log(o)))
        inner = (gs.opacities > 1e-12) & (gs.opacities <= 1.0)
        d_op.append(weights.opacity * np.where(inner, -(np.log(o) + 1.0), 0.0))
        norms = np.linalg.norm(gs.scales, axis=1)
        scale_term += float(np.sum(norms))
        safe = np.where(norms > 0, norms, 1.0)
        d_sc.append(weights.scale * np.where(norms[:, None] > 0, gs.scales / safe[:, None], 0.0))

    d_depth = [np.zeros(pm.shape) for pm in pos_maps]
    distances = {}
    landmark_term = 0.0
    t = weights.tolerance
    views = range(len(cams))
    for i in views:
        for j in views:
            if j <= i:
                continue
            li, lj = landmarks.in_view(i), landmarks.in_view(j)
            for lid in sorted(set(li) & set(lj)):
                pi = landmark_points(cams[i], pos_maps[i], li[lid])
                pj = landmark_points(cams[j], pos_maps[j], lj[lid])
                if pi is None or pj is None:
                    continue
                diff = pi[0] - pj[0]
                dist = float(np.linalg.norm(diff))
                distances[(i, j, lid)] = dist
                landmark_term += max(dist - t, 0.0) if weights.anchor_hinge else max(dist, t)
                if dist > t:
                    unit = diff / dist
                    d_depth[i][pi[2]] += float(unit @ pi[3])
                    d_depth[j][pj[2]] -= float(unit @ pj[3])
    if not distances:
        warnings.warn("NoMatchedLandmarks: landmark term skipped", RuntimeWarning, stacklevel=2)

    value = weights.opacity * opacity_term + weights.scale * scale_term + landmark_term
    return AnchorResult(value, opacity_term, scale_term, landmark_term, d_op, d_sc, d_depth, distances)


# -- total ----------------------------------------------------------------------


def total_loss(components: dict, weights: LossWeights) -> float:
    """``depth + l1 * render + l2 * refine + l3 * anchor``; missing components count as 0."""
    parts = {k: float(components.get(k, 0.0)) for k in ("depth", "render", "refine", "anchor")}
    unknown = set(components) - set(parts)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NonFiniteComponent(f"{name} loss is {value}")
    return (parts["depth"] + weights.render * parts["render"] + weights.refine * parts["refine"]
            + weights.anchor * parts["anchor"])
