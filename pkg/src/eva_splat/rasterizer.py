"""Depth-sorted, tile-based alpha blending of color, feature and depth channels.

``render`` is the production path (16x16 tiles, float32 accumulation).
``oracle_render`` evaluates every Gaussian at every pixel in float64 and
shares none of the projection or binning code with ``render``.
``render_backward`` is the exact adjoint of the blend with respect to every
column of the :class:`GaussianSet`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial.transform import Rotation

from . import _kernels as K
from .camera import CameraModel
from .errors import ImageTooLarge, InvalidGaussianSet, TooManyGaussiansForOracle
from .gaussians import (
    COV2D_BLUR,
    NEAR_PLANE,
    GaussianSet,
    ScreenSpace,
    merge_views,
    project_gaussians,
)

MAX_IMAGE_SIDE = 4096
ORACLE_MAX_GAUSSIANS = 10_000
TILE = K.TILE

__all__ = [
    "RenderTarget",
    "GradientBundle",
    "render",
    "oracle_render",
    "render_backward",
    "merge_views",
    "set_threads",
]


@dataclass
class RenderTarget:
    color: np.ndarray  # (H, W, 3)
    feature: np.ndarray  # (H, W, F)
    blended_depth: np.ndarray  # (H, W)
    final_transmittance: np.ndarray  # (H, W)
    # sum of blend weights; diagnostic only, not part of the adjoint
    weight_sum: np.ndarray | None = None

    @classmethod
    def zeros(cls, height: int, width: int, feature_dim: int, dtype=np.float64) -> "RenderTarget":
        return cls(
            np.zeros((height, width, 3), dtype),
            np.zeros((height, width, feature_dim), dtype),
            np.zeros((height, width), dtype),
            np.zeros((height, width), dtype),
            np.zeros((height, width), dtype),
        )

    @property
    def shape(self):
        return self.blended_depth.shape


@dataclass
class GradientBundle:
    d_position: np.ndarray
    d_opacity: np.ndarray
    d_scale: np.ndarray
    d_quaternion: np.ndarray
    d_color: np.ndarray
    d_feature: np.ndarray

    @classmethod
    def zeros_like(cls, gaussians: GaussianSet) -> "GradientBundle":
        return cls(*(np.zeros_like(getattr(gaussians, n)) for n in (
            "positions", "opacities", "scales", "quaternions", "colors", "features")))

    def as_dict(self) -> dict:
        return {
            "positions": self.d_position,
            "opacities": self.d_opacity,
            "scales": self.d_scale,
            "quaternions": self.d_quaternion,
            "colors": self.d_color,
            "features": self.d_feature,
        }

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(*(a + b for a, b in zip(self.as_dict().values(), other.as_dict().values())))


def set_threads(n: int | None = None) -> int:
    """Cap kernel worker threads (``EVA_SPLAT_THREADS`` is the fallback)."""
    if n is None:
        env = os.environ.get("EVA_SPLAT_THREADS")
        n = int(env) if env else numba.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def _check_inputs(gaussians: GaussianSet, cam: CameraModel, check: bool):
    if cam.width > MAX_IMAGE_SIDE or cam.height > MAX_IMAGE_SIDE:
        raise ImageTooLarge(f"{cam.width}x{cam.height} exceeds {MAX_IMAGE_SIDE}")
    if check:
        gaussians.validate()
    elif gaussians.features.ndim != 2:
        raise InvalidGaussianSet("features must be 2D")


@dataclass
class _Binning:
    screen: ScreenSpace
    order: np.ndarray
    active: np.ndarray
    tile_start: np.ndarray
    tile_gauss: np.ndarray
    tiles_x: int


def _bin(gaussians: GaussianSet, cam: CameraModel) -> _Binning:
    screen = project_gaussians(gaussians, cam)
    n = len(gaussians)
    # Opacity-aware extent: outside the ellipse q > 2 ln(255 o) the alpha is
    # below the skip threshold, so binning never drops a visible contribution.
    k = 2.0 * np.log(np.maximum(255.0 * gaussians.opacities, 1e-300))
    active = screen.valid & (k >= 0.0)
    k = np.maximum(k, 0.0)
    hx = np.sqrt(k * screen.cov2d[:, 0, 0])
    hy = np.sqrt(k * screen.cov2d[:, 1, 1])
    mx, my = screen.means[:, 0], screen.means[:, 1]
    with np.errstate(invalid="ignore"):
        px0 = np.clip(np.ceil(mx - hx - 0.5) - 1, 0, cam.width - 1)
        px1 = np.clip(np.floor(mx + hx - 0.5) + 1, -1, cam.width - 1)
        py0 = np.clip(np.ceil(my - hy - 0.5) - 1, 0, cam.height - 1)
        py1 = np.clip(np.floor(my + hy - 0.5) + 1, -1, cam.height - 1)
    px0, px1, py0, py1 = (a.astype(np.int64) for a in (px0, px1, py0, py1))
    px1[~active] = -1
    inside = (mx + hx >= 0) & (mx - hx <= cam.width) & (my + hy >= 0) & (my - hy <= cam.height)
    px1[~inside] = -1
    # stable sort on depth => ties broken by index
    order = np.argsort(np.where(screen.valid, screen.depths, np.inf), kind="stable").astype(np.int64)
    tiles_x = -(-cam.width // TILE)
    tiles_y = -(-cam.height // TILE)
    if n == 0:
        start, gauss = np.zeros(tiles_x * tiles_y + 1, np.int64), np.zeros(0, np.int64)
    else:
        start, gauss = K.bin_gaussians(order, px0, px1, py0, py1, tiles_x, tiles_x * tiles_y)
    return _Binning(screen, order, active, start, gauss, tiles_x)


def render(gaussians: GaussianSet, cam: CameraModel, background=(0.0, 0.0, 0.0), *, check: bool = True) -> RenderTarget:
    """Tiled forward render. Outputs are float32."""
    _check_inputs(gaussians, cam, check)
    H, W = cam.height, cam.width
    F = gaussians.features.shape[1]
    out = RenderTarget.zeros(H, W, F, np.float32)
    bg = np.asarray(background, dtype=np.float32).reshape(3)
    if len(gaussians) == 0:
        out.color[:] = bg
        out.final_transmittance[:] = 1.0
        return out
    b = _bin(gaussians, cam)
    K.forward_tiles(
        b.screen.means, b.screen.conics, gaussians.opacities,
        gaussians.colors.astype(np.float32), gaussians.features.astype(np.float32),
        b.screen.depths.astype(np.float32), bg,
        b.tile_start, b.tile_gauss, W, H, b.tiles_x,
        out.color, out.feature, out.blended_depth, out.final_transmittance, out.weight_sum,
    )
    return out


def _oracle_screen(gaussians: GaussianSet, cam: CameraModel):
    """Per-Gaussian projection written independently of ``project_gaussians``."""
    n = len(gaussians)
    means = np.zeros((n, 2))
    conics = np.zeros((n, 3))
    depths = np.zeros(n)
    keep = np.zeros(n, dtype=bool)
    W2C = cam.rotation
    for i in range(n):
        p_cam = W2C @ gaussians.positions[i] + cam.translation
        x, y, z = p_cam
        if z <= NEAR_PLANE:
            continue
        keep[i] = True
        depths[i] = z
        means[i] = (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy)
        w, qx, qy, qz = gaussians.quaternions[i]
        Rg = Rotation.from_quat([qx, qy, qz, w]).as_matrix()
        S = np.diag(gaussians.scales[i])
        sigma = Rg @ S @ S @ Rg.T
        J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]])
        cov = J @ W2C @ sigma @ W2C.T @ J.T + COV2D_BLUR * np.eye(2)
        inv = np.linalg.inv(cov)
        conics[i] = (inv[0, 0], 0.5 * (inv[0, 1] + inv[1, 0]), inv[1, 1])
    idx = np.flatnonzero(keep)
    order = idx[np.lexsort((idx, depths[idx]))]
    return means, conics, depths, order


def oracle_render(gaussians: GaussianSet, cam: CameraModel, background=(0.0, 0.0, 0.0), *, check: bool = True) -> RenderTarget:
    """Brute-force float64 reference of :func:`render` (no tiles, no culling)."""
    if len(gaussians) > ORACLE_MAX_GAUSSIANS:
        raise TooManyGaussiansForOracle(f"{len(gaussians)} > {ORACLE_MAX_GAUSSIANS}")
    _check_inputs(gaussians, cam, check)
    H, W = cam.height, cam.width
    F = gaussians.features.shape[1]
    out = RenderTarget.zeros(H, W, F, np.float64)
    means, conics, depths, order = _oracle_screen(gaussians, cam)
    K.oracle_blend(
        means, conics, gaussians.opacities, gaussians.colors, gaussians.features, depths,
        np.asarray(background, dtype=np.float64).reshape(3), order.astype(np.int64), W, H,
        out.color, out.feature, out.blended_depth, out.final_transmittance, out.weight_sum,
    )
    return out


def _adjoint_field(d_target, name, shape):
    value = getattr(d_target, name, None)
    if value is None:
        return np.zeros(shape)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != shape:
        raise InvalidGaussianSet(f"adjoint {name} has shape {value.shape}, expected {shape}")
    return np.ascontiguousarray(value)


def render_backward(gaussians: GaussianSet, cam: CameraModel, background, d_target: RenderTarget,
                    *, check: bool = True) -> GradientBundle:
    """Gradient of ``<d_target, render(gaussians)>`` with respect to every column."""
    _check_inputs(gaussians, cam, check)
    H, W = cam.height, cam.width
    n = len(gaussians)
    F = gaussians.features.shape[1]
    grads = GradientBundle.zeros_like(gaussians)
    if n == 0:
        return grads
    d_color = _adjoint_field(d_target, "color", (H, W, 3))
    d_feat = _adjoint_field(d_target, "feature", (H, W, F))
    d_depth = _adjoint_field(d_target, "blended_depth", (H, W))
    d_T = _adjoint_field(d_target, "final_transmittance", (H, W))

    b = _bin(gaussians, cam)
    s = b.screen
    P = b.tile_gauss.shape[0]
    g_mean = np.zeros((P, 2))
    g_conic = np.zeros((P, 3))
    g_op = np.zeros(P)
    g_col = np.zeros((P, 3))
    g_feat = np.zeros((P, F))
    g_dep = np.zeros(P)
    K.backward_tiles(
        s.means, s.conics, gaussians.opacities, gaussians.colors, gaussians.features, s.depths,
        np.asarray(background, dtype=np.float64).reshape(3),
        b.tile_start, b.tile_gauss, W, H, b.tiles_x,
        d_color, d_feat, d_depth, d_T,
        g_mean, g_conic, g_op, g_col, g_feat, g_dep,
    )
    # fixed-order reduction of per-(tile, entry) partials
    ids = b.tile_gauss
    d_mean = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_z = np.zeros(n)
    np.add.at(d_mean, ids, g_mean)
    np.add.at(d_conic, ids, g_conic)
    np.add.at(grads.d_opacity, ids, g_op)
    np.add.at(grads.d_color, ids, g_col)
    np.add.at(grads.d_feature, ids, g_feat)
    np.add.at(d_z, ids, g_dep)

    _chain_to_attributes(gaussians, cam, s, d_mean, d_conic, d_z, grads)
    return grads


def _chain_to_attributes(gaussians, cam, s: ScreenSpace, d_mean, d_conic, d_z, grads: GradientBundle):
    """Backpropagate screen-space gradients (mean, conic, depth) to position/scale/quaternion."""
    valid = s.valid
    x, y, z = s.t_cam[:, 0], s.t_cam[:, 1], np.where(valid, s.t_cam[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy

    # conic = inverse(cov2d); L depends on the symmetric off-diagonal through 2b
    a_, b_, c_ = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    dQ = np.stack([np.stack([a_, 0.5 * b_], -1), np.stack([0.5 * b_, c_], -1)], -2)
    ca, cb, cc = s.conics[:, 0], s.conics[:, 1], s.conics[:, 2]
    Q = np.stack([np.stack([ca, cb], -1), np.stack([cb, cc], -1)], -2)
    d_cov2d = -Q @ dQ @ Q

    # cov2d = T cov3d T^T + blur, T = J W
    Tm = s.jacobians @ cam.rotation
    d_cov3d = np.swapaxes(Tm, -1, -2) @ d_cov2d @ Tm
    d_T = 2.0 * d_cov2d @ Tm @ s.cov3d
    d_J = d_T @ cam.rotation.T

    d_tcam = np.zeros_like(s.t_cam)
    # mean_2d = (fx x/z + cx, fy y/z + cy)
    d_tcam[:, 0] += d_mean[:, 0] * fx / z
    d_tcam[:, 1] += d_mean[:, 1] * fy / z
    d_tcam[:, 2] += -(d_mean[:, 0] * fx * x + d_mean[:, 1] * fy * y) / z**2
    # J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
    d_tcam[:, 0] += -d_J[:, 0, 2] * fx / z**2
    d_tcam[:, 1] += -d_J[:, 1, 2] * fy / z**2
    d_tcam[:, 2] += (
        -d_J[:, 0, 0] * fx / z**2
        + d_J[:, 0, 2] * 2.0 * fx * x / z**3
        - d_J[:, 1, 1] * fy / z**2
        + d_J[:, 1, 2] * 2.0 * fy * y / z**3
    )
    d_tcam[:, 2] += d_z
    d_tcam[~valid] = 0.0
    grads.d_position[:] = d_tcam @ cam.rotation

    # cov3d = R diag(s^2) R^T
    R = s.rotations
    sc = gaussians.scales
    d_cov3d = 0.5 * (d_cov3d + np.swapaxes(d_cov3d, -1, -2))
    d_cov3d[~valid] = 0.0
    grads.d_scale[:] = 2.0 * sc * np.einsum("nji,njk,nki->ni", R, d_cov3d, R)
    d_R = 2.0 * d_cov3d @ R * (sc**2)[:, None, :]
    grads.d_quaternion[:] = _rotation_to_quaternion_grad(gaussians.quaternions, d_R)


def _rotation_to_quaternion_grad(q, d_R):
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    g = d_R
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    d_qn = np.stack([dw, dx, dy, dz], axis=1)
    # through q / |q|
    return (d_qn - qn * np.sum(qn * d_qn, axis=1, keepdims=True)) / norm
