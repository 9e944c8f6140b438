"""Columnar 3D Gaussian container, covariance construction and EWA projection.

A :class:`GaussianSet` always holds post-activation values: opacities in
[0, 1], strictly positive scales, unit quaternions ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraModel
from .errors import BehindCamera, EmptyInput, InvalidGaussianSet, ZeroQuaternion

FEATURE_DIM = 32
NEAR_PLANE = 1e-4
COV2D_BLUR = 0.3
_COLUMNS = ("positions", "opacities", "scales", "quaternions", "colors", "features")


@dataclass(frozen=True, eq=False)
class GaussianSet:
    positions: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    scales: np.ndarray  # (N, 3)
    quaternions: np.ndarray  # (N, 4)
    colors: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, F)

    def __post_init__(self):
        for name in _COLUMNS:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls, feature_dim: int = FEATURE_DIM) -> "GaussianSet":
        return cls(
            np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)),
            np.zeros((0, 3)), np.zeros((0, feature_dim)),
        )

    @classmethod
    def create(cls, positions, opacities, scales, quaternions=None, colors=None, features=None,
               feature_dim: int = FEATURE_DIM) -> "GaussianSet":
        """Build a validated set, filling omitted columns with neutral defaults."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        if quaternions is None:
            quaternions = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if colors is None:
            colors = np.full((n, 3), 0.5)
        if features is None:
            features = np.zeros((n, feature_dim))
        gs = cls(positions, opacities, scales, quaternions, colors, features)
        gs.validate()
        return gs

    def validate(self) -> None:
        n = len(self)
        shapes = {
            "positions": (n, 3),
            "opacities": (n,),
            "scales": (n, 3),
            "quaternions": (n, 4),
            "colors": (n, 3),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise InvalidGaussianSet(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InvalidGaussianSet(f"features has shape {self.features.shape}")
        for name in _COLUMNS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidGaussianSet(f"{name} contains non-finite values")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise InvalidGaussianSet("opacities must lie in [0, 1]")
        if np.any((self.colors < 0) | (self.colors > 1)):
            raise InvalidGaussianSet("colors must lie in [0, 1]")
        if np.any(self.scales <= 0):
            raise InvalidGaussianSet("scales must be strictly positive")
        if np.any(np.abs(np.linalg.norm(self.quaternions, axis=1) - 1.0) > 1e-6):
            raise InvalidGaussianSet("quaternions must be unit norm (1e-6)")

    def replace(self, **columns) -> "GaussianSet":
        data = {name: getattr(self, name) for name in _COLUMNS}
        data.update(columns)
        return GaussianSet(**data)

    def subset(self, index) -> "GaussianSet":
        return GaussianSet(**{name: getattr(self, name)[index] for name in _COLUMNS})

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{name: getattr(self, name).copy() for name in _COLUMNS})

    def columns(self) -> dict:
        return {name: getattr(self, name) for name in _COLUMNS}


def normalize_quaternions(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ZeroQuaternion("quaternion has zero norm")
    return q / norm


def quaternion_to_rotation(q) -> np.ndarray:
    """Rotation matrices for ``(..., 4)`` quaternions (normalized internally)."""
    w, x, y, z = np.moveaxis(normalize_quaternions(q), -1, 0)
    R = np.empty(w.shape + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_multiply(q1, q2) -> np.ndarray:
    w1, x1, y1, z1 = np.moveaxis(np.asarray(q1, dtype=np.float64), -1, 0)
    w2, x2, y2, z2 = np.moveaxis(np.asarray(q2, dtype=np.float64), -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def covariance_3d(scale, quaternion) -> np.ndarray:
    """``R diag(s)^2 R^T`` for one or many Gaussians."""
    R = quaternion_to_rotation(quaternion)
    M = R * np.asarray(scale, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass(frozen=True)
class ProjectedGaussian:
    mean_2d: np.ndarray
    cov_2d: np.ndarray
    depth: float
    radius: float


def _projection_jacobian(cam: CameraModel, t_cam):
    x, y, z = t_cam[..., 0], t_cam[..., 1], t_cam[..., 2]
    J = np.zeros(t_cam.shape[:-1] + (2, 3))
    J[..., 0, 0] = cam.fx / z
    J[..., 0, 2] = -cam.fx * x / (z * z)
    J[..., 1, 1] = cam.fy / z
    J[..., 1, 2] = -cam.fy * y / (z * z)
    return J


def project_gaussian(cam: CameraModel, position, scale, quaternion) -> ProjectedGaussian:
    t_cam = cam.world_to_camera(np.asarray(position, dtype=np.float64))
    if t_cam[2] <= NEAR_PLANE:
        raise BehindCamera(f"camera-frame depth {t_cam[2]} <= near plane {NEAR_PLANE}")
    u, v, depth = cam.project(position)
    T = _projection_jacobian(cam, t_cam) @ cam.rotation
    cov = T @ covariance_3d(scale, quaternion) @ T.T + COV2D_BLUR * np.eye(2)
    cov = 0.5 * (cov + cov.T)
    radius = 3.0 * np.sqrt(np.linalg.eigvalsh(cov).max())
    return ProjectedGaussian(np.array([u, v]), cov, depth, float(radius))


@dataclass
class ScreenSpace:
    """Vectorized projection of a whole set, plus what the backward pass needs."""

    valid: np.ndarray  # (N,) in front of the near plane
    t_cam: np.ndarray  # (N, 3)
    means: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2), regularized
    conics: np.ndarray  # (N, 3) upper triangle of cov2d^-1: (a, b, c)
    depths: np.ndarray  # (N,)
    radii: np.ndarray  # (N,) 3-sigma radius
    cov3d: np.ndarray  # (N, 3, 3)
    rotations: np.ndarray  # (N, 3, 3) from normalized quaternions
    jacobians: np.ndarray  # (N, 2, 3)


def project_gaussians(gaussians: GaussianSet, cam: CameraModel) -> ScreenSpace:
    t_cam = cam.world_to_camera(gaussians.positions)
    valid = t_cam[:, 2] > NEAR_PLANE
    z = np.where(valid, t_cam[:, 2], 1.0)
    safe = t_cam.copy()
    safe[:, 2] = z
    means = np.stack([cam.fx * safe[:, 0] / z + cam.cx, cam.fy * safe[:, 1] / z + cam.cy], axis=1)
    R = quaternion_to_rotation(gaussians.quaternions) if len(gaussians) else np.zeros((0, 3, 3))
    M = R * gaussians.scales[:, None, :]
    cov3d = M @ np.swapaxes(M, -1, -2)
    J = _projection_jacobian(cam, safe)
    T = J @ cam.rotation
    cov2d = T @ cov3d @ np.swapaxes(T, -1, -2)
    cov2d[:, 0, 0] += COV2D_BLUR
    cov2d[:, 1, 1] += COV2D_BLUR
    a, b, c = cov2d[:, 0, 0], 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0]), cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radii = 3.0 * np.sqrt(lam_max)
    return ScreenSpace(valid, t_cam, means, cov2d, conics, t_cam[:, 2].copy(), radii, cov3d, R, J)


def merge_views(sets) -> GaussianSet:
    """Concatenate per-view sets, keeping each set's internal order."""
    sets = list(sets)
    if not sets:
        raise EmptyInput("merge_views needs at least one set")
    return GaussianSet(**{
        name: np.concatenate([getattr(s, name) for s in sets], axis=0) for name in _COLUMNS
    })
