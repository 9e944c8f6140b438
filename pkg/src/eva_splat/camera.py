"""Pinhole camera model and depth-map <-> position-map conversion.

Conventions (OpenCV): camera x right, y down, z forward. Pixel ``(u, v)``
has its center at the continuous coordinate ``(u + 0.5, v + 0.5)``. Depth
is camera-frame Z, not ray length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidCamera,
    NonPositiveDepth,
    PointBehindCamera,
)

MIN_DEPTH = 1e-9


def _world_to_cam(R, t, x, y, z):
    # Written elementwise so scalar and array callers round identically.
    xc = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
    yc = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
    zc = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
    return xc, yc, zc


def _cam_to_world(R, t, xc, yc, zc):
    dx, dy, dz = xc - t[0], yc - t[1], zc - t[2]
    x = R[0, 0] * dx + R[1, 0] * dy + R[2, 0] * dz
    y = R[0, 1] * dx + R[1, 1] * dy + R[2, 1] * dz
    z = R[0, 2] * dx + R[1, 2] * dy + R[2, 2] * dz
    return x, y, z


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCamera(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidCamera("principal point must lie inside the image")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0.0):
            raise InvalidCamera("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidCamera("rotation determinant is not +1")

    # -- construction -------------------------------------------------------

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None):
        """Camera at ``eye`` whose optical axis points at ``target``.

        ``up`` is the world direction that should appear toward the top of
        the image (i.e. opposite to camera +y).
        """
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        # Re-orthonormalize to keep the 1e-9 invariant under accumulated rounding.
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        t = -R @ eye
        return cls(
            fx=fx,
            fy=fy,
            cx=width / 2.0 if cx is None else cx,
            cy=height / 2.0 if cy is None else cy,
            width=width,
            height=height,
            rotation=R,
            translation=t,
        )

    # -- derived quantities -------------------------------------------------

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2].copy()

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_to_camera(self, points):
        """Transform ``(..., 3)`` world points into the camera frame."""
        p = np.asarray(points, dtype=np.float64)
        xc, yc, zc = _world_to_cam(self.rotation, self.translation, p[..., 0], p[..., 1], p[..., 2])
        return np.stack([xc, yc, zc], axis=-1)

    def camera_to_world(self, points):
        p = np.asarray(points, dtype=np.float64)
        x, y, z = _cam_to_world(self.rotation, self.translation, p[..., 0], p[..., 1], p[..., 2])
        return np.stack([x, y, z], axis=-1)

    def ray_directions(self, u, v):
        """World-space direction scaled so that one unit of depth moves one unit of Z.

        ``unproject(u, v, d) == center + d * ray_directions(u, v)`` up to rounding.
        """
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return d_cam @ self.rotation

    # -- projection ---------------------------------------------------------

    def project(self, point) -> tuple[float, float, float]:
        x, y, z = (float(c) for c in point)
        xc, yc, zc = _world_to_cam(self.rotation, self.translation, x, y, z)
        if zc <= MIN_DEPTH:
            raise PointBehindCamera(f"camera-frame depth {zc} <= {MIN_DEPTH}")
        return self.fx * xc / zc + self.cx, self.fy * yc / zc + self.cy, zc

    def project_points(self, points):
        """Vectorized :meth:`project`; returns ``(u, v, depth)`` arrays."""
        p = np.asarray(points, dtype=np.float64)
        xc, yc, zc = _world_to_cam(self.rotation, self.translation, p[..., 0], p[..., 1], p[..., 2])
        if np.any(zc <= MIN_DEPTH):
            raise PointBehindCamera("at least one point is behind the camera")
        return self.fx * xc / zc + self.cx, self.fy * yc / zc + self.cy, zc

    def unproject(self, u: float, v: float, depth: float) -> np.ndarray:
        if not depth > 0:
            raise NonPositiveDepth(f"depth must be > 0, got {depth}")
        u, v, depth = float(u), float(v), float(depth)
        xc = (u - self.cx) / self.fx * depth
        yc = (v - self.cy) / self.fy * depth
        return np.array(_cam_to_world(self.rotation, self.translation, xc, yc, depth))

    def unproject_points(self, u, v, depth) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        if np.any(~(depth > 0)):
            raise NonPositiveDepth("all depths must be > 0")
        xc = (u - self.cx) / self.fx * depth
        yc = (v - self.cy) / self.fy * depth
        return np.stack(_cam_to_world(self.rotation, self.translation, xc, yc, depth), axis=-1)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        Rt = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "world_to_camera": [float(x) for x in Rt.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            Rt = np.asarray(d["world_to_camera"], dtype=np.float64)
            if Rt.size != 12:
                raise InvalidCamera("world_to_camera must hold 12 numbers")
            Rt = Rt.reshape(3, 4)
            return cls(
                fx=float(d["fx"]),
                fy=float(d["fy"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                width=int(d["width"]),
                height=int(d["height"]),
                rotation=Rt[:, :3],
                translation=Rt[:, 3],
            )
        except KeyError as exc:
            raise InvalidCamera(f"missing camera field {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "CameraModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    foreground_mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.foreground_mask, dtype=bool)
        if values.shape != mask.shape or values.ndim != 2:
            raise DimensionMismatch("depth values and mask must be matching 2D grids")
        inside = values[mask]
        if not np.all(np.isfinite(inside) & (inside > 0)):
            raise NonPositiveDepth("masked-in depth values must be finite and > 0")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "foreground_mask", mask)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class PositionMap:
    """Per-pixel world positions. Masked-out entries hold NaN."""

    positions: np.ndarray
    foreground_mask: np.ndarray

    @property
    def shape(self):
        return self.foreground_mask.shape

    def depth_in(self, cam: CameraModel) -> np.ndarray:
        """Camera-frame Z of every position (NaN where masked out)."""
        return cam.world_to_camera(self.positions)[..., 2]


def depth_to_positions(cam: CameraModel, depth: DepthMap) -> PositionMap:
    H, W = depth.shape
    if (H, W) != (cam.height, cam.width):
        raise DimensionMismatch(f"depth map is {W}x{H}, camera is {cam.width}x{cam.height}")
    mask = depth.foreground_mask
    vv, uu = np.nonzero(mask)
    d = depth.values[vv, uu]
    u = uu + 0.5
    v = vv + 0.5
    xc = (u - cam.cx) / cam.fx * d
    yc = (v - cam.cy) / cam.fy * d
    x, y, z = _cam_to_world(cam.rotation, cam.translation, xc, yc, d)
    positions = np.full((H, W, 3), np.nan)
    positions[vv, uu, 0] = x
    positions[vv, uu, 1] = y
    positions[vv, uu, 2] = z
    return PositionMap(positions=positions, foreground_mask=mask.copy())
