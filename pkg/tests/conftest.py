import numpy as np
import pytest

from eva_splat.camera import CameraModel, DepthMap, depth_to_positions
from eva_splat.gaussians import GaussianSet, normalize_quaternions


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng, size=64, fx=None):
    """Camera about 3 m from the origin, looking at it from a random direction."""
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    up = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    f = fx or 0.9 * size * rng.uniform(0.9, 1.1)
    return CameraModel.look_at(3.0 * d, rng.uniform(-0.1, 0.1, 3), up, f, f * rng.uniform(0.95, 1.05), size, size)


def random_gaussians(rng, n, *, extent=0.8, scale=(0.02, 0.25), opacity=(0.05, 1.0), feature_dim=32):
    return GaussianSet.create(
        rng.uniform(-extent, extent, (n, 3)),
        rng.uniform(*opacity, n),
        rng.uniform(*scale, (n, 3)),
        normalize_quaternions(rng.standard_normal((n, 4))),
        rng.uniform(0, 1, (n, 3)),
        rng.uniform(-1, 1, (n, feature_dim)),
    )


def smooth_scene(rng, n=20, size=32):
    """Large soft footprints and low opacities: every alpha stays well above
    the skip threshold on-screen and transmittance never reaches the stop
    value, so the render is smooth in all parameters."""
    cam = CameraModel.look_at([0.3, -0.2, -3.0], [0, 0, 0], [0, 1, 0], fx=30, fy=31, width=size, height=size)
    gs = GaussianSet.create(
        rng.uniform(-0.4, 0.4, (n, 3)), rng.uniform(0.05, 0.35, n), rng.uniform(2.0, 3.0, (n, 3)),
        normalize_quaternions(rng.standard_normal((n, 4))), rng.uniform(0, 1, (n, 3)), rng.uniform(-1, 1, (n, 32)),
    )
    return cam, gs


def central_difference(f, x, idx, h):
    xp = x.copy()
    xm = x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def alignment_scene(rng, tilt_deg, size=64, scale_ratio=1e-3):
    """One opaque Gaussian per masked-in pixel of a tilted plane.

    The focal length is chosen so a Gaussian of scale ``scale_ratio * depth``
    has a one-pixel standard deviation on screen.
    """
    f = 1.0 / scale_ratio
    c = size / 2
    cam = CameraModel(fx=f, fy=f, cx=c, cy=c, width=size, height=size)
    vv, uu = np.mgrid[0:size, 0:size]
    d0 = rng.uniform(1.5, 4.0)
    phi = rng.uniform(0, 2 * np.pi)
    t = np.tan(np.radians(tilt_deg))
    xn, yn = (uu + 0.5 - c) / f, (vv + 0.5 - c) / f
    depth = d0 / (1 - t * (np.cos(phi) * xn + np.sin(phi) * yn))
    mask = (uu - c) ** 2 + (vv - c) ** 2 < rng.uniform(0.3, 0.47) ** 2 * size**2
    pts = depth_to_positions(cam, DepthMap(depth, mask)).positions[mask]
    s = scale_ratio * depth[mask]
    gs = GaussianSet.create(pts, np.ones(len(pts)), np.repeat(s[:, None], 3, axis=1))
    return cam, depth, mask, gs
