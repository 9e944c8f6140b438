"""Non-neural core of a feed-forward Gaussian splatting pipeline: camera
geometry, a tiled differentiable rasterizer, windowed cross-view attention
and the loss stack, each checked against a brute-force reference."""

from .camera import CameraModel, DepthMap, PositionMap, depth_to_positions
from .errors import EvaSplatError
from .gaussians import GaussianSet, merge_views, project_gaussian, project_gaussians
from .rasterizer import RenderTarget, oracle_render, render, render_backward

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "DepthMap",
    "EvaSplatError",
    "GaussianSet",
    "PositionMap",
    "RenderTarget",
    "depth_to_positions",
    "merge_views",
    "oracle_render",
    "project_gaussian",
    "project_gaussians",
    "render",
    "render_backward",
]
