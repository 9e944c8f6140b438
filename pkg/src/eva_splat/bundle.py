"""Scene bundle directories: cameras/, images/, depth/, masks/, gaussians.evgs, landmarks.json."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .camera import CameraModel, DepthMap
from .errors import BundleNotFound, FormatError
from .io import (read_feature_plane, read_gaussians, read_mask_png, read_pfm, read_png, write_feature_plane,
                 write_gaussians, write_json, write_mask_png, write_pfm, write_png)
from .losses import LandmarkSet
from .pipeline import SyntheticScene


def _name(view: int) -> str:
    return f"view_{view:03d}"


def save_bundle(scene: SyntheticScene, root) -> list:
    """Write ``scene`` under ``root``; returns the written paths relative to it.

    Images go out twice: sRGB PNG for viewing and a lossless linear f32 dump
    that every reader prefers.
    """
    root = Path(root)
    written = []

    def track(rel):
        written.append(rel)
        return root / rel

    for v, cam in enumerate(scene.cameras):
        n = _name(v)
        write_json(track(f"cameras/{n}.json"), cam.to_dict())
        write_png(track(f"images/{n}.png"), scene.images[v])
        write_feature_plane(track(f"images/{n}.evfp"), scene.images[v])
        write_pfm(track(f"depth/{n}.pfm"), scene.depths[v].values)
        write_mask_png(track(f"masks/{n}.png"), scene.depths[v].foreground_mask)
    write_gaussians(track("gaussians.evgs"), scene.gaussians)
    write_json(track("landmarks.json"), scene.landmarks.to_json())
    write_json(track("scene.json"), {
        "seed": scene.seed, "delta_deg": scene.delta_deg, "n_views": scene.n_views,
        "face_ids": [int(i) for i in scene.face_ids],
    })
    return written


def load_bundle(root) -> SyntheticScene:
    root = Path(root)
    cam_dir = root / "cameras"
    if not root.is_dir() or not cam_dir.is_dir():
        raise BundleNotFound(f"no scene bundle at {root}")
    names = sorted(p.stem for p in cam_dir.glob("*.json"))
    if not names:
        raise BundleNotFound(f"{cam_dir} holds no cameras")
    cams, images, depths = [], [], []
    for n in names:
        cams.append(CameraModel.load(cam_dir / f"{n}.json"))
        lossless = root / "images" / f"{n}.evfp"
        if lossless.exists():
            images.append(read_feature_plane(lossless).astype(np.float64))
        else:
            images.append(read_png(root / "images" / f"{n}.png"))
        try:
            values = read_pfm(root / "depth" / f"{n}.pfm").astype(np.float64)
            mask = read_mask_png(root / "masks" / f"{n}.png")
        except FileNotFoundError as exc:
            raise FormatError(f"bundle view {n} is incomplete: {exc}") from exc
        depths.append(DepthMap(np.where(mask, values, 0.0), mask))
    gs_path = root / "gaussians.evgs"
    gaussians = read_gaussians(gs_path) if gs_path.exists() else None
    lm_path = root / "landmarks.json"
    landmarks = LandmarkSet.from_json(json.loads(lm_path.read_text())) if lm_path.exists() else LandmarkSet()
    meta_path = root / "scene.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return SyntheticScene(gaussians, cams, images, [], depths, [], landmarks,
                          np.asarray(meta.get("face_ids", []), dtype=np.int64),
                          int(meta.get("seed", 0)), float(meta.get("delta_deg", 0.0)))
