"""File codecs: PFM depth, sRGB PNG, EVFP feature planes, EVGS Gaussian sets,
attention parameter checkpoints. Writers go through a temp file and rename."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .gaussians import FEATURE_DIM, GaussianSet

EVGS_MAGIC = b"EVGS"
EVGS_VERSION = 1
EVFP_MAGIC = b"EVFP"
_EVGS_ORDER = ("positions", "opacities", "scales", "quaternions", "colors", "features")


@contextmanager
def atomic_open(path, mode="wb"):
    """Write to a sibling temp file, rename over ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    with atomic_open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- PFM --------------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM (scale -1.0), rows stored bottom-to-top."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = b"Pf\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF\n"
    else:
        raise FormatError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    with atomic_open(path) as fh:
        fh.write(header)
        fh.write(f"{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        scale = float(fh.readline().strip())
        w, h = int(dims[0]), int(dims[1])
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 1 if kind == b"Pf" else 3
        raw = np.frombuffer(fh.read(), dtype=dtype)
    if raw.size != w * h * channels:
        raise FormatError(f"{path}: expected {w * h * channels} values, found {raw.size}")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return raw.reshape(shape)[::-1].astype(np.float32)


# -- PNG --------------------------------------------------------------------------


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def write_png(path, image: np.ndarray, *, srgb: bool = True) -> None:
    img = np.asarray(image, dtype=np.float64)
    if srgb:
        img = linear_to_srgb(img)
    img8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with atomic_open(path) as fh:
        Image.fromarray(img8).save(fh, format="PNG")


def read_png(path, *, srgb: bool = True) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=np.float64) / 255.0
    return srgb_to_linear(arr) if srgb else arr


def write_mask_png(path, mask: np.ndarray) -> None:
    write_png(path, np.asarray(mask, dtype=np.float64), srgb=False)


def read_mask_png(path) -> np.ndarray:
    return read_png(path, srgb=False) > 0.5


# -- EVFP feature / f32 image planes ---------------------------------------------


def write_feature_plane(path, data: np.ndarray) -> None:
    """16-byte header (magic, H, W, C as u32) followed by little-endian f32 data."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        data = data[..., None]
    h, w, c = data.shape
    with atomic_open(path) as fh:
        fh.write(EVFP_MAGIC + struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_feature_plane(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != EVFP_MAGIC:
        raise FormatError(f"{path}: bad EVFP magic")
    h, w, c = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != h * w * c:
        raise FormatError(f"{path}: truncated feature plane")
    return data.reshape(h, w, c).astype(np.float32)


def read_image(path) -> np.ndarray:
    """Linear float image from a PNG or an EVFP f32 dump."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == EVFP_MAGIC:
        return read_feature_plane(path).astype(np.float64)
    return read_png(path)


# -- EVGS Gaussian sets -------------------------------------------------------------


def write_gaussians(path, gs: GaussianSet) -> None:
    """Header (magic, u32 version, u64 count), then f32 columns in file order."""
    with atomic_open(path) as fh:
        fh.write(EVGS_MAGIC + struct.pack("<IQ", EVGS_VERSION, len(gs)))
        for name in _EVGS_ORDER:
            fh.write(np.ascontiguousarray(getattr(gs, name), dtype="<f4").tobytes())


def read_gaussians(path, feature_dim: int = FEATURE_DIM) -> GaussianSet:
    """The feature width is implied by the file size; ``feature_dim`` is only
    used for empty sets."""
    raw = Path(path).read_bytes()
    if raw[:4] != EVGS_MAGIC:
        raise FormatError(f"{path}: bad EVGS magic")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    version, n = struct.unpack("<IQ", raw[4:16])
    if version != EVGS_VERSION:
        raise FormatError(f"{path}: unsupported EVGS version {version}")
    body = len(raw) - 16
    fixed = 3 + 1 + 3 + 4 + 3
    if n == 0:
        if body:
            raise FormatError(f"{path}: payload present for an empty set")
        return GaussianSet.empty(feature_dim)
    if body % (4 * n) or body // (4 * n) < fixed:
        raise FormatError(f"{path}: {body} payload bytes do not fit {n} Gaussians")
    widths = dict(zip(_EVGS_ORDER, (3, 1, 3, 4, 3, body // (4 * n) - fixed)))
    offset = 16
    cols = {}
    for name, k in widths.items():
        arr = np.frombuffer(raw, dtype="<f4", count=n * k, offset=offset).astype(np.float64)
        offset += 4 * n * k
        cols[name] = arr.reshape(n) if name == "opacities" else arr.reshape(n, k)
    return GaussianSet(**cols)


def gaussians_to_json(gs: GaussianSet) -> dict:
    if len(gs) >= 10_000:
        raise FormatError("JSON export is limited to fewer than 10^4 Gaussians")
    return {name: arr.tolist() for name, arr in gs.columns().items()}


def gaussians_from_json(d: dict) -> GaussianSet:
    return GaussianSet(**{name: np.asarray(d[name], dtype=np.float64) for name in (
        "positions", "opacities", "scales", "quaternions", "colors", "features")})


# -- attention parameter checkpoints ---------------------------------------------


def save_eva_params(path, params) -> None:
    """Raw little-endian f32 blob plus a ``.json`` sidecar describing the arrays."""
    path = Path(path)
    meta = {"heads": params.heads, "window": params.window,
            "num_iterations": params.num_iterations, "arrays": []}
    with atomic_open(path) as fh:
        for name, arr in params.arrays().items():
            meta["arrays"].append({"name": name, "shape": list(arr.shape)})
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    write_json(path.with_suffix(path.suffix + ".json"), meta)


def load_eva_params(path):
    from .attention import EvaParams

    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = path.read_bytes()
    offset = 0
    arrays = {}
    for entry in meta["arrays"]:
        count = int(np.prod(entry["shape"]))
        arrays[entry["name"]] = np.frombuffer(raw, "<f4", count, offset).reshape(entry["shape"]).astype(np.float64)
        offset += 4 * count
    return EvaParams(**arrays, heads=meta["heads"], window=meta["window"], num_iterations=meta["num_iterations"])
