"""Time and memory cost of windowed vs full cross-view attention.

Peak bytes are measured with :mod:`tracemalloc` (numpy reports its buffers
to it) around a single forward call; inputs allocated beforehand are not
counted. Timing runs are separate so tracing overhead does not leak in.
"""

from __future__ import annotations

import csv
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np

from .attention import EvaParams, FeatureGrid, eva_forward, full_cross_view_attention
from .io import atomic_open

VARIANTS = {"eva_w16": 16, "eva_w32": 32, "eva_w64": 64, "full_cross_view": None}
# reference input sizes as (views, C, H, W)
DEFAULT_SHAPES = ((2, 64, 128, 128), (2, 64, 256, 256), (2, 32, 256, 256))
DEFAULT_BUDGET = 2 * 1024**3
CSV_FIELDS = ("variant", "views", "C", "H", "W", "window", "median_ms", "peak_bytes", "flop_count")


@dataclass
class CostReport:
    variant: str
    views: int
    channels: int
    height: int
    width: int
    window: int | None
    median_ms: float | None
    peak_bytes: int | None
    flop_count: int
    score_elements: int
    required_bytes: int
    status: str = "ok"

    def csv_row(self) -> dict:
        # over-budget cells are marked; untimed cells (deterministic runs) stay blank
        missing = "OOM-budget" if self.status == "OOM-budget" else ""
        return {
            "variant": self.variant,
            "views": self.views,
            "C": self.channels,
            "H": self.height,
            "W": self.width,
            "window": "" if self.window is None else self.window,
            "median_ms": missing if self.median_ms is None else f"{self.median_ms:.4f}",
            "peak_bytes": missing if self.peak_bytes is None else self.peak_bytes,
            "flop_count": self.flop_count,
        }

    def as_dict(self) -> dict:
        return asdict(self)


def score_elements(variant: str, shape, heads: int = 4) -> int:
    """Total attention-score entries over all heads and query views."""
    V, _, H, W = shape
    w = VARIANTS[variant]
    keys = (V - 1) * (H * W if w is None else min(w, W))
    return V * heads * H * W * keys


def score_block_bytes(variant: str, shape, heads: int = 4, itemsize: int = 4) -> int:
    """Largest score buffer alive at once: one query view (and one head for the full variant)."""
    V, _, H, W = shape
    w = VARIANTS[variant]
    if w is None:
        return H * W * (V - 1) * H * W * itemsize
    return H * W * heads * (V - 1) * min(w, W) * itemsize


def flop_count(variant: str, shape, heads: int = 4) -> int:
    V, C, H, W = shape
    d = C // heads
    E = score_elements(variant, shape, heads)
    projections = 4 * 2 * V * H * W * C * C
    return projections + 4 * d * E + 5 * E


def _workload(variant, shape, heads, seed, dtype):
    V, C, H, W = shape
    rng = np.random.default_rng(seed)
    grids = [FeatureGrid(i, rng.standard_normal((H, W, C)).astype(dtype)) for i in range(V)]
    window = VARIANTS[variant] or min(16, W)
    params = EvaParams.init(H, W, C, heads=heads, window=window, num_iterations=1, seed=seed,
                            dtype=dtype, check_window=False)
    if VARIANTS[variant] is None:
        return lambda: full_cross_view_attention(grids, params)
    return lambda: eva_forward(grids, params)


def measure_peak_bytes(fn) -> int:
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    result = fn()
    peak = tracemalloc.get_traced_memory()[1]
    del result
    if not was_tracing:
        tracemalloc.stop()
    return peak - base


def bench_attention(shape, variant: str, repeats: int = 3, *, heads: int = 4, seed: int = 0,
                    budget_bytes: int = DEFAULT_BUDGET, dtype=np.float32, timing: bool = True) -> CostReport:
    """Cost of one attention round on a deterministic random workload.

    Cells whose score buffer alone exceeds ``budget_bytes`` are not run and
    come back with ``status == "OOM-budget"`` and ``required_bytes`` set.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    V, C, H, W = (int(x) for x in shape)
    shape = (V, C, H, W)
    required = score_block_bytes(variant, shape, heads, np.dtype(dtype).itemsize)
    report = CostReport(
        variant=variant, views=V, channels=C, height=H, width=W, window=VARIANTS[variant],
        median_ms=None, peak_bytes=None, flop_count=flop_count(variant, shape, heads),
        score_elements=score_elements(variant, shape, heads), required_bytes=required,
    )
    if required > budget_bytes:
        report.status = "OOM-budget"
        return report
    fn = _workload(variant, shape, heads, seed, dtype)
    report.peak_bytes = measure_peak_bytes(fn)
    if timing:
        fn()  # warm-up
        times = []
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
        report.median_ms = statistics.median(times)
    return report


def run_grid(shapes=DEFAULT_SHAPES, variants=tuple(VARIANTS), repeats: int = 3, **kwargs) -> list[CostReport]:
    return [bench_attention(shape, v, repeats, **kwargs) for shape in shapes for v in variants]


def write_csv(reports, path) -> None:
    with atomic_open(path, "w") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(r.csv_row())
