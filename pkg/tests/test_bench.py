import csv

import numpy as np
import pytest

from eva_splat.bench import (
    CSV_FIELDS,
    VARIANTS,
    bench_attention,
    measure_peak_bytes,
    run_grid,
    score_block_bytes,
    score_elements,
    write_csv,
)

WIDTHS = (64, 128, 256, 512)


def loglog_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


class TestCounts:
    @pytest.mark.parametrize("W", [64, 128, 256])
    def test_doubling_width(self, W):
        a, b = (2, 64, 32, W), (2, 64, 32, 2 * W)
        for v in ("eva_w16", "eva_w32", "eva_w64"):
            assert score_elements(v, b) == 2 * score_elements(v, a)
        assert score_elements("full_cross_view", b) == 4 * score_elements("full_cross_view", a)

    def test_score_elements_formula(self):
        assert score_elements("eva_w32", (3, 8, 4, 64)) == 3 * 4 * 4 * 64 * 2 * 32
        assert score_elements("full_cross_view", (2, 8, 4, 16)) == 2 * 4 * 64 * 64

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            bench_attention((2, 8, 4, 64), "eva_w8")


class TestMeasurement:
    def test_peak_bytes_tracks_allocation(self):
        peak = measure_peak_bytes(lambda: np.ones(1_000_000))
        assert 8_000_000 <= peak < 9_000_000

    def test_memory_slopes(self):
        eva = [bench_attention((2, 8, 16, W), "eva_w32", timing=False).peak_bytes for W in WIDTHS]
        full = [bench_attention((2, 8, 16, W), "full_cross_view", timing=False).peak_bytes for W in WIDTHS]
        assert abs(loglog_slope(WIDTHS, eva) - 1.0) <= 0.15
        assert abs(loglog_slope(WIDTHS, full) - 2.0) <= 0.15

    def test_measured_full_cell_exceeds_its_score_block(self):
        r = bench_attention((2, 8, 16, 128), "full_cross_view", timing=False)
        assert r.peak_bytes >= score_block_bytes("full_cross_view", (2, 8, 16, 128))

    def test_ordering_where_both_run(self):
        shape = (2, 64, 128, 128)
        eva = bench_attention(shape, "eva_w32", timing=False)
        full = bench_attention(shape, "full_cross_view", timing=False)
        assert full.peak_bytes >= 5 * eva.peak_bytes

    def test_over_budget_is_reported_not_run(self):
        r = bench_attention((2, 64, 256, 256), "full_cross_view")
        assert r.status == "OOM-budget"
        assert r.peak_bytes is None and r.median_ms is None
        assert r.required_bytes == 256**4 * 4
        row = r.csv_row()
        assert row["median_ms"] == "OOM-budget" and row["peak_bytes"] == "OOM-budget"

    def test_timing_disabled_leaves_blank(self):
        r = bench_attention((2, 8, 4, 64), "eva_w16", timing=False)
        assert r.median_ms is None and r.csv_row()["median_ms"] == ""

    def test_timing_enabled(self):
        r = bench_attention((2, 8, 4, 64), "eva_w16", repeats=2)
        assert r.median_ms > 0


class TestCSV:
    def test_round_trip(self, tmp_path):
        reports = run_grid(shapes=((2, 8, 4, 64),), timing=False)
        assert [r.variant for r in reports] == list(VARIANTS)
        path = tmp_path / "cost.csv"
        write_csv(reports, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == CSV_FIELDS
        assert [r["variant"] for r in rows] == list(VARIANTS)
        assert rows[-1]["window"] == ""
        assert all(int(r["flop_count"]) > 0 for r in rows)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["cost.csv"]
