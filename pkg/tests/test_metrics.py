import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liveseg import rle
from liveseg.autodiff import DimensionError
from liveseg.metrics import (aggregate, boundary_f, boundary_pixels,
                             default_boundary_tolerance, iou, report_digest)


def mask_from_bits(bits, shape):
    return np.array(bits, dtype=bool).reshape(shape)


class TestIoU:
    def test_identical(self):
        m = np.zeros((4, 4), bool)
        m[1:3, 1:3] = True
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0] = True
        b[3, 3] = True
        assert iou(a, b) == 0.0

    def test_hand_case(self):
        a = np.zeros((1, 3), bool)
        b = np.zeros((1, 3), bool)
        a[0, [0, 1]] = True
        b[0, [1, 2]] = True
        assert iou(a, b) == pytest.approx(1 / 3)

    def test_both_empty(self):
        assert iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            iou(np.zeros((2, 2), bool), np.zeros((3, 3), bool))

    @given(st.integers(0, 2 ** 16 - 1), st.integers(0, 2 ** 16 - 1))
    @settings(max_examples=60, deadline=None)
    def test_symmetry_and_bounds(self, abits, bbits):
        a = mask_from_bits([(abits >> i) & 1 for i in range(16)], (4, 4))
        b = mask_from_bits([(bbits >> i) & 1 for i in range(16)], (4, 4))
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert iou(a, a) == 1.0

    def test_monotone_under_shared_pixels(self):
        rng = np.random.default_rng(0)
        a = rng.random((6, 6)) > 0.6
        b = rng.random((6, 6)) > 0.6
        base = iou(a, b)
        grown_a, grown_b = a.copy(), b.copy()
        free = np.argwhere(~a & ~b)
        if len(free):
            r, c = free[0]
            grown_a[r, c] = grown_b[r, c] = True
            assert iou(grown_a, grown_b) >= base


class TestBoundaryF:
    def test_identical(self):
        m = np.zeros((10, 10), bool)
        m[2:7, 3:8] = True
        assert boundary_f(m, m) == 1.0

    def test_empty_vs_nonempty(self):
        gt = np.zeros((10, 10), bool)
        gt[2:5, 2:5] = True
        assert boundary_f(np.zeros((10, 10), bool), gt) == 0.0
        assert boundary_f(np.zeros((10, 10), bool), np.zeros((10, 10), bool)) == 1.0

    def test_shifted_square_within_tolerance(self):
        # brute-force oracle: every boundary pixel of the shifted square is
        # within Chebyshev distance 1 of the original's boundary
        a = np.zeros((12, 12), bool)
        b = np.zeros((12, 12), bool)
        a[3:8, 3:8] = True
        b[4:9, 3:8] = True
        pa = np.argwhere(boundary_pixels(a))
        pb = np.argwhere(boundary_pixels(b))
        cheby = lambda p, qs: min(max(abs(p[0] - q[0]), abs(p[1] - q[1])) for q in qs)
        assert max(cheby(p, pa) for p in pb) <= 1
        assert boundary_f(b, a, tol=1) == 1.0

    def test_boundary_includes_image_border(self):
        full = np.ones((6, 6), bool)
        bp = boundary_pixels(full)
        assert bp[0].all() and bp[-1].all() and bp[:, 0].all() and bp[:, -1].all()
        assert not bp[2:4, 2:4].any()

    def test_default_tolerance_at_96(self):
        assert default_boundary_tolerance((96, 96)) == 2

    def test_identity_on_seeded_family(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            m = rng.random((16, 16)) > rng.uniform(0.3, 0.7)
            assert boundary_f(m, m) == 1.0


class TestRle:
    def test_round_trip_hand(self):
        m = np.zeros((3, 4), bool)
        m[0, 1:3] = True
        m[2, :] = True
        runs = rle.encode(m)
        assert sum(runs) == 12
        assert np.array_equal(rle.decode(runs, (3, 4)), m)

    def test_leading_foreground(self):
        m = np.ones((2, 2), bool)
        assert rle.encode(m)[0] == 0

    @given(st.integers(0, 2 ** 20 - 1))
    @settings(max_examples=80, deadline=None)
    def test_round_trip_random(self, bits):
        m = mask_from_bits([(bits >> i) & 1 for i in range(20)], (4, 5))
        assert np.array_equal(rle.decode(rle.encode(m), (4, 5)), m)

    def test_bad_sum_rejected(self):
        with pytest.raises(ValueError):
            rle.decode([3, 3], (2, 2))


def make_report(stream_id, seed, corrections, user_ms, train_ms=0, j=0.9):
    return {"stream_id": stream_id, "seed": seed,
            "totals": {"corrections": corrections, "clicks": 2 * corrections,
                       "escalations": 0, "adapter_accepted": 0,
                       "user_ms": user_ms, "train_ms": train_ms},
            "metrics": {"mean_j": j, "mean_f": j - 0.05}}


class TestAggregate:
    def test_reduction_matches_reference_ratio(self):
        # 27.43 -> 18.24 corrections is reported as a 33.51% reduction; the
        # two-decimal inputs land at 33.503%, so allow the rounding slack
        base = [make_report("v", 1, 2743, 10_000)]
        treat = [make_report("v", 1, 1824, 9_000)]
        table = aggregate(base, treat)
        assert table["summary"]["corrections_reduction"] == pytest.approx(0.3351, abs=2e-4)

    def test_equal_reports_zero_reduction(self):
        reports = [make_report("a", 1, 5, 1000), make_report("b", 2, 7, 2000)]
        table = aggregate(reports, [dict(r) for r in reports])
        assert table["summary"]["corrections_reduction"] == 0.0
        assert table["summary"]["seconds_reduction"] == 0.0

    def test_independent_aggregation_oracle(self):
        rng = np.random.default_rng(11)
        base, treat = [], []
        for i in range(9):
            base.append(make_report(f"s{i}", i, int(rng.integers(0, 30)),
                                    int(rng.integers(0, 10 ** 6))))
            treat.append(make_report(f"s{i}", i, int(rng.integers(0, 30)),
                                     int(rng.integers(0, 10 ** 6)),
                                     train_ms=int(rng.integers(0, 10 ** 4))))
        table = aggregate(base, treat)
        # spreadsheet-style recomputation straight from the raw reports
        b_mean = sum(r["totals"]["corrections"] for r in base) / 9
        t_mean = sum(r["totals"]["corrections"] for r in treat) / 9
        assert abs(table["summary"]["original_mean_corrections"] - b_mean) < 1e-9
        assert abs(table["summary"]["lit_lora_mean_corrections"] - t_mean) < 1e-9
        expected_red = (b_mean - t_mean) / b_mean
        assert abs(table["summary"]["corrections_reduction"] - expected_red) < 1e-9
        b_sec = sum(r["totals"]["user_ms"] / 1000 for r in base) / 9
        assert abs(table["summary"]["original_mean_seconds"] - b_sec) < 1e-9

    def test_mismatched_streams_rejected(self):
        with pytest.raises(ValueError, match="different stream sets"):
            aggregate([make_report("a", 1, 5, 1000)], [make_report("b", 1, 5, 1000)])

    def test_mismatched_seeds_rejected(self):
        with pytest.raises(ValueError, match="seeds differ"):
            aggregate([make_report("a", 1, 5, 1000)], [make_report("a", 2, 5, 1000)])

    def test_histogram_counts(self):
        base = [make_report(f"s{i}", i, c, 0) for i, c in enumerate([0, 1, 3, 12, 30])]
        table = aggregate(base, [dict(r) for r in base])
        counts = {row["bin"]: row["count"] for row in table["histogram"]}
        assert counts["[0,1)"] == 1 and counts["[1,2)"] == 1
        assert counts["[2,5)"] == 1 and counts["[10,20)"] == 1 and counts["[20,50)"] == 1

    def test_high_interaction_subset(self):
        base = [make_report("a", 1, 30, 0), make_report("b", 2, 2, 0)]
        treat = [make_report("a", 1, 10, 0), make_report("b", 2, 2, 0)]
        hi = aggregate(base, treat)["summary"]["high_interaction"]
        assert hi["streams"] == 1
        assert hi["mean_baseline_corrections"] == 30
        assert hi["mean_treatment_corrections"] == 10


class TestDigest:
    def test_ignores_wall_times(self):
        a = make_report("s", 1, 5, 1000, train_ms=123)
        b = make_report("s", 1, 5, 1000, train_ms=999)
        assert report_digest(a) == report_digest(b)
        assert report_digest(a, include_timing=True) != report_digest(b, include_timing=True)

    def test_sensitive_to_content(self):
        a = make_report("s", 1, 5, 1000)
        b = make_report("s", 1, 6, 1000)
        assert report_digest(a) != report_digest(b)
