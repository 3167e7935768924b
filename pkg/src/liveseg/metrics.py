"""Region and boundary quality measures, plus report pairing and aggregation."""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np
from scipy import ndimage

from .autodiff import DimensionError


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    a, b = _check_pair(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to background or to the image border."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=0)
    return mask & ~interior


def default_boundary_tolerance(shape: tuple[int, int]) -> int:
    """DAVIS-style tolerance: 0.8% of the image diagonal, rounded up."""
    h, w = shape
    return int(math.ceil(0.008 * math.hypot(h, w)))


def boundary_f(pred, gt, tol: int | None = None) -> float:
    """Boundary F-measure with a Chebyshev pixel tolerance."""
    pred, gt = _check_pair(pred, gt)
    if tol is None:
        tol = default_boundary_tolerance(pred.shape)
    pb = boundary_pixels(pred)
    gb = boundary_pixels(gt)
    n_pb, n_gb = np.count_nonzero(pb), np.count_nonzero(gb)
    if n_pb == 0 and n_gb == 0:
        return 1.0
    if n_pb == 0 or n_gb == 0:
        return 0.0
    size = 2 * tol + 1
    gb_zone = ndimage.maximum_filter(gb.astype(np.uint8), size=size) > 0
    pb_zone = ndimage.maximum_filter(pb.astype(np.uint8), size=size) > 0
    precision = np.count_nonzero(pb & gb_zone) / n_pb
    recall = np.count_nonzero(gb & pb_zone) / n_gb
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# report aggregation


def aggregate(baseline: list[dict], treatment: list[dict],
              baseline_label: str = "original", treatment_label: str = "lit_lora") -> dict:
    """Paired per-stream comparison of two runs over the same suite and seeds.

    Emits per-stream rows, suite means, reduction percentages, the histogram
    of corrections per stream and the high-interaction subset (>= 10
    corrections in the baseline).
    """
    base_by_id = {r["stream_id"]: r for r in baseline}
    treat_by_id = {r["stream_id"]: r for r in treatment}
    if set(base_by_id) != set(treat_by_id):
        raise ValueError("baseline and treatment cover different stream sets")
    for sid in base_by_id:
        if base_by_id[sid]["seed"] != treat_by_id[sid]["seed"]:
            raise ValueError(f"stream {sid}: seeds differ between runs")

    rows = []
    for sid in sorted(base_by_id):
        b, t = base_by_id[sid], treat_by_id[sid]
        rows.append({
            "stream_id": sid,
            "seed": b["seed"],
            f"{baseline_label}_corrections": b["totals"]["corrections"],
            f"{treatment_label}_corrections": t["totals"]["corrections"],
            f"{baseline_label}_seconds": b["totals"]["user_ms"] / 1000.0,
            f"{treatment_label}_seconds": (t["totals"]["user_ms"] + t["totals"]["train_ms"]) / 1000.0,
            f"{baseline_label}_j": b["metrics"]["mean_j"],
            f"{treatment_label}_j": t["metrics"]["mean_j"],
            f"{baseline_label}_f": b["metrics"]["mean_f"],
            f"{treatment_label}_f": t["metrics"]["mean_f"],
        })

    def reduction(b_val: float, t_val: float) -> float:
        return 0.0 if b_val == 0 else (b_val - t_val) / b_val

    b_corr = float(np.mean([r[f"{baseline_label}_corrections"] for r in rows]))
    t_corr = float(np.mean([r[f"{treatment_label}_corrections"] for r in rows]))
    b_sec = float(np.mean([r[f"{baseline_label}_seconds"] for r in rows]))
    t_sec = float(np.mean([r[f"{treatment_label}_seconds"] for r in rows]))

    counts = [r[f"{baseline_label}_corrections"] for r in rows]
    edges = [0, 1, 2, 5, 10, 20, 50, 10 ** 9]
    hist = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        hist.append({"bin": f"[{lo},{hi})" if hi < 10 ** 9 else f"[{lo},inf)",
                     "count": int(sum(lo <= c < hi for c in counts))})

    heavy_ids = [r["stream_id"] for r in rows if r[f"{baseline_label}_corrections"] >= 10]
    heavy = [r for r in rows if r["stream_id"] in heavy_ids]

    summary = {
        "baseline": baseline_label,
        "treatment": treatment_label,
        "streams": len(rows),
        f"{baseline_label}_mean_corrections": b_corr,
        f"{treatment_label}_mean_corrections": t_corr,
        "corrections_reduction": reduction(b_corr, t_corr),
        f"{baseline_label}_mean_seconds": b_sec,
        f"{treatment_label}_mean_seconds": t_sec,
        "seconds_reduction": reduction(b_sec, t_sec),
        f"{baseline_label}_mean_j": float(np.mean([r[f"{baseline_label}_j"] for r in rows])),
        f"{treatment_label}_mean_j": float(np.mean([r[f"{treatment_label}_j"] for r in rows])),
        "high_interaction": {
            "streams": len(heavy),
            "mean_baseline_corrections":
                float(np.mean([r[f"{baseline_label}_corrections"] for r in heavy])) if heavy else 0.0,
            "mean_treatment_corrections":
                float(np.mean([r[f"{treatment_label}_corrections"] for r in heavy])) if heavy else 0.0,
        },
    }
    return {"rows": rows, "summary": summary, "histogram": hist}


def table_csv(table: dict) -> str:
    rows = table["rows"]
    if not rows:
        return ""
    header = list(rows[0].keys())
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(str(r[k]) for k in header))
    return "\n".join(lines) + "\n"


def histogram_csv(table: dict) -> str:
    lines = ["bin,count"]
    for row in table["histogram"]:
        lines.append(f"{row['bin']},{row['count']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# determinism digests


_TIMING_KEYS = ("train_ms", "wall_time", "train_seconds", "train_wall_ms",
                "mean_update_wall_s")


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k not in _TIMING_KEYS}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def report_digest(report, include_timing: bool = False) -> str:
    """Canonical hash of a report; measured wall times are excluded by default
    so identical (suite, config, seed) runs hash identically."""
    payload = report if include_timing else _strip_timing(report)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
