"""Summary statistics shared by scenario and benchmark reports."""

from __future__ import annotations

import math
import statistics


def percentile(values, q: float) -> float | None:
    """Linear-interpolated percentile, ``q`` in [0, 100]."""
    xs = sorted(values)
    if not xs:
        return None
    pos = (len(xs) - 1) * q / 100.0
    lo, hi = math.floor(pos), math.ceil(pos)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


def summarize(values) -> dict:
    xs = [v for v in values if v is not None]
    if not xs:
        return {"count": 0, "mean": None, "max": None, "p50": None, "p95": None}
    return {
        "count": len(xs),
        "mean": statistics.fmean(xs),
        "max": max(xs),
        "p50": percentile(xs, 50),
        "p95": percentile(xs, 95),
    }
