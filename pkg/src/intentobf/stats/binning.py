"""Binned success proportions with Wilson score intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from intentobf.stats.logistic import Z_95


@dataclass(frozen=True)
class BinSummary:
    x_center: float
    n: int
    successes: int
    proportion: float
    conf_low: float
    conf_high: float
    x_low: float
    x_high: float
    group: dict[str, object] = field(default_factory=dict)


def wilson_interval(successes: int, n: int, z: float = Z_95) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("wilson interval needs n >= 1")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo, hi = max(0.0, center - half), min(1.0, center + half)
    # the bounds are exact at the extremes; keep rounding from excluding p
    return (0.0 if successes == 0 else min(lo, p)), (1.0 if successes == n else max(hi, p))


def _edges(x: np.ndarray, bins: str | int | Sequence[float], n_bins: int) -> np.ndarray:
    if isinstance(bins, str):
        if bins == "quantile":
            edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1)))
        elif bins == "unique":
            return np.unique(x)
        else:
            raise ValueError(f"unknown binning {bins!r}")
    elif isinstance(bins, (int, np.integer)):
        if bins < 1:
            raise ValueError("bins must be >= 1")
        edges = np.linspace(x.min(), x.max(), int(bins) + 1)
    else:
        edges = np.asarray(sorted(bins), dtype=np.float64)
        if len(edges) < 2:
            raise ValueError("a fixed grid needs at least two edges")
    return edges


def _assign(x: np.ndarray, edges: np.ndarray, unique: bool) -> np.ndarray:
    if unique:
        return np.searchsorted(edges, x)
    if len(edges) == 1 or edges[0] == edges[-1]:
        return np.zeros(len(x), dtype=int)
    # right-closed last bin so the maximum lands inside the grid
    idx = np.searchsorted(edges, x, side="right") - 1
    idx[x == edges[-1]] = len(edges) - 2
    idx[(x < edges[0]) | (x > edges[-1])] = -1
    return idx


def binned_summary(
    records: pd.DataFrame | Sequence[dict],
    x_field: str,
    bins: str | int | Sequence[float] = "quantile",
    group_fields: Sequence[str] = (),
    response: str = "success",
    n_bins: int = 5,
) -> list[BinSummary]:
    """Per-bin success proportion, x mean and Wilson 95% interval.

    ``bins`` is ``"quantile"`` (``n_bins`` quantile bins), ``"unique"`` (one
    bin per distinct value), an integer count of equal-width bins, or explicit
    edges. Empty bins are dropped; a constant covariate yields a single bin.
    """
    frame = records if isinstance(records, pd.DataFrame) else pd.DataFrame(list(records))
    if frame.empty:
        return []
    frame = frame.dropna(subset=[x_field, response, *group_fields])
    out: list[BinSummary] = []
    grouped = frame.groupby(list(group_fields), sort=True) if group_fields else [((), frame)]
    for key, sub in grouped:
        key = key if isinstance(key, tuple) else (key,)
        group = dict(zip(group_fields, key))
        x = sub[x_field].to_numpy(dtype=np.float64)
        y = sub[response].to_numpy(dtype=np.float64)
        if len(x) == 0:
            continue
        edges = _edges(x, bins, n_bins)
        unique = isinstance(bins, str) and bins == "unique"
        idx = _assign(x, edges, unique)
        n_slots = len(edges) if unique else max(len(edges) - 1, 1)
        for b in range(n_slots):
            sel = idx == b
            n = int(sel.sum())
            if n == 0:
                continue
            k = int(y[sel].sum())
            lo, hi = wilson_interval(k, n)
            xs = x[sel]
            out.append(BinSummary(float(xs.mean()), n, k, k / n, lo, hi, float(xs.min()), float(xs.max()), group))
    return out
