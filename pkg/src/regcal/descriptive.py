"""Cohort description: adjusted geometric means and blind-duplicate reliability."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .datagen import format_float, read_table, to_float_column
from .errors import DegenerateVariance, NonPositiveValues, SchemaError, TooFewRows
from .numerics import empirical_quantile, solve_least_squares

Z975 = 1.959963984540054


@dataclass(frozen=True)
class GeoMean:
    group: str
    n: int
    geomean: float
    ci_low: float
    ci_high: float
    # 2.5th / 97.5th percentiles of the raw values in the group
    pct_low: float
    pct_high: float


def adjusted_geomean(
    data,
    value: str,
    adjusters: Mapping[str, float] | None = None,
    group: str | None = None,
) -> list[GeoMean]:
    """Covariate-adjusted geometric means per group.

    ``value`` must already be on the log scale. The model is
    ``log y ~ group indicators + (adjuster - reference)``, so each group
    coefficient is that group's predicted log mean at the reference point;
    the interval is ``exp(coef +/- 1.96 SE)``.
    """
    adjusters = dict(adjusters or {})
    y = np.asarray(data[value], dtype=np.float64)
    ok = np.isfinite(y)
    adj = {}
    for a in adjusters:
        adj[a] = np.asarray(data[a], dtype=np.float64)
        ok &= np.isfinite(adj[a])
    if group is None:
        labels = np.array(["all"] * y.shape[0], dtype=object)
    else:
        raw = np.asarray(data[group])
        if raw.dtype.kind in "fiub":
            num = raw.astype(np.float64)
            ok &= np.isfinite(num)
            labels = np.array([format(v, "g") for v in num], dtype=object)
        else:
            labels = raw.astype(str).astype(object)
            ok &= labels != ""
    y, labels = y[ok], labels[ok]
    levels = sorted(set(labels))
    counts = {g: int(np.sum(labels == g)) for g in levels}
    for g, c in counts.items():
        if c < len(adjusters) + 2:
            raise TooFewRows(f"group {g!r} has {c} rows, need {len(adjusters) + 2}")
    X = np.column_stack(
        [(labels == g).astype(np.float64) for g in levels] + [adj[a][ok] - ref for a, ref in adjusters.items()]
    )
    ls = solve_least_squares(X, y)
    df = ls.n - ls.p
    sigma2 = ls.rss / df if df > 0 else 0.0
    out = []
    for k, g in enumerate(levels):
        b = ls.coef[k]
        se = math.sqrt(max(sigma2 * ls.xtx_inv[k, k], 0.0))
        yg = y[labels == g]
        out.append(
            GeoMean(
                group=g,
                n=counts[g],
                geomean=math.exp(b),
                ci_low=math.exp(b - Z975 * se),
                ci_high=math.exp(b + Z975 * se),
                pct_low=math.exp(empirical_quantile(yg, 0.025)),
                pct_high=math.exp(empirical_quantile(yg, 0.975)),
            )
        )
    return out


@dataclass(frozen=True)
class DuplicatePairs:
    analyte: str
    first: NDArray[np.float64]
    second: NDArray[np.float64]

    def __post_init__(self):
        if self.first.shape != self.second.shape:
            raise ValueError("duplicate pairs must be complete")

    def __len__(self) -> int:
        return self.first.shape[0]


def _as_pairs(pairs) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    if isinstance(pairs, DuplicatePairs):
        return pairs.first, pairs.second
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("pairs must be an (m, 2) array")
    return arr[:, 0], arr[:, 1]


def duplicate_icc(pairs) -> float:
    """Pearson correlation between first and second measurements."""
    a, b = _as_pairs(pairs)
    if a.size < 3:
        raise TooFewRows("need at least 3 pairs")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa <= 0 or sbb <= 0:
        raise DegenerateVariance("a coordinate has zero variance")
    if np.array_equal(a, b):
        return 1.0
    return float(da @ db / math.sqrt(saa * sbb))


def random_intercepts_moments(pairs) -> tuple[float, float]:
    """Between- and within-person variances of ``y_ij = g0 + b_i + e_ij``.

    Balanced one-way ANOVA moment estimators for duplicate measurements;
    the between-person component is clamped at zero.
    """
    a, b = _as_pairs(pairs)
    m = a.size
    y = np.column_stack([a, b])
    means = y.mean(axis=1)
    msw = float(np.sum((y - means[:, None]) ** 2) / m)
    msb = float(2.0 * np.sum((means - means.mean()) ** 2) / (m - 1)) if m > 1 else 0.0
    return max((msb - msw) / 2.0, 0.0), msw


def duplicate_cv(pairs) -> float:
    """Within-person CV in percent: ``100 sqrt(sum(d^2) / 2m) / mean(pair means)``."""
    a, b = _as_pairs(pairs)
    if a.size < 2:
        raise TooFewRows("need at least 2 pairs")
    if np.any(a <= 0) or np.any(b <= 0):
        raise NonPositiveValues("CV needs strictly positive measurements")
    d = a - b
    sigma_e2 = float(d @ d) / (2.0 * a.size)
    return 100.0 * math.sqrt(sigma_e2) / float(np.mean((a + b) / 2.0))


def read_duplicates_csv(path: str | Path) -> dict[str, DuplicatePairs]:
    """Pairs per analyte from a long ``analyte,id,replicate_index,value`` CSV.

    The two lowest replicate indices of each (analyte, id) form the pair;
    ids without both are dropped.
    """
    raw = read_table(path)
    for col in ("analyte", "id", "replicate_index", "value"):
        if col not in raw:
            raise SchemaError(f"duplicates CSV is missing column {col!r}", column=col)
    values = to_float_column(raw["value"], "value")
    reps = to_float_column(raw["replicate_index"], "replicate_index")
    cells: dict[str, dict[str, dict[float, float]]] = defaultdict(lambda: defaultdict(dict))
    for analyte, pid, r, v in zip(raw["analyte"], raw["id"], reps, values):
        if math.isfinite(v):
            cells[analyte][pid][r] = v
    out = {}
    for analyte, by_id in cells.items():
        first, second = [], []
        for pid in sorted(by_id):
            obs = by_id[pid]
            if len(obs) >= 2:
                r1, r2 = sorted(obs)[:2]
                first.append(obs[r1])
                second.append(obs[r2])
        out[analyte] = DuplicatePairs(analyte, np.array(first), np.array(second))
    return out


def reliability_table(pairs_by_analyte: Mapping[str, DuplicatePairs], *, log_icc: bool = False) -> list[dict]:
    rows = []
    for analyte in sorted(pairs_by_analyte):
        p = pairs_by_analyte[analyte]
        row = {"analyte": analyte, "n_pairs": len(p), "icc": float("nan"), "cv_percent": float("nan")}
        try:
            row["icc"] = duplicate_icc(np.log(np.column_stack([p.first, p.second])) if log_icc else p)
        except (TooFewRows, DegenerateVariance, ValueError):
            pass
        try:
            row["cv_percent"] = duplicate_cv(p)
        except (TooFewRows, NonPositiveValues):
            pass
        rows.append(row)
    return rows


def write_rows_csv(rows: Sequence[dict], path: str | Path, columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format_float(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
