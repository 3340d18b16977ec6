"""Calibration (prediction) models for a log-scale biomarker.

``data`` arguments are any mapping from column name to a 1-D array-like
(a ``dict`` of arrays or a ``pandas.DataFrame`` both work). Terms are column
names; an intercept is always included and named ``"Intercept"``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import (
    DegenerateResample,
    ExcessiveMissingness,
    InvalidIcc,
    NotNested,
    RankDeficient,
    TooFewRows,
)
from .numerics import RngStream, solve_least_squares

INTERCEPT = "Intercept"
MAX_RESPONSE_MISSING = 0.40
TABLE4_CENTERS = {"age": 46.1, "bmi": 29.6}


@dataclass(frozen=True)
class CalibrationFit:
    response: str
    terms: tuple[str, ...]
    coef: NDArray[np.float64]
    se: NDArray[np.float64]
    residual_variance: float
    rss: float
    tss: float
    n_used: int
    n_dropped: int
    centers: dict = field(default_factory=dict)

    @property
    def names(self) -> tuple[str, ...]:
        return (INTERCEPT, *self.terms)

    @property
    def r2(self) -> float:
        return 1.0 - self.rss / self.tss if self.tss > 0 else 0.0

    @property
    def aic(self) -> float:
        return aic(self.rss, self.n_used, len(self.coef))

    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.names, self.coef.tolist()))

    def predict(self, data: Mapping[str, object]) -> NDArray[np.float64]:
        X = design_matrix(data, self.terms, self.centers)
        return X @ self.coef


def aic(rss: float, n: int, p: int) -> float:
    """Gaussian AIC with the error variance counted as a parameter."""
    return n * math.log(rss / n) + 2 * (p + 1)


def _column(data: Mapping[str, object], name: str) -> NDArray[np.float64]:
    return np.asarray(data[name], dtype=np.float64)


def design_matrix(data, terms: Sequence[str], centers: Mapping[str, float] | None = None):
    centers = centers or {}
    cols = [np.ones(_nrows(data))]
    for t in terms:
        cols.append(_column(data, t) - centers.get(t, 0.0))
    return np.column_stack(cols)


def _nrows(data) -> int:
    return len(next(iter(data.values()))) if isinstance(data, dict) else len(data)


def complete_rows(data, columns: Sequence[str]) -> NDArray[np.bool_]:
    ok = np.ones(_nrows(data), dtype=bool)
    for c in columns:
        ok &= np.isfinite(_column(data, c))
    return ok


def fit_calibration(
    data,
    response: str,
    terms: Sequence[str],
    centers: Mapping[str, float] | None = None,
    weights=None,
) -> CalibrationFit:
    """Least-squares calibration model on complete cases.

    Parameters
    ----------
    data : mapping of column name to array
    response : str
        Log-scale biomarker column.
    terms : sequence of str
        Predictor columns; an intercept is added.
    centers : mapping, optional
        Values subtracted from continuous predictors before fitting, so the
        intercept is the mean response at those values (``TABLE4_CENTERS``
        gives the age 46.1 / BMI 29.6 convention).
    weights : array-like, optional
        Frequency weights (bootstrap counts).

    Raises
    ------
    ExcessiveMissingness
        More than 40% of the response is missing.
    TooFewRows
        Fewer than ``len(terms) + 2`` complete rows.
    RankDeficient
        Collinear predictors.
    """
    terms = tuple(terms)
    centers = dict(centers or {})
    y_all = _column(data, response)
    if np.mean(~np.isfinite(y_all)) > MAX_RESPONSE_MISSING:
        raise ExcessiveMissingness(
            f"{response}: {100 * np.mean(~np.isfinite(y_all)):.1f}% missing exceeds 40%"
        )
    complete = complete_rows(data, (response, *terms))
    ok = complete.copy()
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        ok &= w > 0
        w = w[ok]
        n_used = int(round(w.sum()))
    else:
        w = None
        n_used = int(ok.sum())
    p = len(terms) + 1
    if int(ok.sum()) < p + 1:
        raise TooFewRows(f"{int(ok.sum())} complete rows for {p} coefficients")
    X = design_matrix(data, terms, centers)[ok]
    y = y_all[ok]
    ls = solve_least_squares(X, y, w)
    df = n_used - p
    sigma2 = ls.rss / df if df > 0 else float("nan")
    ybar = np.average(y, weights=w)
    tss = float(np.sum((y - ybar) ** 2 * (1.0 if w is None else w)))
    return CalibrationFit(
        response=response,
        terms=terms,
        coef=ls.coef,
        se=np.sqrt(sigma2 * np.diag(ls.xtx_inv)),
        residual_variance=sigma2,
        rss=ls.rss,
        tss=tss,
        n_used=n_used,
        n_dropped=int((~complete).sum()),
        centers=centers,
    )


@dataclass(frozen=True)
class R2Family:
    r2: float
    prentice_r2: float
    partial_r2: dict
    r2_new: dict
    icc_used: float


def r2_new(r2: float, icc: float, j: float) -> float:
    """R^2 attainable if every participant's biomarker were a mean of ``j`` replicates.

    With ``Var(X) = ICC Var(X**)`` and ``Var(U) = (1 - ICC) Var(X**)``,
    ``R^2 Var(X**) / (Var(X) + Var(U)/j)`` reduces to ``R^2 / (ICC + (1-ICC)/j)``.
    """
    return r2 / (icc + (1.0 - icc) / j)


def r2_family(fit, icc: float, j_list: Sequence[float] = (2, 4), partial: Mapping[str, float] | None = None) -> R2Family:
    """R^2, Prentice R^2 (``R^2/ICC``) and ``R^2_new(j)`` for each ``j``.

    ``fit`` is a :class:`CalibrationFit` or a bare R^2 value.
    """
    if not 0.0 < icc <= 1.0:
        raise InvalidIcc(f"ICC must lie in (0, 1], got {icc}")
    r2 = fit.r2 if isinstance(fit, CalibrationFit) else float(fit)
    return R2Family(
        r2=r2,
        prentice_r2=r2 / icc,
        partial_r2=dict(partial or {}),
        r2_new={j: r2_new(r2, icc, j) for j in j_list},
        icc_used=icc,
    )


def partial_r2(fit_full: CalibrationFit, fit_without_term: CalibrationFit, *, tol: float = 1e-10) -> float:
    """Share of the reduced model's residual sum of squares explained by the dropped term(s)."""
    if fit_full.n_used != fit_without_term.n_used or not set(fit_without_term.terms) <= set(fit_full.terms):
        raise NotNested("fits must share rows and the reduced terms must be a subset")
    full, red = fit_full.rss, fit_without_term.rss
    if red < full - tol * max(red, 1.0):
        raise NotNested(f"reduced RSS {red:.6g} is below full RSS {full:.6g}")
    if red <= 0:
        return 0.0
    return min(max((red - full) / red, 0.0), 1.0)


def partial_r2_by_term(data, response: str, terms: Sequence[str], of: Sequence[str] | None = None, centers=None) -> dict[str, float]:
    """Partial R^2 of each term in ``of`` against the full model, on the full model's complete cases."""
    terms = tuple(terms)
    ok = complete_rows(data, (response, *terms))
    sub = {c: _column(data, c)[ok] for c in (response, *terms)}
    full = fit_calibration(sub, response, terms, centers)
    out = {}
    for t in of if of is not None else terms:
        reduced = fit_calibration(sub, response, [u for u in terms if u != t], centers)
        out[t] = partial_r2(full, reduced)
    return out


def stepwise_aic(data, response: str, candidates: Sequence[str], centers=None) -> CalibrationFit:
    """Bidirectional stepwise selection by AIC, starting from the full model.

    At each step every single-term drop and add is scored; the lowest AIC
    wins, ties broken by lexicographic term name. Stops when no move lowers
    the AIC. All models are fitted on the full model's complete cases.
    """
    candidates = tuple(candidates)
    if len(candidates) < 2:
        raise ValueError("stepwise selection needs at least two candidate terms")
    ok = complete_rows(data, (response, *candidates))
    if ok.sum() < len(candidates) + 2:
        raise TooFewRows(f"{int(ok.sum())} complete rows for {len(candidates)} candidates")
    sub = {c: _column(data, c)[ok] for c in (response, *candidates)}

    def fit(ts):
        return fit_calibration(sub, response, sorted(ts, key=candidates.index), centers)

    current = set(candidates)
    best = fit(current)
    while True:
        moves = []
        for t in sorted(candidates):
            trial = current - {t} if t in current else current | {t}
            try:
                f = fit(trial)
            except RankDeficient:
                continue
            moves.append((f.aic, t, f, trial))
        if not moves:
            break
        score, _, f, trial = min(moves, key=lambda m: (m[0], m[1]))
        if score >= best.aic:
            break
        best, current = f, trial
    return best


def optimism_corrected_r2(
    data,
    response: str,
    terms: Sequence[str],
    B: int,
    stream: RngStream,
    centers=None,
    *,
    resample: str = "bootstrap",
):
    """Bootstrap estimate of R^2 optimism.

    Each replicate refits on a with-replacement resample and records
    R^2(resample model on resample) - R^2(resample model on original data).
    ``resample="identity"`` reuses the original rows (a degenerate check).

    Returns ``(apparent, mean_optimism, corrected, n_skipped)``.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    terms = tuple(terms)
    ok = complete_rows(data, (response, *terms))
    sub = {c: _column(data, c)[ok] for c in (response, *terms)}
    n = int(ok.sum())
    apparent = fit_calibration(sub, response, terms, centers)
    y = sub[response]
    X = design_matrix(sub, terms, apparent.centers)
    tss = float(np.sum((y - y.mean()) ** 2))
    optimism = []
    skipped = 0
    for b in range(B):
        if resample == "identity":
            counts = np.ones(n)
        else:
            idx = stream.child(b).generator().integers(0, n, n)
            counts = np.bincount(idx, minlength=n).astype(np.float64)
        try:
            boot = fit_calibration(sub, response, terms, centers, weights=counts)
        except (RankDeficient, TooFewRows):
            skipped += 1
            continue
        resid = y - X @ boot.coef
        optimism.append(boot.r2 - (1.0 - float(resid @ resid) / tss))
    if not optimism:
        raise DegenerateResample(f"all {B} bootstrap designs were rank deficient")
    mean_opt = float(np.mean(optimism))
    return apparent.r2, mean_opt, apparent.r2 - mean_opt, skipped


def write_fit_csv(fit: CalibrationFit, path: str | Path) -> None:
    """Write ``term, estimate, se`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "estimate", "se"])
        for name, b, s in zip(fit.names, fit.coef, fit.se):
            w.writerow([name, repr(float(b)), repr(float(s))])


def read_fit_csv(path: str | Path) -> list[tuple[str, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [(r["term"], float(r["estimate"]), float(r["se"])) for r in rows]
