"""Exposure strategies for the Cox outcome model and their inference.

Six ways of entering the exposure, each fitted with AGE and BMI as
additional covariates:

============================  ===============  =================================
strategy                      analysis rows    exposure
============================  ===============  =================================
TRUTH                         whole cohort     true X
NAIVE_BIOMARKER               sub-study        observed X**
CALIBRATED_BIOMARKER          sub-study        E[X | X**, AGE, BMI]
NAIVE_SELFREPORT              whole cohort     observed X*
CALIBRATED_SELFREPORT         whole cohort     E[X | X*, AGE, BMI]
OPTIMAL                       (combination of the two calibrated estimates)
============================  ===============  =================================

The calibrated strategies get their standard errors and percentile intervals
from a bootstrap that resamples sub-study members and the rest of the cohort
separately and refits the calibration step every time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .datagen import Cohort
from .errors import (
    EmptyAnalysisSet,
    MissingFit,
    RegcalError,
    SingularCovariance,
    TooManyFailedReplicates,
)
from .linmod import TABLE4_CENTERS, CalibrationFit, fit_calibration
from .numerics import RngStream, empirical_quantile
from .survival import SurvData, fit_cox

Z975 = NormalDist().inv_cdf(0.975)
MAX_FAILED_FRACTION = 0.05


class Strategy(str, enum.Enum):
    TRUTH = "TRUTH"
    NAIVE_BIOMARKER = "NAIVE_BIOMARKER"
    CALIBRATED_BIOMARKER = "CALIBRATED_BIOMARKER"
    NAIVE_SELFREPORT = "NAIVE_SELFREPORT"
    CALIBRATED_SELFREPORT = "CALIBRATED_SELFREPORT"
    OPTIMAL = "OPTIMAL"

    @property
    def substudy_only(self) -> bool:
        return self in (Strategy.NAIVE_BIOMARKER, Strategy.CALIBRATED_BIOMARKER)

    @property
    def calibrated(self) -> bool:
        return self in (Strategy.CALIBRATED_BIOMARKER, Strategy.CALIBRATED_SELFREPORT)

    @property
    def ci_kind(self) -> str:
        return "percentile" if self.calibrated else "wald"


ALL_STRATEGIES = tuple(Strategy)


@dataclass
class EstimateRecord:
    strategy: Strategy
    beta1_hat: float
    se: float
    ci_low: float
    ci_high: float
    ci_kind: str
    n_analysis: int
    converged: bool = True
    replication: int | None = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.converged and math.isfinite(self.beta1_hat)

    @classmethod
    def failed(cls, strategy: Strategy, n_analysis: int, error: str, replication=None) -> "EstimateRecord":
        nan = float("nan")
        return cls(strategy, nan, nan, nan, nan, strategy.ci_kind, n_analysis, False, replication, error)


def wald_record(strategy: Strategy, beta: float, se: float, n: int, converged: bool = True) -> EstimateRecord:
    return EstimateRecord(strategy, beta, se, beta - Z975 * se, beta + Z975 * se, "wald", n, converged)


# ---------------------------------------------------------------------------
# calibration step


@dataclass(frozen=True)
class BiomarkerCalibration:
    """Shrinkage of X** towards its regression on (AGE, BMI).

    ``exposure = m(W) + k (X** - m(W))`` with ``k = (s2_resid - s2_e) / s2_resid``
    clamped to [0, 1]; ``s2_e`` comes from the replicate pairs.
    """

    mean_fit: CalibrationFit
    sigma_eps2: float
    shrinkage: float

    def predict(self, cohort: Cohort, rows) -> NDArray[np.float64]:
        m = self.mean_fit.predict({"age": cohort.age[rows], "bmi": cohort.bmi[rows]})
        xb = cohort.x_biomarker[rows]
        return xb - (1.0 - self.shrinkage) * (xb - m)


@dataclass(frozen=True)
class CalibrationFits:
    selfreport: CalibrationFit | None = None
    biomarker: BiomarkerCalibration | None = None


def replicate_error_variance(first, second, weights=None) -> float:
    """Method-of-moments ``sum(w d^2) / (2 sum(w))`` over complete replicate pairs."""
    first = np.asarray(first, dtype=np.float64)
    second = np.asarray(second, dtype=np.float64)
    ok = np.isfinite(first) & np.isfinite(second)
    w = np.ones(first.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w[ok]
    if w.sum() <= 0:
        raise MissingFit("no complete replicate pairs to estimate the biomarker error variance")
    d = first[ok] - second[ok]
    return float(w @ d**2 / (2.0 * w.sum()))


def _substudy_data(cohort: Cohort, rows: NDArray[np.int64]) -> dict:
    return {
        "x_biomarker": cohort.x_biomarker[rows],
        "x_star": cohort.x_star[rows],
        "age": cohort.age[rows],
        "bmi": cohort.bmi[rows],
    }


def fit_calibrations(cohort: Cohort, weights=None, *, which: Sequence[Strategy] = ALL_STRATEGIES) -> CalibrationFits:
    """Fit the sub-study calibration models needed by ``which``.

    ``weights`` are frequency weights over all cohort rows (bootstrap counts);
    only sub-study rows are used.
    """
    sub = np.flatnonzero(cohort.in_substudy & np.isfinite(cohort.x_biomarker))
    if sub.size == 0:
        raise EmptyAnalysisSet("no sub-study rows with a biomarker")
    data = _substudy_data(cohort, sub)
    w = None if weights is None else np.asarray(weights, dtype=np.float64)[sub]
    sr = bm = None
    if Strategy.CALIBRATED_SELFREPORT in which or Strategy.OPTIMAL in which:
        sr = fit_calibration(data, "x_biomarker", ("x_star", "age", "bmi"), TABLE4_CENTERS, weights=w)
    if Strategy.CALIBRATED_BIOMARKER in which or Strategy.OPTIMAL in which:
        mean_fit = fit_calibration(data, "x_biomarker", ("age", "bmi"), TABLE4_CENTERS, weights=w)
        rel = np.flatnonzero(cohort.in_reliability)
        rw = None if weights is None else np.asarray(weights, dtype=np.float64)[rel]
        s2e = replicate_error_variance(cohort.x_biomarker[rel], cohort.x_biomarker_repeat[rel], rw)
        s2 = mean_fit.residual_variance
        k = min(max((s2 - s2e) / s2, 0.0), 1.0) if s2 > 0 else 1.0
        bm = BiomarkerCalibration(mean_fit, s2e, k)
    return CalibrationFits(sr, bm)


def exposure_series(strategy: Strategy, cohort: Cohort, fits: CalibrationFits | None = None):
    """Exposure vector and analysis rows (integer indices) for one strategy."""
    strategy = Strategy(strategy)
    if strategy is Strategy.OPTIMAL:
        raise ValueError("OPTIMAL has no exposure series; combine the calibrated estimates instead")
    if strategy.substudy_only:
        rows = np.flatnonzero(cohort.in_substudy & np.isfinite(cohort.x_biomarker))
    else:
        rows = np.arange(len(cohort))
    if rows.size == 0:
        raise EmptyAnalysisSet(f"{strategy.value}: empty analysis set")
    if strategy is Strategy.TRUTH:
        x = cohort.x_true[rows]
    elif strategy is Strategy.NAIVE_BIOMARKER:
        x = cohort.x_biomarker[rows]
    elif strategy is Strategy.NAIVE_SELFREPORT:
        x = cohort.x_star[rows]
    elif strategy is Strategy.CALIBRATED_SELFREPORT:
        if fits is None or fits.selfreport is None:
            raise MissingFit("CALIBRATED_SELFREPORT needs the self-report calibration fit")
        x = fits.selfreport.predict({"x_star": cohort.x_star[rows], "age": cohort.age[rows], "bmi": cohort.bmi[rows]})
    else:
        if fits is None or fits.biomarker is None:
            raise MissingFit("CALIBRATED_BIOMARKER needs the biomarker calibration")
        x = fits.biomarker.predict(cohort, rows)
    return x, rows


# ---------------------------------------------------------------------------
# outcome models


class OutcomeModels:
    """Sorted survival data for the whole cohort and the sub-study, built once per cohort."""

    def __init__(self, cohort: Cohort):
        self.cohort = cohort
        self.age_c = cohort.age - TABLE4_CENTERS["age"]
        self.bmi_c = cohort.bmi - TABLE4_CENTERS["bmi"]
        self._surv: dict[bool, tuple[NDArray[np.int64], SurvData]] = {}

    def _template(self, substudy: bool, rows: NDArray[np.int64], x: NDArray[np.float64]) -> SurvData:
        key = bool(substudy)
        Z = np.column_stack([x, self.age_c[rows], self.bmi_c[rows]])
        cached = self._surv.get(key)
        if cached is not None and np.array_equal(cached[0], rows):
            return cached[1].with_covariates(Z)
        c = self.cohort
        data = SurvData(c.event_time[rows], c.event[rows], Z)
        self._surv[key] = (rows, data)
        return data

    def fit(self, strategy: Strategy, fits: CalibrationFits | None = None, weights=None, init=None):
        x, rows = exposure_series(strategy, self.cohort, fits)
        data = self._template(strategy.substudy_only, rows, x)
        if weights is not None:
            data = data.with_weights(np.asarray(weights, dtype=np.float64)[rows])
        return fit_cox(data, init=init), rows.size


def _needs(strategies: Sequence[Strategy]) -> set[Strategy]:
    need = {Strategy(s) for s in strategies}
    if Strategy.OPTIMAL in need:
        need |= {Strategy.CALIBRATED_BIOMARKER, Strategy.CALIBRATED_SELFREPORT}
    return need


# ---------------------------------------------------------------------------
# bootstrap


def stratified_bootstrap(
    statistic: Callable[[NDArray[np.float64]], NDArray[np.float64]],
    strata: NDArray,
    B: int,
    stream: RngStream,
) -> NDArray[np.float64]:
    """Evaluate ``statistic(counts)`` on ``B`` stratified resamples.

    ``counts`` is a frequency-weight vector over the original rows in which
    each stratum keeps its size. Failed evaluations should return NaN.
    Replicate ``b`` draws from ``stream.child(b)`` only.
    """
    strata = np.asarray(strata)
    groups = [np.flatnonzero(strata == s) for s in np.unique(strata)]
    n = strata.shape[0]
    out = []
    for b in range(B):
        g = stream.child(b).generator()
        counts = np.zeros(n)
        for idx in groups:
            counts[idx] = np.bincount(g.integers(0, idx.size, idx.size), minlength=idx.size)
        out.append(np.atleast_1d(np.asarray(statistic(counts), dtype=np.float64)))
    return np.array(out)


@dataclass
class BootstrapResult:
    se: dict
    ci: dict
    replicates: dict
    n_failed: dict
    cov: NDArray[np.float64] | None = None
    B: int = 0


def bootstrap_inference(
    strategies: Strategy | Sequence[Strategy],
    cohort: Cohort,
    B: int,
    stream: RngStream,
    *,
    init: dict | None = None,
    models: OutcomeModels | None = None,
) -> BootstrapResult:
    """Two-stage bootstrap for the calibrated strategies.

    Sub-study members and non-members are resampled separately; both
    calibration models and the Cox model are refitted in every replicate.
    When both calibrated strategies are requested the 2x2 covariance of their
    replicate estimates is returned as well.
    """
    if isinstance(strategies, (str, Strategy)):
        strategies = [strategies]
    strategies = [Strategy(s) for s in strategies if Strategy(s).calibrated]
    if B < 50:
        raise ValueError("bootstrap needs B >= 50")
    models = models or OutcomeModels(cohort)
    init = init or {}

    def statistic(counts):
        vals = np.full(len(strategies), np.nan)
        try:
            fits = fit_calibrations(cohort, counts, which=strategies)
        except RegcalError:
            return vals
        for i, s in enumerate(strategies):
            try:
                fit, _ = models.fit(s, fits, weights=counts, init=init.get(s))
            except RegcalError:
                continue
            if fit.converged:
                vals[i] = fit.beta[0]
        return vals

    reps = stratified_bootstrap(statistic, cohort.in_substudy, B, stream)
    res = BootstrapResult({}, {}, {}, {}, B=B)
    for i, s in enumerate(strategies):
        col = reps[:, i]
        good = col[np.isfinite(col)]
        res.n_failed[s] = int(B - good.size)
        if res.n_failed[s] > MAX_FAILED_FRACTION * B:
            raise TooManyFailedReplicates(f"{s.value}: {res.n_failed[s]} of {B} bootstrap fits failed")
        res.replicates[s] = col
        res.se[s] = float(np.std(good, ddof=1))
        res.ci[s] = (empirical_quantile(good, 0.025), empirical_quantile(good, 0.975))
    pair = (Strategy.CALIBRATED_BIOMARKER, Strategy.CALIBRATED_SELFREPORT)
    if all(p in strategies for p in pair):
        both = reps[:, [strategies.index(p) for p in pair]]
        both = both[np.all(np.isfinite(both), axis=1)]
        res.cov = np.cov(both, rowvar=False, ddof=1)
    return res


# ---------------------------------------------------------------------------
# combination


def optimal_combine(
    record_cb: EstimateRecord,
    record_csr: EstimateRecord,
    cov: NDArray[np.float64],
    *,
    use_covariance: bool = True,
) -> EstimateRecord:
    """Generalized inverse-variance weighted average of the two calibrated estimates.

    ``beta = (1' S^-1 1)^-1 1' S^-1 (b_cb, b_csr)`` with standard error
    ``(1' S^-1 1)^-1/2`` and a Wald interval. ``use_covariance=False`` drops
    the off-diagonal term (independence weights).
    """
    S = np.array(cov, dtype=np.float64)
    if S.shape != (2, 2) or not np.all(np.isfinite(S)):
        raise SingularCovariance("need a finite 2x2 covariance")
    if not use_covariance:
        S = np.diag(np.diag(S))
    det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
    if S[0, 0] <= 0 or S[1, 1] <= 0 or det <= 1e-14 * S[0, 0] * S[1, 1]:
        raise SingularCovariance("bootstrap covariance is not positive definite")
    a = np.linalg.solve(S, np.ones(2))
    total = float(a.sum())
    w = a / total
    beta = float(w @ np.array([record_cb.beta1_hat, record_csr.beta1_hat]))
    rec = wald_record(Strategy.OPTIMAL, beta, math.sqrt(1.0 / total), record_csr.n_analysis)
    rec.replication = record_csr.replication
    return rec


# ---------------------------------------------------------------------------
# driver


def estimate(
    strategy: Strategy,
    cohort: Cohort,
    stream: RngStream | None = None,
    *,
    B: int = 200,
) -> EstimateRecord:
    """Point estimate and interval for one (non-OPTIMAL) strategy."""
    strategy = Strategy(strategy)
    if strategy is Strategy.OPTIMAL:
        raise ValueError("use analyze_cohort or optimal_combine for OPTIMAL")
    return analyze_cohort(cohort, [strategy], B=B, stream=stream)[0]


def analyze_cohort(
    cohort: Cohort,
    strategies: Sequence[Strategy] = ALL_STRATEGIES,
    *,
    B: int = 200,
    stream: RngStream | None = None,
    use_covariance: bool = True,
) -> list[EstimateRecord]:
    """Estimate records for every requested strategy on one cohort.

    One joint bootstrap serves both calibrated strategies and the optimal
    combination. Failures are returned as records with ``converged=False``.
    """
    strategies = [Strategy(s) for s in strategies]
    need = _needs(strategies)
    models = OutcomeModels(cohort)
    out: dict[Strategy, EstimateRecord] = {}
    point_beta: dict[Strategy, NDArray[np.float64]] = {}
    # each calibration is fitted on its own so one failing does not take the other down
    parts = {}
    for s in sorted(need, key=ALL_STRATEGIES.index):
        if s.calibrated:
            try:
                parts[s] = fit_calibrations(cohort, which=[s])
            except RegcalError as exc:
                out[s] = EstimateRecord.failed(s, 0, f"calibration: {exc}")
    fits = CalibrationFits(
        selfreport=parts[Strategy.CALIBRATED_SELFREPORT].selfreport if Strategy.CALIBRATED_SELFREPORT in parts else None,
        biomarker=parts[Strategy.CALIBRATED_BIOMARKER].biomarker if Strategy.CALIBRATED_BIOMARKER in parts else None,
    )
    for s in need - {Strategy.OPTIMAL}:
        if s in out:
            continue
        try:
            fit, n = models.fit(s, fits)
        except RegcalError as exc:
            out[s] = EstimateRecord.failed(s, 0, f"{type(exc).__name__}: {exc}")
            continue
        point_beta[s] = fit.beta
        if s.calibrated:
            out[s] = EstimateRecord(s, float(fit.beta[0]), float("nan"), float("nan"), float("nan"), "percentile", n, fit.converged)
        else:
            out[s] = wald_record(s, float(fit.beta[0]), float(fit.se[0]), n, fit.converged)
    boot_for = [s for s in (Strategy.CALIBRATED_BIOMARKER, Strategy.CALIBRATED_SELFREPORT) if s in need and out[s].converged]
    boot = None
    if boot_for:
        if stream is None:
            raise ValueError("calibrated strategies need a bootstrap stream")
        try:
            boot = bootstrap_inference(boot_for, cohort, B, stream, init=point_beta, models=models)
        except RegcalError as exc:
            for s in boot_for:
                out[s] = EstimateRecord.failed(s, out[s].n_analysis, f"bootstrap: {exc}")
        else:
            for s in boot_for:
                r = out[s]
                r.se = boot.se[s]
                r.ci_low, r.ci_high = boot.ci[s]
    if Strategy.OPTIMAL in need:
        cb, csr = out[Strategy.CALIBRATED_BIOMARKER], out[Strategy.CALIBRATED_SELFREPORT]
        if boot is not None and boot.cov is not None and cb.ok and csr.ok:
            try:
                out[Strategy.OPTIMAL] = optimal_combine(cb, csr, boot.cov, use_covariance=use_covariance)
            except SingularCovariance as exc:
                out[Strategy.OPTIMAL] = EstimateRecord.failed(Strategy.OPTIMAL, csr.n_analysis, str(exc))
        else:
            out[Strategy.OPTIMAL] = EstimateRecord.failed(Strategy.OPTIMAL, csr.n_analysis, "calibrated inputs failed")
    return [out[s] for s in strategies]
