"""Cox proportional-hazards fitting on the Breslow log partial likelihood.

Subjects are sorted by time once, when :class:`SurvData` is built. Risk-set
sums are then reverse cumulative sums, with tied times sharing the sum taken
at the first member of the tie. Rows later than the last event time (the
administratively censored block, typically most of a cohort) sit in every
risk set, so they are reduced once per evaluation rather than accumulated.
Case weights enter as frequency weights, so a bootstrap resample is just a
count vector over the original rows and never needs re-sorting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionMismatch, EmptyAnalysisSet, RankDeficient, Separation

SEPARATION_BOUND = 50.0


class SurvData:
    """Right-censored survival data with covariates, pre-sorted by time."""

    def __init__(
        self,
        time: ArrayLike,
        event: ArrayLike,
        covariates: ArrayLike,
        weights: ArrayLike | None = None,
    ):
        time = np.asarray(time, dtype=np.float64)
        event = np.asarray(event).astype(bool)
        Z = np.asarray(covariates, dtype=np.float64)
        if Z.ndim == 1:
            Z = Z[:, None]
        n = time.shape[0]
        if event.shape != (n,) or Z.shape[0] != n:
            raise DimensionMismatch("time, event and covariates must have the same length")
        if np.any(~np.isfinite(time)) or np.any(time <= 0):
            raise ValueError("event times must be positive and finite")
        if not np.all(np.isfinite(Z)):
            raise ValueError("covariates must be finite")
        self.order = np.argsort(time, kind="stable")
        self.time = time[self.order]
        self.event = event[self.order]
        self._tie_start = np.searchsorted(self.time, self.time, side="left")
        last = np.flatnonzero(self.event)
        # rows [head:] are later than every event time
        self.head = int(np.searchsorted(self.time, self.time[last[-1]], side="right")) if last.size else 0
        self._set_covariates(Z[self.order])
        self.weights = None
        if weights is not None:
            self.weights = np.asarray(weights, dtype=np.float64)[self.order]
        if not np.any(self._event_weights() > 0):
            raise EmptyAnalysisSet("no events in the analysis set")

    def _set_covariates(self, Zs: NDArray[np.float64]) -> None:
        self.Z = Zs
        Zh = Zs[: self.head]
        self._ZZ = (Zh[:, :, None] * Zh[:, None, :]).reshape(Zh.shape[0], Zs.shape[1] ** 2)

    def _event_weights(self) -> NDArray[np.float64]:
        d = self.event.astype(np.float64)
        return d if self.weights is None else d * self.weights

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    def with_covariates(self, covariates: ArrayLike) -> "SurvData":
        """Same subjects and times, new covariate matrix (in original row order)."""
        Z = np.asarray(covariates, dtype=np.float64)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.shape[0] != self.n:
            raise DimensionMismatch("covariate rows must match subjects")
        if not np.all(np.isfinite(Z)):
            raise ValueError("covariates must be finite")
        clone = object.__new__(SurvData)
        clone.__dict__.update(self.__dict__)
        clone._set_covariates(Z[self.order])
        return clone

    def with_weights(self, weights: ArrayLike | None) -> "SurvData":
        """Same data under frequency weights given in original row order."""
        clone = object.__new__(SurvData)
        clone.__dict__.update(self.__dict__)
        clone.weights = None if weights is None else np.asarray(weights, dtype=np.float64)[self.order]
        if not np.any(clone._event_weights() > 0):
            raise EmptyAnalysisSet("no events in the weighted analysis set")
        return clone


def _revcumsum(a: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.cumsum(a[::-1], axis=0)[::-1]


def partial_loglik(beta: ArrayLike, data: SurvData):
    """Breslow log partial likelihood with its gradient and negative Hessian.

    Returns ``(value, score, information)``.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (data.p,):
        raise DimensionMismatch(f"beta has shape {beta.shape}, expected ({data.p},)")
    Z, h, p = data.Z, data.head, data.p
    eta = Z @ beta
    shift = eta.max()
    e = np.exp(eta - shift)
    if data.weights is not None:
        e = e * data.weights
    et, Zt = e[h:], Z[h:]
    eh, Zh = e[:h], Z[:h]
    dw = data._event_weights()[:h]
    ev = np.flatnonzero(dw > 0)
    at = data._tie_start[ev]
    s0 = _revcumsum(eh)[at] + et.sum()
    s1 = (_revcumsum(eh[:, None] * Zh)[at] + et @ Zt) / s0[:, None]
    s2 = (_revcumsum(eh[:, None] * data._ZZ)[at] + ((Zt * et[:, None]).T @ Zt).ravel()) / s0[:, None]
    w = dw[ev]
    value = float(w @ (eta[ev] - shift - np.log(s0)))
    score = w @ (Zh[ev] - s1)
    info = (w @ s2).reshape(p, p) - (s1 * w[:, None]).T @ s1
    return value, score, info


@dataclass(frozen=True)
class CoxFit:
    beta: NDArray[np.float64]
    information: NDArray[np.float64]
    se: NDArray[np.float64]
    loglik: float
    iterations: int
    converged: bool


def fit_cox(
    data: SurvData,
    init: ArrayLike | None = None,
    max_iter: int = 25,
    tol: float = 1e-8,
) -> CoxFit:
    """Newton-Raphson with step halving on the log partial likelihood.

    Converged when ``max|score| <= tol * (1 + |loglik|)``; the converged
    iterate then takes one last Newton step (quadratic convergence makes
    the reported ``beta`` accurate well beyond the score tolerance, while
    ``loglik`` and ``information`` stay those of the accepted iterate). A
    fit that runs out of iterations is returned with ``converged=False``.

    Raises
    ------
    RankDeficient
        Information matrix not positive definite (e.g. a constant covariate).
    Separation
        Some coefficient exceeds 50 in absolute value.
    """
    beta = np.zeros(data.p) if init is None else np.array(init, dtype=np.float64)
    ll, score, info = partial_loglik(beta, data)
    converged = False
    it = 0
    while True:
        if np.max(np.abs(score)) <= tol * (1.0 + abs(ll)):
            converged = True
            beta = beta + _solve_pd(info, score)
            break
        if it >= max_iter:
            break
        it += 1
        step = _solve_pd(info, score)
        for _ in range(11):
            cand = beta + step
            ll_new, score_new, info_new = partial_loglik(cand, data)
            if np.isfinite(ll_new) and ll_new >= ll:
                break
            step = step / 2.0
        else:
            # no ascent possible along the Newton direction: at the optimum up to rounding
            converged = np.max(np.abs(score)) <= 1e3 * tol * (1.0 + abs(ll))
            break
        beta, ll, score, info = cand, ll_new, score_new, info_new
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise Separation(f"|beta| exceeded {SEPARATION_BOUND}: monotone likelihood")
    cov = _inverse_pd(info)
    return CoxFit(
        beta=beta,
        information=info,
        se=np.sqrt(np.diag(cov)),
        loglik=ll,
        iterations=it,
        converged=converged,
    )


def _solve_pd(A: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise RankDeficient("information matrix is not positive definite") from None
    scale = np.abs(np.diag(L))
    if scale.min() <= 1e-10 * scale.max():
        raise RankDeficient("information matrix is numerically singular")
    return np.linalg.solve(L.T, np.linalg.solve(L, b))


def _inverse_pd(A: NDArray[np.float64]) -> NDArray[np.float64]:
    return _solve_pd(A, np.eye(A.shape[0]))
