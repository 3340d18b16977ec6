"""Small dense linear-algebra, sampling and quantile kernel.

Matrices are plain 2-D float64 ``numpy`` arrays. Random draws always go
through an :class:`RngStream`, a value object naming a (master seed, stream)
pair; each stream maps onto an independent counter-based Philox generator so
replications and bootstrap draws can run in any order, on any worker, and
still reproduce bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionMismatch, EmptyInput, NotPositiveDefinite, RankDeficient

__all__ = [
    "RngStream",
    "LeastSquares",
    "cholesky",
    "solve_least_squares",
    "sample_mvn",
    "empirical_quantile",
]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream keyed by ``(master_seed, stream_id)``.

    ``child(*keys)`` derives a sub-stream (e.g. one per bootstrap replicate)
    without consuming draws from the parent, so streams never couple through
    draw order.
    """

    master_seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.master_seed, self.stream_id, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=self.master_seed & _MASK64,
            spawn_key=(self.stream_id & _MASK64, *(k & _MASK64 for k in self.path)),
        )
        return np.random.Generator(np.random.Philox(seq))


def cholesky(S: ArrayLike, *, tol: float = 1e-12) -> NDArray[np.float64]:
    """Lower-triangular ``L`` with ``L @ L.T == S``.

    Raises
    ------
    NotPositiveDefinite
        If ``S`` is not symmetric or a pivot falls below ``tol * max|S|``.
    """
    S = np.array(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    scale = float(np.max(np.abs(S))) if S.size else 0.0
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-10 * scale):
        raise NotPositiveDefinite("matrix is not symmetric")
    n = S.shape[0]
    L = np.zeros_like(S)
    for j in range(n):
        pivot = S[j, j] - L[j, :j] @ L[j, :j]
        if pivot <= tol * max(scale, 1.0):
            raise NotPositiveDefinite(f"pivot {j} is {pivot:.3g}")
        L[j, j] = np.sqrt(pivot)
        L[j + 1 :, j] = (S[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


@dataclass(frozen=True)
class LeastSquares:
    coef: NDArray[np.float64]
    rss: float
    xtx_inv: NDArray[np.float64]
    n: int

    @property
    def p(self) -> int:
        return self.coef.shape[0]


def solve_least_squares(
    X: ArrayLike, y: ArrayLike, weights: ArrayLike | None = None
) -> LeastSquares:
    """Ordinary (or case-weighted) least squares through a Householder QR.

    ``weights`` are frequency weights: integer weights give exactly the fit
    on the duplicated rows, which is how bootstrap resamples are fitted.
    ``xtx_inv`` is the unscaled covariance ``(X' W X)^{-1}``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if y.shape != (n,):
        raise DimensionMismatch(f"design has {n} rows, response has shape {y.shape}")
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        keep = w > 0
        sw = np.sqrt(w[keep])
        X, y = X[keep] * sw[:, None], y[keep] * sw
        n_eff = float(w.sum())
    else:
        n_eff = n
    if X.shape[0] < p:
        raise RankDeficient(f"{X.shape[0]} distinct rows for {p} coefficients")
    Q, R = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() <= 1e-10 * max(diag.max(), np.finfo(float).tiny):
        raise RankDeficient("design matrix is not of full column rank")
    qty = Q.T @ y
    coef = _back_substitute(R, qty)
    resid = y - X @ coef
    rinv = _back_substitute(R, np.eye(p))
    return LeastSquares(coef=coef, rss=float(resid @ resid), xtx_inv=rinv @ rinv.T, n=int(round(n_eff)))


def _back_substitute(R: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    x = np.array(b, dtype=np.float64, copy=True)
    for i in range(R.shape[0] - 1, -1, -1):
        x[i] = (x[i] - R[i, i + 1 :] @ x[i + 1 :]) / R[i, i]
    return x


def sample_mvn(
    mean: ArrayLike, L: ArrayLike, n: int, stream: RngStream | np.random.Generator
) -> NDArray[np.float64]:
    """Draw ``n`` rows ``mean + L z`` with ``z`` standard normal."""
    mean = np.asarray(mean, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if L.shape != (mean.size, mean.size):
        raise DimensionMismatch(f"mean has {mean.size} entries but factor is {L.shape}")
    rng = stream.generator() if isinstance(stream, RngStream) else stream
    z = rng.standard_normal((n, mean.size))
    return mean + z @ L.T


def empirical_quantile(values: ArrayLike, p: float) -> float:
    """Quantile by linear interpolation at 1-based position ``1 + (n-1)p``."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise EmptyInput("quantile of an empty vector")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {p}")
    h = (v.size - 1) * p
    lo = int(np.floor(h))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))
