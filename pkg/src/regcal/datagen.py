"""Synthetic cohorts with an error-prone self-report, a noisy biomarker and
an exponential time-to-event outcome.

Data-generating process, per participant::

    (X*, AGE, BMI) ~ MVN(mean, cov)
    X   = a0 + a1 X* + a2 (AGE - age_c) + a3 (BMI - bmi_c) + u,   u ~ N(0, s2_u)
    X** = X + e,                                                    e ~ N(0, s2_e)
    T   ~ Exp(rate = lambda0 exp(b1 (X - xbar) + b2 (AGE - age_c) + b3 (BMI - bmi_c)))

observed as ``min(T, C)``. ``s2_u`` is chosen so that regressing X** on
(X*, AGE, BMI) has the scenario's target R^2.
"""

from __future__ import annotations

import ast
import csv
import math
import warnings
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from numpy.typing import NDArray

from .errors import (
    InvalidConfig,
    NegativeErrorVariance,
    NoBracket,
    NonPositiveRate,
    NotPositiveDefinite,
    SchemaError,
    UnknownScenario,
)
from .numerics import RngStream, cholesky, sample_mvn

AGE_CENTER = 46.1
BMI_CENTER = 29.6

# stream keys below a replication stream
_MVN, _U, _EPS1, _EPS2, _SURV = range(5)
# stream id reserved for lambda0 calibration cohorts
CALIBRATION_STREAM_ID = 2**63 - 1


@dataclass(frozen=True)
class Scenario:
    name: str
    mvn_mean: tuple[float, float, float]
    mvn_cov: tuple[tuple[float, ...], ...]
    alpha: tuple[float, float, float, float]
    r2_target: float
    sigma_eps2: float
    beta: tuple[float, float, float]
    lambda0: float
    censor_time: float = 60.0
    centering: tuple[float, float] = (AGE_CENTER, BMI_CENTER)
    n_cohort: int = 16_415
    n_substudy: int = 476
    n_reliability: int = 95

    def __post_init__(self) -> None:
        object.__setattr__(self, "mvn_mean", tuple(float(v) for v in self.mvn_mean))
        object.__setattr__(
            self, "mvn_cov", tuple(tuple(float(v) for v in row) for row in self.mvn_cov)
        )
        object.__setattr__(self, "alpha", tuple(float(v) for v in self.alpha))
        object.__setattr__(self, "beta", tuple(float(v) for v in self.beta))
        object.__setattr__(self, "centering", tuple(float(v) for v in self.centering))
        if len(self.mvn_mean) != 3 or np.shape(self.mvn_cov) != (3, 3):
            raise InvalidConfig("mvn_mean must have 3 entries and mvn_cov must be 3x3")
        if len(self.alpha) != 4 or len(self.beta) != 3 or len(self.centering) != 2:
            raise InvalidConfig("alpha needs 4 entries, beta 3, centering 2")
        try:
            cholesky(self.cov)
        except NotPositiveDefinite as exc:
            raise InvalidConfig(f"mvn_cov is not symmetric positive definite: {exc}") from None
        if not 0.0 < self.r2_target < 1.0:
            raise InvalidConfig(f"r2_target must lie in (0, 1), got {self.r2_target}")
        if self.sigma_eps2 < 0:
            raise InvalidConfig("sigma_eps2 must be non-negative")
        if not self.lambda0 > 0:
            raise InvalidConfig("lambda0 must be positive")
        if not self.censor_time > 0:
            raise InvalidConfig("censor_time must be positive")
        if not 0 <= self.n_reliability <= self.n_substudy <= self.n_cohort or self.n_cohort < 1:
            raise InvalidConfig("need 0 <= n_reliability <= n_substudy <= n_cohort")
        if implied_error_variances(self).sigma_u2 <= 0:
            raise NegativeErrorVariance(
                f"sigma_eps2={self.sigma_eps2} leaves no room for a positive sigma_u2"
            )

    @property
    def cov(self) -> NDArray[np.float64]:
        return np.array(self.mvn_cov)

    @property
    def true_beta1(self) -> float:
        return self.beta[0]

    @property
    def x_mean(self) -> float:
        """Population mean of the true exposure X."""
        a0, a1, a2, a3 = self.alpha
        _, age, bmi = self.mvn_mean
        return a0 + a1 * self.mvn_mean[0] + a2 * (age - self.centering[0]) + a3 * (bmi - self.centering[1])

    def with_overrides(self, **changes) -> "Scenario":
        return replace(self, **changes)


# "primary" beta_1 values reproduce the target truth-row power (see README);
# the alternate set stays selectable as beta_source="alternate".
_BETA1 = {
    "primary": {"beta_cryptoxanthin": math.log(0.775), "lycopene": math.log(0.529), "folate": math.log(0.665)},
    "alternate": {"beta_cryptoxanthin": math.log(0.862), "lycopene": math.log(0.451), "folate": math.log(0.651)},
}

_AGE_BMI_COV = ((194.0924, 8.354409), (8.354409, 36.88889))

_BUILTINS = {
    "beta_cryptoxanthin": dict(
        x_mean=3.261392,
        x_var=2.7095730,
        x_cov=(0.5280317, -0.4143209),
        alpha=(1.287, 0.112, 0.000, -0.013),
        r2_target=0.5034792,
        sigma_eps2=0.01070956,
        lambda0=650.0,
    ),
    "lycopene": dict(
        x_mean=5.605585,
        x_var=9.0749150,
        x_cov=(-2.981719, -0.6255943),
        alpha=(2.472, 0.011, -0.003, -0.004),
        r2_target=0.2196337,
        sigma_eps2=0.004405707,
        lambda0=2000.0,
    ),
    "folate": dict(
        x_mean=5.736064,
        x_var=0.2948574,
        x_cov=(-0.6786461, -0.2807268),
        alpha=(3.049, 0.090, 0.004, -0.010),
        r2_target=0.1716752,
        sigma_eps2=0.02127483,
        lambda0=1600.0,
    ),
}
BUILTIN_NAMES = tuple(_BUILTINS)


def build_scenario(name: str, *, beta_source: str = "primary", **overrides) -> Scenario:
    """Built-in scenario by nutrient name, with optional field overrides."""
    key = name.strip().lower().replace("-", "_")
    if key not in _BUILTINS:
        raise UnknownScenario(
            f"unknown scenario {name!r}; built-ins are {', '.join(BUILTIN_NAMES)}"
        )
    if beta_source not in _BETA1:
        raise InvalidConfig(f"beta_source must be one of {sorted(_BETA1)}")
    b = _BUILTINS[key]
    (vaa, cab), (_, vbb) = _AGE_BMI_COV
    cxa, cxb = b["x_cov"]
    base = Scenario(
        name=key,
        mvn_mean=(b["x_mean"], 45.81989, 29.77589),
        mvn_cov=((b["x_var"], cxa, cxb), (cxa, vaa, cab), (cxb, cab, vbb)),
        alpha=b["alpha"],
        r2_target=b["r2_target"],
        sigma_eps2=b["sigma_eps2"],
        beta=(_BETA1[beta_source][key], math.log(0.9), math.log(0.75)),
        lambda0=b["lambda0"],
    )
    return replace(base, **overrides) if overrides else base


class ErrorVariances(NamedTuple):
    explained: float  # variance of the linear predictor, "A"
    sigma_t2: float
    sigma_u2: float


def total_residual_variance(explained: float, r2: float) -> float:
    """``s2_T`` solving ``R^2 = A / (A + s2_T)``."""
    return explained * (1.0 - r2) / r2


def implied_error_variances(scenario: Scenario) -> ErrorVariances:
    """Residual variance split implied by the scenario's R^2 target.

    ``A = a' Cov(X*, AGE, BMI) a`` is the variance of the calibration linear
    predictor; ``s2_T = A (1 - R^2) / R^2`` and ``s2_u = s2_T - s2_e``.
    """
    a = np.asarray(scenario.alpha[1:])
    explained = float(a @ scenario.cov @ a)
    sigma_t2 = total_residual_variance(explained, scenario.r2_target)
    return ErrorVariances(explained, sigma_t2, sigma_t2 - scenario.sigma_eps2)


def _checked_variances(scenario: Scenario) -> ErrorVariances:
    ev = implied_error_variances(scenario)
    if ev.sigma_u2 <= 0:
        raise NegativeErrorVariance(f"sigma_u2 = {ev.sigma_u2:.4g} for {scenario.name}")
    return ev


@dataclass
class CohortRow:
    id: int
    x_star: float
    age: float
    bmi: float
    x_true: float
    x_biomarker: float | None
    x_biomarker_repeat: float | None
    event_time: float
    event: int
    in_substudy: bool
    in_reliability: bool


COHORT_COLUMNS = tuple(f.name for f in fields(CohortRow))


@dataclass
class Cohort:
    """Column-oriented cohort; missing biomarker values are NaN."""

    id: NDArray[np.int64]
    x_star: NDArray[np.float64]
    age: NDArray[np.float64]
    bmi: NDArray[np.float64]
    x_true: NDArray[np.float64]
    x_biomarker: NDArray[np.float64]
    x_biomarker_repeat: NDArray[np.float64]
    event_time: NDArray[np.float64]
    event: NDArray[np.int8]
    in_substudy: NDArray[np.bool_]
    in_reliability: NDArray[np.bool_]
    meta: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return int(self.id.shape[0])

    def __post_init__(self) -> None:
        if np.any(self.in_reliability & ~self.in_substudy):
            raise InvalidConfig("reliability rows must belong to the sub-study")

    def row(self, i: int) -> CohortRow:
        def opt(v: float) -> float | None:
            return None if np.isnan(v) else float(v)

        return CohortRow(
            id=int(self.id[i]),
            x_star=float(self.x_star[i]),
            age=float(self.age[i]),
            bmi=float(self.bmi[i]),
            x_true=float(self.x_true[i]),
            x_biomarker=opt(self.x_biomarker[i]),
            x_biomarker_repeat=opt(self.x_biomarker_repeat[i]),
            event_time=float(self.event_time[i]),
            event=int(self.event[i]),
            in_substudy=bool(self.in_substudy[i]),
            in_reliability=bool(self.in_reliability[i]),
        )

    def __iter__(self) -> Iterator[CohortRow]:
        return (self.row(i) for i in range(len(self)))

    def columns(self) -> dict[str, NDArray]:
        return {name: getattr(self, name) for name in COHORT_COLUMNS}

    @property
    def censoring_fraction(self) -> float:
        return float(1.0 - self.event.mean())


def _hazard_rates(x_true, age, bmi, scenario: Scenario, lambda0: float | None = None):
    b1, b2, b3 = scenario.beta
    ac, bc = scenario.centering
    lp = b1 * (x_true - scenario.x_mean) + b2 * (age - ac) + b3 * (bmi - bc)
    lam = (scenario.lambda0 if lambda0 is None else lambda0) * np.exp(lp)
    return lam


def simulate_survival(x_true, age, bmi, scenario: Scenario, stream: RngStream):
    """Exponential event times, administratively censored at ``censor_time``.

    Returns ``(event_time, event)``.
    """
    lam = _hazard_rates(np.asarray(x_true), np.asarray(age), np.asarray(bmi), scenario)
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise NonPositiveRate("hazard rate must be finite and positive")
    t = stream.generator().standard_exponential(lam.shape[0]) / lam
    event = t <= scenario.censor_time
    return np.where(event, t, scenario.censor_time), event.astype(np.int8)


def _exposures(scenario: Scenario, n: int, stream: RngStream):
    ev = _checked_variances(scenario)
    draws = sample_mvn(scenario.mvn_mean, cholesky(scenario.cov), n, stream.child(_MVN))
    x_star, age, bmi = draws[:, 0], draws[:, 1], draws[:, 2]
    a0, a1, a2, a3 = scenario.alpha
    ac, bc = scenario.centering
    u = stream.child(_U).generator().standard_normal(n) * math.sqrt(ev.sigma_u2)
    x_true = a0 + a1 * x_star + a2 * (age - ac) + a3 * (bmi - bc) + u
    return x_star, age, bmi, x_true


def generate_cohort(scenario: Scenario, stream: RngStream) -> Cohort:
    n, n_sub, n_rel = scenario.n_cohort, scenario.n_substudy, scenario.n_reliability
    x_star, age, bmi, x_true = _exposures(scenario, n, stream)
    sd_eps = math.sqrt(scenario.sigma_eps2)
    x_bio = np.full(n, np.nan)
    x_rep = np.full(n, np.nan)
    x_bio[:n_sub] = x_true[:n_sub] + sd_eps * stream.child(_EPS1).generator().standard_normal(n_sub)
    x_rep[:n_rel] = x_true[:n_rel] + sd_eps * stream.child(_EPS2).generator().standard_normal(n_rel)
    event_time, event = simulate_survival(x_true, age, bmi, scenario, stream.child(_SURV))
    idx = np.arange(n)
    return Cohort(
        id=idx + 1,
        x_star=x_star,
        age=age,
        bmi=bmi,
        x_true=x_true,
        x_biomarker=x_bio,
        x_biomarker_repeat=x_rep,
        event_time=event_time,
        event=event,
        in_substudy=idx < n_sub,
        in_reliability=idx < n_rel,
        meta={"scenario": scenario.name, "master_seed": stream.master_seed, "stream_id": stream.stream_id},
    )


def calibrate_lambda0(
    scenario: Scenario,
    target_censoring: float = 0.85,
    stream: RngStream | None = None,
    *,
    n: int = 200_000,
    tol: float = 1e-7,
) -> Scenario:
    """Scenario copy whose baseline rate gives the target censoring fraction.

    Censoring is evaluated as the exact conditional expectation
    ``mean(exp(-lambda0 * rate_i * C))`` over a large generated cohort, which
    is monotone in ``lambda0``; bisection runs on ``log(lambda0)``.
    """
    if not 0.0 < target_censoring < 1.0:
        raise InvalidConfig("target censoring must lie in (0, 1)")
    if stream is None:
        stream = RngStream(0, CALIBRATION_STREAM_ID)
    _, age, bmi, x_true = _exposures(scenario, n, stream)
    rel = _hazard_rates(x_true, age, bmi, scenario, lambda0=1.0) * scenario.censor_time

    def censored(log_l0: float) -> float:
        return float(np.mean(np.exp(-math.exp(log_l0) * rel)))

    lo, hi = math.log(1e-12), math.log(1e12)
    if not censored(lo) >= target_censoring >= censored(hi):
        raise NoBracket(f"censoring {target_censoring} unreachable for lambda0 in [1e-12, 1e12]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        c = censored(mid)
        if abs(c - target_censoring) <= tol:
            break
        if c > target_censoring:
            lo = mid
        else:
            hi = mid
    if mid < math.log(1e-9) or mid > math.log(1e9):
        warnings.warn(f"calibrated lambda0 = {math.exp(mid):.3g} is extreme", RuntimeWarning)
    return replace(scenario, lambda0=math.exp(mid))


# ---------------------------------------------------------------------------
# CSV and scenario-file I/O


def format_float(v: float) -> str:
    """Shortest round-trip decimal, empty for missing."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def write_cohort_csv(cohort: Cohort, path: str | Path) -> None:
    cols = cohort.columns()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COHORT_COLUMNS)
        for i in range(len(cohort)):
            w.writerow(
                [
                    int(cols["id"][i]),
                    *(format_float(cols[c][i]) for c in COHORT_COLUMNS[1:8]),
                    int(cols["event"][i]),
                    int(cols["in_substudy"][i]),
                    int(cols["in_reliability"][i]),
                ]
            )


def read_table(path: str | Path) -> dict[str, list[str]]:
    """Raw string columns of a header-first CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        cols: dict[str, list[str]] = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for h, v in zip(header, row):
                cols[h].append(v.strip())
    return cols


def to_float_column(values: list[str], name: str) -> NDArray[np.float64]:
    out = np.empty(len(values))
    for i, v in enumerate(values):
        if v == "" or v.upper() == "NA":
            out[i] = np.nan
            continue
        try:
            out[i] = float(v)
        except ValueError:
            raise SchemaError(f"column {name!r}: cannot parse {v!r} as a number", column=name) from None
    return out


def read_cohort_csv(path: str | Path) -> Cohort:
    raw = read_table(path)
    for col in COHORT_COLUMNS:
        if col not in raw:
            raise SchemaError(f"cohort CSV is missing column {col!r}", column=col)
    num = {c: to_float_column(raw[c], c) for c in COHORT_COLUMNS}
    for c in ("id", "event", "in_substudy", "in_reliability", "event_time"):
        if np.any(np.isnan(num[c])):
            raise SchemaError(f"column {c!r} has missing values", column=c)
    return Cohort(
        id=num["id"].astype(np.int64),
        x_star=num["x_star"],
        age=num["age"],
        bmi=num["bmi"],
        x_true=num["x_true"],
        x_biomarker=num["x_biomarker"],
        x_biomarker_repeat=num["x_biomarker_repeat"],
        event_time=num["event_time"],
        event=num["event"].astype(np.int8),
        in_substudy=num["in_substudy"].astype(bool),
        in_reliability=num["in_reliability"].astype(bool),
    )


_SCENARIO_KEYS = {f.name for f in fields(Scenario)}


def parse_scenario_text(text: str) -> Scenario:
    """Parse ``key = value`` lines; values are Python/TOML-style literals.

    An optional ``base = <builtin>`` line starts from a built-in scenario and
    ``beta_source = alternate|primary`` picks its beta_1.
    """
    items: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            items[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            items[key] = value.strip("\"'")
    base = items.pop("base", None)
    beta_source = str(items.pop("beta_source", "primary"))
    unknown = set(items) - _SCENARIO_KEYS
    if unknown:
        raise InvalidConfig(f"unknown scenario keys: {', '.join(sorted(unknown))}")
    try:
        if base is not None:
            return build_scenario(str(base), beta_source=beta_source, **items)
        missing = {f.name for f in fields(Scenario) if f.default is MISSING} - set(items)
        if missing:
            raise InvalidConfig(f"scenario file lacks keys: {', '.join(sorted(missing))}")
        return Scenario(**items)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from None


def load_scenario(name_or_path: str, *, beta_source: str = "primary") -> Scenario:
    p = Path(name_or_path)
    if p.suffix and p.is_file():
        return parse_scenario_text(p.read_text(encoding="utf-8"))
    return build_scenario(name_or_path, beta_source=beta_source)


def dump_scenario(scenario: Scenario) -> str:
    lines = []
    for k, v in asdict(scenario).items():
        v = [list(r) for r in v] if k == "mvn_cov" else list(v) if isinstance(v, tuple) else v
        lines.append(f"{k} = {v!r}")
    return "\n".join(lines) + "\n"
