"""Monte-Carlo replications and their bias / coverage / power summaries."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .datagen import Scenario, format_float, generate_cohort
from .errors import NoSuccessfulRecords
from .estimators import ALL_STRATEGIES, EstimateRecord, Strategy, analyze_cohort
from .numerics import RngStream

_COHORT, _BOOT = 0, 1


@dataclass(frozen=True)
class Settings:
    master_seed: int = 7
    n_boot: int = 200
    strategies: tuple[Strategy, ...] = ALL_STRATEGIES
    optimal_uses_covariance: bool = True


def run_replication(scenario: Scenario, rep_index: int, settings: Settings) -> list[EstimateRecord]:
    """One generated cohort, every requested strategy; records tagged with ``rep_index``."""
    stream = RngStream(settings.master_seed, rep_index)
    cohort = generate_cohort(scenario, stream.child(_COHORT))
    records = analyze_cohort(
        cohort,
        settings.strategies,
        B=settings.n_boot,
        stream=stream.child(_BOOT),
        use_covariance=settings.optimal_uses_covariance,
    )
    for r in records:
        r.replication = rep_index
    return records


def _run_chunk(args) -> list[EstimateRecord]:
    scenario, reps, settings = args
    out = []
    for i in reps:
        out.extend(run_replication(scenario, i, settings))
    return out


def run_simulation(
    scenario: Scenario,
    n_sims: int,
    settings: Settings,
    *,
    workers: int = 1,
    progress: Callable[[int, int], None] | None = None,
) -> list[EstimateRecord]:
    """Replications ``0..n_sims-1``; output order and content do not depend on ``workers``."""
    reps = list(range(n_sims))
    records: list[EstimateRecord] = []
    if workers <= 1:
        for i in reps:
            records.extend(run_replication(scenario, i, settings))
            if progress:
                progress(i + 1, n_sims)
    else:
        chunks = [reps[k::workers * 4] for k in range(min(n_sims, workers * 4))]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = 0
            for part in pool.map(_run_chunk, [(scenario, c, settings) for c in chunks]):
                records.extend(part)
                done += len({r.replication for r in part})
                if progress:
                    progress(done, n_sims)
    order = {s: k for k, s in enumerate(settings.strategies)}
    records.sort(key=lambda r: (r.replication, order.get(r.strategy, len(order))))
    return records


@dataclass(frozen=True)
class MethodMetrics:
    strategy: Strategy
    mean_pct_bias: float
    median_pct_bias: float
    ase: float
    ese: float
    cp: float
    power: float
    n_effective: int


METRIC_COLUMNS = tuple(f.name for f in fields(MethodMetrics))


def aggregate(records: Iterable[EstimateRecord], true_beta1: float) -> dict[Strategy, MethodMetrics]:
    """Per-strategy summaries over successful records.

    Percent bias is ``100 (b - beta) / beta`` with the signed true value;
    ``ase`` is the mean reported SE and ``ese`` the SD (n-1) of the estimates;
    ``cp`` counts intervals containing ``beta`` and ``power`` intervals
    excluding 0.
    """
    by: dict[Strategy, list[EstimateRecord]] = {}
    for r in records:
        by.setdefault(Strategy(r.strategy), []).append(r)
    out = {}
    for s in sorted(by, key=ALL_STRATEGIES.index):
        good = [r for r in by[s] if r.ok and math.isfinite(r.ci_low) and math.isfinite(r.ci_high)]
        if not good:
            raise NoSuccessfulRecords(f"{s.value}: no successful records")
        b = np.array([r.beta1_hat for r in good])
        lo = np.array([r.ci_low for r in good])
        hi = np.array([r.ci_high for r in good])
        bias = 100.0 * (b - true_beta1) / true_beta1
        out[s] = MethodMetrics(
            strategy=s,
            mean_pct_bias=float(np.mean(bias)),
            median_pct_bias=float(np.median(bias)),
            ase=float(np.mean([r.se for r in good])),
            ese=float(np.std(b, ddof=1)) if b.size > 1 else 0.0,
            cp=float(np.mean((lo <= true_beta1) & (true_beta1 <= hi))),
            power=float(np.mean((hi < 0) | (lo > 0))),
            n_effective=len(good),
        )
    return out


def failed_fraction(records: Sequence[EstimateRecord]) -> float:
    """Share of replications with at least one failed strategy."""
    reps: dict[int, bool] = {}
    for r in records:
        reps[r.replication] = reps.get(r.replication, False) or not r.ok
    return sum(reps.values()) / len(reps) if reps else 0.0


# ---------------------------------------------------------------------------
# reports

RECORD_COLUMNS = ("replication", "strategy", "beta1_hat", "se", "ci_low", "ci_high", "converged")


def write_records_csv(records: Iterable[EstimateRecord], path: str | Path, *, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow(
                [
                    r.replication,
                    Strategy(r.strategy).value,
                    format_float(r.beta1_hat),
                    format_float(r.se),
                    format_float(r.ci_low),
                    format_float(r.ci_high),
                    int(r.converged),
                ]
            )


def read_records_csv(path: str | Path) -> list[EstimateRecord]:
    def num(v: str) -> float:
        return float(v) if v != "" else float("nan")

    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            s = Strategy(row["strategy"])
            out.append(
                EstimateRecord(
                    strategy=s,
                    beta1_hat=num(row["beta1_hat"]),
                    se=num(row["se"]),
                    ci_low=num(row["ci_low"]),
                    ci_high=num(row["ci_high"]),
                    ci_kind=s.ci_kind,
                    n_analysis=-1,
                    converged=row["converged"] == "1",
                    replication=int(row["replication"]),
                )
            )
    return out


def write_metrics_csv(metrics: dict[Strategy, MethodMetrics], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in metrics.values():
            w.writerow([m.strategy.value, *(format_float(getattr(m, c)) for c in METRIC_COLUMNS[1:-1]), m.n_effective])


def read_metrics_csv(path: str | Path) -> dict[Strategy, MethodMetrics]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            s = Strategy(row["strategy"])
            out[s] = MethodMetrics(s, *(float(row[c]) for c in METRIC_COLUMNS[1:-1]), int(row["n_effective"]))
    return out


def format_metrics_table(metrics: dict[Strategy, MethodMetrics], title: str = "") -> str:
    head = f"{'strategy':<24}{'mean%bias':>11}{'med%bias':>11}{'ASE':>9}{'ESE':>9}{'CP':>8}{'power':>8}{'n':>7}"
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for m in metrics.values():
        lines.append(
            f"{m.strategy.value:<24}{m.mean_pct_bias:>11.3f}{m.median_pct_bias:>11.3f}"
            f"{m.ase:>9.3f}{m.ese:>9.3f}{m.cp:>8.3f}{m.power:>8.3f}{m.n_effective:>7d}"
        )
    return "\n".join(lines) + "\n"


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
