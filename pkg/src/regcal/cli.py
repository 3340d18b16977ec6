"""Command-line entry point: ``regcal {simulate,generate,analyze,reliability}``.

Exit codes: 0 success, 2 usage or configuration error, 3 quality gate
(more than 5% of replications with a failed strategy).
"""

from __future__ import annotations

import argparse
import ast
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .datagen import (
    BUILTIN_NAMES,
    Scenario,
    calibrate_lambda0,
    generate_cohort,
    load_scenario,
    read_table,
    to_float_column,
    write_cohort_csv,
)
from .descriptive import DuplicatePairs, adjusted_geomean, duplicate_icc, read_duplicates_csv, reliability_table, write_rows_csv
from .errors import RegcalError, SchemaError
from .estimators import ALL_STRATEGIES, Strategy
from .linmod import (
    fit_calibration,
    optimism_corrected_r2,
    partial_r2_by_term,
    r2_family,
    stepwise_aic,
    write_fit_csv,
)
from .numerics import RngStream
from .simharness import (
    Settings,
    aggregate,
    failed_fraction,
    format_metrics_table,
    run_simulation,
    write_metrics_csv,
    write_records_csv,
)

log = logging.getLogger("regcal")

EXIT_OK, EXIT_CONFIG, EXIT_QUALITY = 0, 2, 3
MAX_FAILED_REPLICATIONS = 0.05


class ConfigError(RegcalError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    n_sims: int
    n_boot: int
    master_seed: int
    workers: int
    strategies: tuple[Strategy, ...]
    out_dir: Path
    lambda0_mode: str = "auto"
    target_censoring: float = 0.85
    beta_source: str = "primary"
    optimal_uses_covariance: bool = True

    def validate(self) -> None:
        if self.n_sims < 1:
            raise ConfigError("--sims must be at least 1")
        needs_boot = any(s.calibrated or s is Strategy.OPTIMAL for s in self.strategies)
        if needs_boot and self.n_boot < 50:
            raise ConfigError("--boot must be at least 50 when calibrated strategies are requested")
        if self.lambda0_mode not in ("auto", "literal"):
            raise ConfigError("--lambda0-mode must be 'auto' or 'literal'")
        if self.workers < 1:
            raise ConfigError("--workers must be at least 1")


def _parse_strategies(text: str) -> tuple[Strategy, ...]:
    if text.strip().lower() == "all":
        return ALL_STRATEGIES
    out = []
    for tok in text.split(","):
        tok = tok.strip().upper()
        try:
            out.append(Strategy(tok))
        except ValueError:
            raise ConfigError(f"unknown strategy {tok!r}; choose from {', '.join(s.value for s in ALL_STRATEGIES)}") from None
    return tuple(out)


def _resolve_scenario(name: str, beta_source: str, lambda0_mode: str, target: float, **overrides) -> Scenario:
    scenario = load_scenario(name, beta_source=beta_source)
    if overrides:
        scenario = scenario.with_overrides(**overrides)
    if lambda0_mode == "auto":
        scenario = calibrate_lambda0(scenario, target)
    return scenario


def cmd_simulate(cfg: RunConfig) -> int:
    cfg.validate()
    scenario = _resolve_scenario(cfg.scenario, cfg.beta_source, cfg.lambda0_mode, cfg.target_censoring)
    settings = Settings(
        master_seed=cfg.master_seed,
        n_boot=cfg.n_boot,
        strategies=cfg.strategies,
        optimal_uses_covariance=cfg.optimal_uses_covariance,
    )
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    log.info("simulating %s: %d replications, B=%d, lambda0=%.6g", scenario.name, cfg.n_sims, cfg.n_boot, scenario.lambda0)
    t0 = time.perf_counter()

    def progress(done: int, total: int) -> None:
        if done == total or done % max(1, total // 20) == 0:
            log.info("  %d/%d replications", done, total)

    records = run_simulation(scenario, cfg.n_sims, settings, workers=cfg.workers, progress=progress)
    elapsed = time.perf_counter() - t0
    metrics = aggregate(records, scenario.true_beta1)
    write_records_csv(records, out / "records.csv")
    write_metrics_csv(metrics, out / "metrics.csv")
    title = f"{scenario.name}: true beta1 = {scenario.true_beta1:.4f}, {cfg.n_sims} replications, B = {cfg.n_boot}"
    (out / "metrics.txt").write_text(format_metrics_table(metrics, title), encoding="utf-8")
    failed = failed_fraction(records)
    manifest = {
        "scenario": asdict(scenario),
        "master_seed": cfg.master_seed,
        "n_sims": cfg.n_sims,
        "n_boot": cfg.n_boot,
        "strategies": [s.value for s in cfg.strategies],
        "lambda0_mode": cfg.lambda0_mode,
        "lambda0_used": scenario.lambda0,
        "target_censoring": cfg.target_censoring,
        "beta_source": cfg.beta_source,
        "optimal_uses_covariance": cfg.optimal_uses_covariance,
        "workers": cfg.workers,
        "failed_replication_fraction": failed,
        "elapsed_seconds": round(elapsed, 3),
        "replications_per_second": round(cfg.n_sims / elapsed, 4) if elapsed > 0 else None,
        "versions": {"regcal": __version__, "python": platform.python_version(), "numpy": np.__version__},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    sys.stdout.write(format_metrics_table(metrics, title))
    if failed > MAX_FAILED_REPLICATIONS:
        print(f"error: {100 * failed:.1f}% of replications had a failed strategy", file=sys.stderr)
        return EXIT_QUALITY
    return EXIT_OK


def cmd_generate(scenario: str, out: Path, seed: int, *, beta_source="primary", lambda0_mode="auto", target=0.85, **overrides) -> int:
    sc = _resolve_scenario(scenario, beta_source, lambda0_mode, target, **{k: v for k, v in overrides.items() if v is not None})
    cohort = generate_cohort(sc, RngStream(seed, 0).child(0))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohort_csv(cohort, out)
    log.info("wrote %d rows (%d sub-study, %d with repeats) to %s", len(cohort), int(cohort.in_substudy.sum()), int(cohort.in_reliability.sum()), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def parse_spec_text(text: str) -> dict:
    """``key = literal`` lines, ``#`` comments; bare words are strings."""
    spec = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"analysis spec line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            spec[k] = ast.literal_eval(v)
        except (ValueError, SyntaxError):
            spec[k] = v.strip("\"'")
    return spec


def _load_columns(path: Path) -> dict[str, np.ndarray]:
    raw = read_table(path)
    cols = {}
    for name, vals in raw.items():
        try:
            cols[name] = to_float_column(vals, name)
        except SchemaError:
            cols[name] = np.array(vals, dtype=object)
    return cols


def _require(cols: dict, names, what: str) -> None:
    for n in names:
        if n not in cols:
            raise SchemaError(f"{what}: column {n!r} not found in cohort CSV", column=n)


def cmd_analyze(cohort_csv: Path, spec_path: Path, out: Path, seed: int = 1) -> int:
    spec = parse_spec_text(spec_path.read_text(encoding="utf-8"))
    cols = _load_columns(cohort_csv)
    response = spec.get("response", "x_biomarker")
    terms = list(spec.get("terms", ["x_star", "age", "bmi"]))
    centers = dict(spec.get("centers", {"age": 46.1, "bmi": 29.6}))
    _require(cols, [response, *terms], "calibration model")
    rows = np.ones(len(next(iter(cols.values()))), dtype=bool)
    subset = spec.get("subset", "in_substudy")
    if subset:
        _require(cols, [subset], "subset")
        rows = cols[subset] == 1
    data = {k: v[rows] for k, v in cols.items()}
    out.mkdir(parents=True, exist_ok=True)

    fit = fit_calibration(data, response, terms, centers)
    log.info("calibration fit on %d complete rows (%d dropped)", fit.n_used, fit.n_dropped)
    write_fit_csv(fit, out / "calibration_fit.csv")

    repeat = spec.get("repeat", "x_biomarker_repeat")
    icc = spec.get("icc", "repeats")
    if icc == "repeats":
        _require(cols, [repeat], "ICC from repeats")
        pair_ok = np.isfinite(data[response]) & np.isfinite(data[repeat])
        icc = duplicate_icc(np.column_stack([data[response][pair_ok], data[repeat][pair_ok]]))
        log.info("ICC from %d repeat pairs: %.4f", int(pair_ok.sum()), icc)
    icc = float(icc)
    partial_terms = list(spec.get("partial_terms", terms[:1]))
    partial = partial_r2_by_term(data, response, terms, partial_terms, centers)
    fam = r2_family(fit, min(icc, 1.0), spec.get("j_list", [2, 4]), partial)
    r2_row = {"response": response, "r2": fam.r2, "prentice_r2": fam.prentice_r2}
    for t, v in fam.partial_r2.items():
        r2_row[f"partial_r2_{t}"] = v
    if partial_terms:
        ok = np.isfinite(data[response]) & np.isfinite(data[partial_terms[0]])
        r2_row[f"correlation_{partial_terms[0]}"] = float(np.corrcoef(data[response][ok], data[partial_terms[0]][ok])[0, 1])
    for j, v in fam.r2_new.items():
        r2_row[f"r2_new_{j}"] = v
    r2_row["icc_used"] = fam.icc_used
    write_rows_csv([r2_row], out / "r2_family.csv")

    if len(terms) >= 2:
        reduced = stepwise_aic(data, response, terms, centers)
        sel = [{"term": t, "selected": int(t in reduced.terms)} for t in terms]
        write_rows_csv(sel, out / "stepwise.csv")
        lines = [f"{'term':<20}selected"] + [f"{r['term']:<20}{'x' if r['selected'] else ''}" for r in sel]
        lines += [f"R2 full      {fit.r2:.4f}", f"R2 stepwise  {reduced.r2:.4f}", f"AIC full     {fit.aic:.3f}", f"AIC stepwise {reduced.aic:.3f}"]
        (out / "stepwise.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    n_opt = int(spec.get("optimism_boot", 100))
    if n_opt > 0:
        app, opt, corr, skipped = optimism_corrected_r2(data, response, terms, n_opt, RngStream(seed, 0), centers)
        write_rows_csv([{"apparent_r2": app, "mean_optimism": opt, "corrected_r2": corr, "skipped": skipped}], out / "optimism.csv")

    gm_value = spec.get("geomean_value", response)
    gm_adj = dict(spec.get("geomean_adjusters", {"age": 46.1}))
    gm_group = spec.get("geomean_group")
    _require(cols, [gm_value, *gm_adj, *([gm_group] if gm_group else [])], "geometric means")
    gms = adjusted_geomean(data, gm_value, gm_adj, gm_group)
    write_rows_csv([asdict(g) for g in gms], out / "geomeans.csv")

    if "duplicates" in spec:
        dup_path = Path(spec["duplicates"])
        if not dup_path.is_absolute():
            dup_path = spec_path.parent / dup_path
        rel = reliability_table(read_duplicates_csv(dup_path), log_icc=bool(spec.get("log_icc", False)))
    else:
        pair_ok = np.isfinite(data[response]) & np.isfinite(data[repeat]) if repeat in data else np.zeros(0, bool)
        rel = []
        if pair_ok.sum() >= 3:
            p = DuplicatePairs(response, np.exp(data[response][pair_ok]), np.exp(data[repeat][pair_ok]))
            rel = reliability_table({response: p}, log_icc=True)
    if rel:
        write_rows_csv(rel, out / "duplicates.csv", ["analyte", "n_pairs", "icc", "cv_percent"])
    return EXIT_OK


def cmd_reliability(duplicates_csv: Path, out: Path, log_icc: bool = False) -> int:
    rows = reliability_table(read_duplicates_csv(duplicates_csv), log_icc=log_icc)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, out, ["analyte", "n_pairs", "icc", "cv_percent"])
    for r in rows:
        print(f"{r['analyte']:<24}{r['n_pairs']:>5}  ICC {r['icc']:.4f}  CV {r['cv_percent']:.4f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regcal", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(q):
        q.add_argument("--scenario", required=True, help=f"built-in ({', '.join(BUILTIN_NAMES)}) or scenario file")
        q.add_argument("--beta-source", choices=("primary", "alternate"), default="primary")
        q.add_argument("--lambda0-mode", choices=("auto", "literal"), default="auto")
        q.add_argument("--target-censoring", type=float, default=0.85)

    s = sub.add_parser("simulate", help="Monte-Carlo bias/coverage/power study")
    scenario_args(s)
    s.add_argument("--sims", type=int, default=2500)
    s.add_argument("--boot", type=int, default=1000)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--strategies", default="all")
    s.add_argument("--independent-weights", action="store_true", help="optimal combination ignores the bootstrap covariance")
    s.add_argument("--out", type=Path, default=Path("results"))

    g = sub.add_parser("generate", help="write one synthetic cohort as CSV")
    scenario_args(g)
    g.add_argument("--n-cohort", type=int)
    g.add_argument("--n-substudy", type=int)
    g.add_argument("--n-reliability", type=int)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", type=Path, required=True)

    a = sub.add_parser("analyze", help="calibration, R^2 family, stepwise and descriptive tables")
    a.add_argument("cohort", type=Path)
    a.add_argument("spec", type=Path)
    a.add_argument("--out", type=Path, default=Path("analysis"))
    a.add_argument("--seed", type=int, default=1)

    r = sub.add_parser("reliability", help="ICC and CV of blind duplicates")
    r.add_argument("duplicates", type=Path)
    r.add_argument("--out", type=Path, default=Path("duplicates.csv"))
    r.add_argument("--log-icc", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "simulate":
            cfg = RunConfig(
                scenario=args.scenario,
                n_sims=args.sims,
                n_boot=args.boot,
                master_seed=args.seed,
                workers=args.workers,
                strategies=_parse_strategies(args.strategies),
                out_dir=args.out,
                lambda0_mode=args.lambda0_mode,
                target_censoring=args.target_censoring,
                beta_source=args.beta_source,
                optimal_uses_covariance=not args.independent_weights,
            )
            return cmd_simulate(cfg)
        if args.command == "generate":
            return cmd_generate(
                args.scenario,
                args.out,
                args.seed,
                beta_source=args.beta_source,
                lambda0_mode=args.lambda0_mode,
                target=args.target_censoring,
                n_cohort=args.n_cohort,
                n_substudy=args.n_substudy,
                n_reliability=args.n_reliability,
            )
        if args.command == "analyze":
            return cmd_analyze(args.cohort, args.spec, args.out, args.seed)
        return cmd_reliability(args.duplicates, args.out, args.log_icc)
    except (RegcalError, OSError) as exc:
        col = getattr(exc, "column", None)
        print(f"error: {exc}" + (f" (column: {col})" if col else ""), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
