"""Command-line interface.

Subcommands::

    dualbid run       --scenario cfg.json --out DIR [--seed N] [--force] [--roi]
    dualbid compare   --run DIR [--out DIR] [--force]
    dualbid coldstart --budget B (priors flags | --priors FILE | sample files)
    dualbid sweep     --scenario cfg.json --out DIR --sweep-seeds N [--seed BASE]
    dualbid oracle    --log FILE --budget B [--cost-target C] [--windows FILE]

Exit codes: 0 success, 1 runtime failure, 2 validation failure.  Existing
output files are never overwritten without --force.

The oracle subcommand reads an opportunity log CSV with the columns
``time, placement_id, value, auction_type, reserve, competitor_family,
competitor_p1, competitor_p2, clearing_bid, windows`` where competitor_p1 /
competitor_p2 are (mu, sigma) for lognormal or (lo, hi) for uniform models,
an empty clearing_bid marks a distributional record, and windows is a
semicolon-separated list of window ids (may be empty).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .coldstart import (
    ColdStartError,
    PlacementPriors,
    expected_spend_per_opportunity,
    fit_lognormal,
    solve_lambda0_multi,
)
from .mechanisms import MechanismError, MechanismSpec, competitor_from_dict
from .oracle import (
    LogRecord,
    MultiplierProfile,
    OpportunityLog,
    OracleError,
    fixed_bid_baseline,
    marginal_roi,
    replay,
    solve_kkt_grid,
    solve_lambda_star,
)
from .pacing import ConstraintSet, DeliveryWindow, GuaranteeWindow, PacingError
from .scenario import ScenarioError, load_scenario, parse_scenario, scenario_to_dict
from .simulate import (
    SimulationError,
    distributional_log,
    generate_stream,
    realized_log,
    run_episode,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _g6(x: float) -> str:
    return f"{x:.6g}"


def _prepare_outputs(out_dir: Path, names: list[str], force: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if force:
        return
    existing = [n for n in names if (out_dir / n).exists()]
    if existing:
        raise CliError(
            f"refusing to overwrite {', '.join(str(out_dir / n) for n in existing)} "
            "(pass --force)",
            EXIT_VALIDATION,
        )


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_kv_csv(path: Path, rows: list[tuple[str, object]]) -> None:
    _write_csv(
        path,
        ["key", "value"],
        [(k, repr(v) if isinstance(v, float) else str(v)) for k, v in rows],
    )


def _read_kv_csv(path: Path) -> dict[str, str]:
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["key", "value"]:
            raise CliError(f"{path}: expected key,value columns", EXIT_VALIDATION)
        return {row["key"]: row["value"] for row in reader}


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario, seed_override=args.seed)
    except (ScenarioError, FileNotFoundError) as exc:
        raise CliError(f"invalid scenario: {exc}", EXIT_VALIDATION) from None
    out_dir = Path(args.out)
    _prepare_outputs(out_dir, ["trace.csv", "metrics.csv", "config_resolved.json"], args.force)
    try:
        episode = run_episode(scenario, compute_roi=args.roi)
    except SimulationError as exc:
        raise CliError(f"episode failed: {exc}", EXIT_RUNTIME) from None

    from .simulate import TRACE_COLUMNS

    _write_csv(
        out_dir / "trace.csv",
        list(TRACE_COLUMNS),
        (row.as_csv_fields() for row in episode.trace),
    )
    _write_kv_csv(out_dir / "metrics.csv", episode.metrics.as_rows())
    (out_dir / "config_resolved.json").write_text(
        json.dumps(scenario_to_dict(scenario), indent=2, sort_keys=True) + "\n"
    )
    m = episode.metrics
    print(
        f"spend={_g6(m.total_spend)} results={_g6(m.total_value)} "
        f"cost_per_result={_g6(m.cost_per_result)} utilization={_g6(m.budget_utilization)}"
    )
    return EXIT_OK


def _constrained(constraints: ConstraintSet) -> bool:
    return (
        constraints.cost_target is not None
        or bool(constraints.delivery_windows)
        or bool(constraints.guarantee_windows)
    )


def cmd_compare(args) -> int:
    run_dir = Path(args.run)
    config_path = run_dir / "config_resolved.json"
    metrics_path = run_dir / "metrics.csv"
    for p in (config_path, metrics_path):
        if not p.exists():
            raise CliError(f"missing run artifact {p}", EXIT_VALIDATION)
    try:
        scenario = parse_scenario(json.loads(config_path.read_text()))
    except (ScenarioError, json.JSONDecodeError) as exc:
        raise CliError(f"bad resolved config: {exc}", EXIT_VALIDATION) from None
    metrics = _read_kv_csv(metrics_path)
    try:
        agent_value = float(metrics["total_value"])
        agent_spend = float(metrics["total_spend"])
    except KeyError as exc:
        raise CliError(f"metrics.csv missing key {exc}", EXIT_VALIDATION) from None

    out_dir = Path(args.out) if args.out else run_dir
    _prepare_outputs(out_dir, ["compare.csv", "oracle_curves.csv", "roi.csv"], args.force)

    stream = generate_stream(scenario)
    log = realized_log(scenario, stream)
    constraints = scenario.constraints
    budget = constraints.budget

    rows: list[tuple[str, object]] = []
    if _constrained(constraints):
        kkt = solve_kkt_grid(log, constraints, bid_cap=scenario.agent.bid_cap)
        oracle_spend, oracle_value = kkt.replay.spend, kkt.replay.value
        lam_star = kkt.profile.lam
        unconstrained = "budget unconstrained" in kkt.notes
        rows.append(("oracle_mu", kkt.profile.mu))
        for wid, lam_k in kkt.profile.window_lambda.items():
            rows.append((f"oracle_lambda_{wid}", lam_k))
        for wid, mu_k in kkt.profile.window_mu.items():
            rows.append((f"oracle_mu_{wid}", mu_k))
        for name, residual in kkt.residuals.items():
            rows.append((f"kkt_residual_{name}", residual))
        rows.append(("oracle_feasible", kkt.feasible))
        for note in kkt.notes:
            print(f"note: {note}")
    else:
        sol = solve_lambda_star(log, budget, bid_cap=scenario.agent.bid_cap)
        oracle_spend, oracle_value = sol.spend, sol.value
        lam_star = sol.lam
        unconstrained = sol.unconstrained

    value_ratio = agent_value / oracle_value if oracle_value > 0 else float("inf")
    baseline = fixed_bid_baseline(log, budget, bid_cap=scenario.agent.bid_cap)
    baseline_ratio = baseline.value / oracle_value if oracle_value > 0 else float("inf")

    rows = [
        ("oracle_lambda", lam_star),
        ("oracle_unconstrained", unconstrained),
        ("oracle_spend", oracle_spend),
        ("oracle_value", oracle_value),
        ("agent_spend", agent_spend),
        ("agent_value", agent_value),
        ("value_ratio", value_ratio),
        ("baseline_bid", baseline.bid),
        ("baseline_spend", baseline.spend),
        ("baseline_value", baseline.value),
        ("baseline_value_ratio", baseline_ratio),
    ] + rows

    grid = np.geomspace(max(lam_star, 1e-9) / 8.0, max(lam_star, 1e-9) * 8.0, 33)
    curve_rows = []
    for lam in grid:
        r = replay(log, MultiplierProfile(lam=float(lam)), scenario.agent.bid_cap)
        curve_rows.append((repr(float(lam)), repr(r.spend), repr(r.value)))
    _write_csv(out_dir / "oracle_curves.csv", ["lambda", "spend", "value"], curve_rows)

    roi_rows = []
    if not unconstrained:
        roi = marginal_roi(
            distributional_log(scenario, stream), budget, bid_cap=scenario.agent.bid_cap
        )
        for pid in sorted(roi.roi):
            roi_rows.append((pid, repr(roi.roi[pid])))
        for pid in roi.inactive:
            roi_rows.append((pid, "inactive"))
    _write_csv(out_dir / "roi.csv", ["placement_id", "marginal_roi"], roi_rows)
    _write_kv_csv(out_dir / "compare.csv", rows)

    marker = " (budget unconstrained)" if unconstrained else ""
    print(
        f"oracle_lambda={_g6(lam_star)}{marker} value_ratio={_g6(value_ratio)} "
        f"baseline_value_ratio={_g6(baseline_ratio)}"
    )
    return EXIT_OK


def _read_sample_file(path: str) -> list[float]:
    values = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise CliError(f"{path}:{i + 1}: not a number: {line!r}", EXIT_VALIDATION) from None
    return values


def _coldstart_priors(args) -> list[PlacementPriors]:
    if args.priors:
        data = json.loads(Path(args.priors).read_text())
        return [
            PlacementPriors(
                bid_mu=float(p["bid_mu"]),
                bid_sigma=float(p["bid_sigma"]),
                value_mu=float(p["value_mu"]),
                value_sigma=float(p["value_sigma"]),
                forecast_count=float(p["count"]),
            )
            for p in data
        ]
    if args.bid_samples or args.value_samples:
        if not (args.bid_samples and args.value_samples):
            raise CliError("need both --bid-samples and --value-samples", EXIT_VALIDATION)
        if args.count is None:
            raise CliError("--count is required with sample files", EXIT_VALIDATION)
        bid_mu, bid_sigma = fit_lognormal(_read_sample_file(args.bid_samples))
        value_mu, value_sigma = fit_lognormal(_read_sample_file(args.value_samples))
        for name, sigma in (("bid", bid_sigma), ("value", value_sigma)):
            if sigma <= 1e-6:
                print(f"warning: degenerate {name} samples, sigma floored at 1e-6")
        return [
            PlacementPriors(
                bid_mu=bid_mu,
                bid_sigma=bid_sigma,
                value_mu=value_mu,
                value_sigma=value_sigma,
                forecast_count=args.count,
            )
        ]
    required = ("bid_mu", "bid_sigma", "value_mu", "value_sigma", "count")
    if any(getattr(args, name) is None for name in required):
        raise CliError(
            "give --priors, sample files, or all of --bid-mu --bid-sigma "
            "--value-mu --value-sigma --count",
            EXIT_VALIDATION,
        )
    return [
        PlacementPriors(
            bid_mu=args.bid_mu,
            bid_sigma=args.bid_sigma,
            value_mu=args.value_mu,
            value_sigma=args.value_sigma,
            forecast_count=args.count,
        )
    ]


def cmd_coldstart(args) -> int:
    try:
        priors = _coldstart_priors(args)
        result = solve_lambda0_multi(priors, args.budget)
    except (ColdStartError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"invalid priors: {exc}", EXIT_VALIDATION) from None
    if args.out:
        out_dir = Path(args.out)
        _prepare_outputs(out_dir, ["coldstart_grid.csv"], args.force)
        center = result.lam if not result.unconstrained else 1.0
        grid = np.geomspace(center / 100.0, center * 100.0, 81)
        total = sum(p.forecast_count for p in priors)
        rows = []
        for lam in grid:
            spend = sum(
                p.forecast_count * expected_spend_per_opportunity(p, float(lam)) for p in priors
            )
            rows.append((repr(float(lam)), repr(spend / total)))
        _write_csv(out_dir / "coldstart_grid.csv", ["lambda", "spend_per_opportunity"], rows)
    if result.unconstrained:
        print(f"lambda0={_g6(result.lam)} (budget unconstrained at this traffic)")
    else:
        print(f"lambda0={_g6(result.lam)} spend_rate={_g6(result.spend_rate)}")
    return EXIT_OK


def _sweep_one(scenario_path: str, out_dir: str, seed: int, force: bool) -> tuple[int, str]:
    scenario = load_scenario(scenario_path, seed_override=seed)
    target = Path(out_dir) / f"seed_{seed}"
    ns = argparse.Namespace(
        scenario=scenario_path, out=str(target), seed=seed, force=force, roi=False
    )
    cmd_run(ns)
    metrics = _read_kv_csv(target / "metrics.csv")
    return seed, (
        f"seed={seed} spend={_g6(float(metrics['total_spend']))} "
        f"results={_g6(float(metrics['total_value']))}"
    )


def cmd_sweep(args) -> int:
    try:
        load_scenario(args.scenario)
    except (ScenarioError, FileNotFoundError) as exc:
        raise CliError(f"invalid scenario: {exc}", EXIT_VALIDATION) from None
    base = args.seed if args.seed is not None else load_scenario(args.scenario).seed
    seeds = [base + i for i in range(args.sweep_seeds)]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(
                pool.map(
                    _sweep_one,
                    [args.scenario] * len(seeds),
                    [args.out] * len(seeds),
                    seeds,
                    [args.force] * len(seeds),
                )
            )
    else:
        results = [_sweep_one(args.scenario, args.out, s, args.force) for s in seeds]
    for _, line in sorted(results):
        print(line)
    return EXIT_OK


_LOG_COLUMNS = [
    "time",
    "placement_id",
    "value",
    "auction_type",
    "reserve",
    "competitor_family",
    "competitor_p1",
    "competitor_p2",
    "clearing_bid",
    "windows",
]


def load_log_csv(path: str | Path) -> OpportunityLog:
    """Read an opportunity log CSV (schema in the module docstring)."""
    mechanisms: dict[tuple, MechanismSpec] = {}
    records = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _LOG_COLUMNS:
            raise CliError(
                f"{path}: expected columns {','.join(_LOG_COLUMNS)}", EXIT_VALIDATION
            )
        for i, row in enumerate(reader):
            family = row["competitor_family"]
            if family == "lognormal":
                comp = {"family": family, "mu": row["competitor_p1"], "sigma": row["competitor_p2"]}
            elif family == "uniform":
                comp = {"family": family, "lo": row["competitor_p1"], "hi": row["competitor_p2"]}
            else:
                raise CliError(
                    f"{path}: row {i + 1}: unsupported competitor family {family!r}",
                    EXIT_VALIDATION,
                )
            key = (row["auction_type"], row["reserve"], family, row["competitor_p1"], row["competitor_p2"])
            try:
                if key not in mechanisms:
                    mechanisms[key] = MechanismSpec(
                        auction_type=row["auction_type"],
                        reserve=float(row["reserve"]),
                        competitor=competitor_from_dict(comp),
                    )
                windows = tuple(w for w in row["windows"].split(";") if w)
                records.append(
                    LogRecord(
                        time=float(row["time"]),
                        placement=row["placement_id"],
                        value=float(row["value"]),
                        mechanism=mechanisms[key],
                        clearing_bid=float(row["clearing_bid"]) if row["clearing_bid"] else None,
                        windows=windows,
                    )
                )
            except (MechanismError, OracleError, ValueError) as exc:
                raise CliError(f"{path}: row {i + 1}: {exc}", EXIT_VALIDATION) from None
    if not records:
        raise CliError(f"{path}: empty log", EXIT_VALIDATION)
    return OpportunityLog(records)


def _windows_from_json(path: str) -> tuple[tuple[DeliveryWindow, ...], tuple[GuaranteeWindow, ...]]:
    data = json.loads(Path(path).read_text())
    delivery = tuple(
        DeliveryWindow(id=str(w["id"]), start=int(w["start"]), end=int(w["end"]), cap=float(w["cap"]))
        for w in data.get("delivery_windows", [])
    )
    guarantee = tuple(
        GuaranteeWindow(
            id=str(w["id"]), start=int(w["start"]), end=int(w["end"]), floor=float(w["floor"])
        )
        for w in data.get("guarantee_windows", [])
    )
    return delivery, guarantee


def cmd_oracle(args) -> int:
    log = load_log_csv(args.log)
    delivery, guarantee = ((), ())
    if args.windows:
        try:
            delivery, guarantee = _windows_from_json(args.windows)
        except (KeyError, ValueError, json.JSONDecodeError, PacingError) as exc:
            raise CliError(f"invalid windows file: {exc}", EXIT_VALIDATION) from None
    try:
        constraints = ConstraintSet(
            budget=args.budget,
            cost_target=args.cost_target,
            delivery_windows=delivery,
            guarantee_windows=guarantee,
        )
    except PacingError as exc:
        raise CliError(f"invalid constraints: {exc}", EXIT_VALIDATION) from None

    out_dir = Path(args.out)
    _prepare_outputs(out_dir, ["oracle_multipliers.csv", "oracle_curves.csv"], args.force)
    try:
        if _constrained(constraints):
            kkt = solve_kkt_grid(log, constraints)
            profile = kkt.profile
            rep = kkt.replay
            rows: list[tuple[str, object]] = [
                ("lambda", profile.lam),
                ("mu", profile.mu),
                ("spend", rep.spend),
                ("value", rep.value),
                ("feasible", kkt.feasible),
            ]
            for wid, lam_k in profile.window_lambda.items():
                rows.append((f"lambda_{wid}", lam_k))
            for wid, mu_k in profile.window_mu.items():
                rows.append((f"mu_{wid}", mu_k))
            print("kkt residual report:")
            for name, residual in kkt.residuals.items():
                rows.append((f"kkt_residual_{name}", residual))
                print(f"  {name}: {_g6(residual)}")
            for note in kkt.notes:
                print(f"  note: {note}")
            lam_star = profile.lam
        else:
            sol = solve_lambda_star(log, args.budget)
            rows = [
                ("lambda", sol.lam),
                ("unconstrained", sol.unconstrained),
                ("spend", sol.spend),
                ("value", sol.value),
            ]
            if sol.bracket is not None:
                rows.append(("bracket_lo", sol.bracket[0]))
                rows.append(("bracket_hi", sol.bracket[1]))
            lam_star = sol.lam
            print(
                f"lambda={_g6(sol.lam)} spend={_g6(sol.spend)} value={_g6(sol.value)}"
                + (" (budget unconstrained)" if sol.unconstrained else "")
            )
    except OracleError as exc:
        raise CliError(f"oracle failed: {exc}", EXIT_RUNTIME) from None

    grid = np.geomspace(max(lam_star, 1e-9) / 8.0, max(lam_star, 1e-9) * 8.0, 33)
    curve_rows = []
    for lam in grid:
        r = replay(log, MultiplierProfile(lam=float(lam)))
        curve_rows.append((repr(float(lam)), repr(r.spend), repr(r.value)))
    _write_csv(out_dir / "oracle_curves.csv", ["lambda", "spend", "value"], curve_rows)
    _write_kv_csv(out_dir / "oracle_multipliers.csv", rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualbid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario episode")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--force", action="store_true")
    p_run.add_argument("--roi", action="store_true", help="include marginal ROI in metrics")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="compare a finished run against the hindsight oracle")
    p_cmp.add_argument("--run", required=True, help="output directory of a completed run")
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument("--force", action="store_true")
    p_cmp.set_defaults(func=cmd_compare)

    p_cold = sub.add_parser("coldstart", help="closed-form initial multiplier")
    p_cold.add_argument("--budget", type=float, required=True)
    p_cold.add_argument("--count", type=float, default=None, help="forecast opportunity count")
    p_cold.add_argument("--bid-mu", type=float, default=None)
    p_cold.add_argument("--bid-sigma", type=float, default=None)
    p_cold.add_argument("--value-mu", type=float, default=None)
    p_cold.add_argument("--value-sigma", type=float, default=None)
    p_cold.add_argument("--bid-samples", default=None, help="file with one bid per line")
    p_cold.add_argument("--value-samples", default=None, help="file with one value per line")
    p_cold.add_argument("--priors", default=None, help="JSON list of per-placement priors")
    p_cold.add_argument("--out", default=None)
    p_cold.add_argument("--force", action="store_true")
    p_cold.set_defaults(func=cmd_coldstart)

    p_sweep = sub.add_parser("sweep", help="run several seeds with isolated outputs")
    p_sweep.add_argument("--scenario", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--sweep-seeds", type=int, required=True)
    p_sweep.add_argument("--seed", type=int, default=None, help="base seed (default: scenario)")
    p_sweep.add_argument("--jobs", type=int, default=4)
    p_sweep.add_argument("--force", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_oracle = sub.add_parser("oracle", help="hindsight multipliers for a log CSV")
    p_oracle.add_argument("--log", required=True)
    p_oracle.add_argument("--budget", type=float, required=True)
    p_oracle.add_argument("--cost-target", type=float, default=None)
    p_oracle.add_argument("--windows", default=None, help="JSON window constraint definitions")
    p_oracle.add_argument("--out", required=True)
    p_oracle.add_argument("--force", action="store_true")
    p_oracle.set_defaults(func=cmd_oracle)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ScenarioError, PacingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
