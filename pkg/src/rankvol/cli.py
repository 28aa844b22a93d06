"""Command line surface binding the modules into reproducible workflows.

Every command writes its outputs deterministically (given the same inputs
and seed) and drops a manifest beside them recording the effective
configuration, input digests and the seed actually used. Exit codes:
0 success, 2 input error, 3 numerical error, 4 data-quality failure in
strict mode.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, io
from .calibrate import calibrate, fit_report, lambda_sweep, rebuild_growth_rates
from .errors import (
    BankruptcyError,
    DataQualityError,
    DegenerateHorizonError,
    InconsistentInputsError,
    IngestionError,
    InvalidInputError,
    NumericalBlowupError,
    PartialResultError,
    RankVolError,
)
from .manifest import RunManifest
from .panel import panel_from_trajectory
from .portfolios import PortfolioRule, portfolio_weights, t_star, wealth_path
from .simulate import SimConfig, simulate_path, stationary_moments

_INPUT_ERRORS = (InvalidInputError, IngestionError, InconsistentInputsError)
_NUMERICAL_ERRORS = (
    NumericalBlowupError,
    BankruptcyError,
    DegenerateHorizonError,
    PartialResultError,
)


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dt", type=float, default=1.0 / 2520.0, help="integration step (years)")
    p.add_argument("--substeps", type=int, default=10, help="integration steps per sample")
    p.add_argument("--paths", type=int, default=50, help="number of Monte-Carlo paths")
    p.add_argument("--horizon", type=float, default=100.0, help="simulated horizon (years)")
    p.add_argument("--top-m", type=int, default=None, help="simulate only the top m ranks")
    p.add_argument("--seed", type=int, default=None, help="master seed (drawn if omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankvol",
        description="Rank volatility stabilized market toolchain",
    )
    parser.add_argument("--version", action="version", version=f"rankvol {__version__}")
    parser.add_argument(
        "--config", default=None, help="JSON file of default flag values (flags override)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a raw (date,id,cap) CSV into a panel file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--d", type=int, required=True, help="panel width (top-d rule)")
    p.add_argument("--strict", action="store_true")

    p = sub.add_parser("synth", help="simulate a model and export it as a synthetic panel")
    p.add_argument("--params", required=True, help="model parameter JSON")
    p.add_argument("--output", required=True, help=".rvsp binary or .csv")
    p.add_argument("--burn-in", type=float, default=0.0, help="years discarded before recording")
    _add_sim_flags(p)

    p = sub.add_parser("calibrate", help="estimate all parameters from a panel")
    p.add_argument("--input", required=True, help="panel file (.rvsp or raw CSV)")
    p.add_argument("--output", required=True, help="estimates CSV path")
    p.add_argument("--d", type=int, default=None, help="panel width when ingesting CSV")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--window", type=int, default=15, help="volatility smoothing window")
    p.add_argument("--strict", action="store_true")

    p = sub.add_parser("simulate", help="simulate one trajectory of a model")
    p.add_argument("--params", required=True)
    p.add_argument("--output", required=True, help=".rvsm binary or .csv")
    p.add_argument("--x0", default=None, help="JSON array of initial weights (default uniform)")
    _add_sim_flags(p)

    p = sub.add_parser("moments", help="Monte-Carlo long-run ranked-weight moments")
    p.add_argument("--params", required=True)
    p.add_argument("--output", required=True, help="moments CSV path")
    p.add_argument("--time-average", action="store_true")
    _add_sim_flags(p)

    p = sub.add_parser("implied", help="model-implied collision rates and fit errors")
    p.add_argument("--input", required=True, help="calibration JSON")
    p.add_argument("--output", required=True, help="fit CSV path")
    p.add_argument("--top-n", type=int, default=None)
    _add_sim_flags(p)

    p = sub.add_parser("sweep", help="market-return trade-off table over a grid")
    p.add_argument("--input", required=True, help="panel file")
    p.add_argument("--output", required=True, help="sweep CSV path")
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--grid", default="0,0.11,0.2", help="comma-separated market returns")
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--top-n", type=int, default=None)
    _add_sim_flags(p)

    p = sub.add_parser("portfolio", help="portfolio weights, wealth paths and horizons")
    p.add_argument("--input", required=True, help="trajectory (.rvsm) or calibration JSON")
    p.add_argument("--output", required=True, help="output CSV path")
    p.add_argument("--params", default=None, help="model JSON (trajectory mode, growth rules)")
    p.add_argument("--kind", default="diversity", choices=["market", "diversity", "growth_closed", "growth_open", "large_cap"])
    p.add_argument("--p", type=float, default=0.8, help="diversity exponent")
    p.add_argument("--n-open", type=int, default=None, help="open-market size N")
    p.add_argument("--k-top", type=int, default=None, help="large-cap cutoff k")
    p.add_argument("--rule-json", default=None, help="rule as JSON, overriding the flags")
    p.add_argument("--method", default="simple", choices=["simple", "log"])

    p = sub.add_parser("report", help="bundle all figure-data files for a panel")
    p.add_argument("--input", required=True, help="panel file")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=0.11)
    p.add_argument("--grid", default="0,0.11,0.2")
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--top-n", type=int, default=None)
    p.add_argument("--p", type=float, default=0.8)
    p.add_argument("--n-open", type=int, default=100)
    _add_sim_flags(p)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        overrides = json.loads(Path(args.config).read_text())
        if not isinstance(overrides, dict):
            raise InvalidInputError("config file must hold a JSON object")
        # flags explicitly present on the command line keep priority
        aliases = {"lambda": "lam"}
        given = set()
        for tok in argv or []:
            if tok.startswith("--"):
                name = tok.split("=")[0].lstrip("-").replace("-", "_")
                given.add(aliases.get(name, name))
        for key, value in overrides.items():
            attr = key.replace("-", "_")
            attr = aliases.get(attr, attr)
            if hasattr(args, attr) and attr not in given:
                setattr(args, attr, value)
    return args


def _resolve_seed(args) -> int:
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2**63))
    return int(seed)


def _sim_config(args, seed: int, n_paths: int | None = None) -> SimConfig:
    return SimConfig(
        horizon=args.horizon,
        dt=args.dt,
        substeps_per_sample=args.substeps,
        n_paths=args.paths if n_paths is None else n_paths,
        seed=seed,
        top_m=args.top_m,
    )


def _effective_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    return io._jsonify(cfg)


def _manifest(args, seed=None, inputs=()) -> RunManifest:
    man = RunManifest(command=args.command, config=_effective_config(args), seed=seed)
    for path in inputs:
        man.add_input(path)
    return man


def _rule_from_args(args) -> PortfolioRule:
    if args.rule_json:
        return PortfolioRule.from_json(args.rule_json)
    if args.kind == "diversity":
        return PortfolioRule.diversity(args.p)
    if args.kind == "growth_open":
        if args.n_open is None:
            raise InvalidInputError("--n-open is required for growth_open")
        return PortfolioRule.growth_open(args.n_open)
    if args.kind == "large_cap":
        if args.k_top is None:
            raise InvalidInputError("--k-top is required for large_cap")
        return PortfolioRule.large_cap(args.k_top)
    return PortfolioRule(args.kind)


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> None:
    panel = io.read_panel_csv(args.input, args.d, strict=args.strict)
    io.write_panel(panel, args.output)
    io.dump_json(io.panel_sidecar(panel), Path(args.output).with_suffix(".json"))
    _manifest(args, inputs=[args.input]).write(args.output)


def cmd_synth(args) -> None:
    params = io.read_params(args.params)
    seed = _resolve_seed(args)
    config = _sim_config(args, seed, n_paths=1)
    x0 = np.full(params.d, 1.0 / params.d)
    if args.burn_in > 0:
        warm = SimConfig(
            horizon=args.burn_in + args.horizon,
            dt=args.dt,
            substeps_per_sample=args.substeps,
            seed=seed,
            top_m=args.top_m,
        )
        traj = simulate_path(params, x0, warm)
        keep = traj.times >= args.burn_in - 1e-12
        traj.times = traj.times[keep] - traj.times[keep][0]
        traj.weights = traj.weights[keep]
        traj.log_total_cap = traj.log_total_cap[keep]
    else:
        traj = simulate_path(params, x0, config)
    panel = panel_from_trajectory(traj)
    if str(args.output).endswith(".csv"):
        io.panel_to_csv(panel, args.output)
    else:
        io.write_panel(panel, args.output)
        io.dump_json(io.panel_sidecar(panel), Path(args.output).with_suffix(".json"))
    _manifest(args, seed=seed, inputs=[args.params]).write(args.output)


def cmd_calibrate(args) -> None:
    panel = io.load_panel(args.input, d=args.d, strict=args.strict)
    result = calibrate(panel, args.lam, args.window, strict=args.strict)
    io.write_estimates(result.estimates, args.output)
    io.write_calibration(result, Path(args.output).with_suffix(".calibration.json"))
    _manifest(args, inputs=[args.input]).write(args.output)


def cmd_simulate(args) -> None:
    params = io.read_params(args.params)
    seed = _resolve_seed(args)
    config = _sim_config(args, seed, n_paths=1)
    x0 = np.full(params.d, 1.0 / params.d) if args.x0 is None else np.asarray(json.loads(args.x0))
    traj = simulate_path(params, x0, config)
    if str(args.output).endswith(".csv"):
        io.trajectory_to_csv(traj, args.output)
    else:
        io.write_trajectory(traj, args.output)
    _manifest(args, seed=seed, inputs=[args.params]).write(args.output)


def cmd_moments(args) -> None:
    params = io.read_params(args.params)
    seed = _resolve_seed(args)
    config = _sim_config(args, seed)
    moments = stationary_moments(params, config, time_average=args.time_average)
    io.write_moments(moments, args.output)
    _manifest(args, seed=seed, inputs=[args.params]).write(args.output)


def cmd_implied(args) -> None:
    result = io.read_calibration(args.input)
    seed = _resolve_seed(args)
    config = _sim_config(args, seed)
    moments = stationary_moments(result.params, config)
    report = fit_report(result, moments, args.top_n)
    d = result.params.d
    frame = pd.DataFrame(
        {
            "rank": np.arange(1, d + 1),
            "phi_model": report.phi_model,
            "phi_hat": result.estimates.phi,
            "mu_model": report.mu_model,
            "mu_hat": result.estimates.mu,
            "norm_collision_err": report.norm_collision_err,
            "norm_cdc_err": report.norm_cdc_err,
        }
    )
    frame.to_csv(args.output, index=False)
    io.dump_json(
        {
            "l2_collision": report.l2_collision,
            "l2_cdc": report.l2_cdc,
            "top_n": report.top_n,
            "max_identity_residual": float(np.abs(report.identity_residual).max()),
        },
        Path(args.output).with_suffix(".json"),
    )
    _manifest(args, seed=seed, inputs=[args.input]).write(args.output)


def _parse_grid(text: str) -> np.ndarray:
    try:
        grid = np.array([float(tok) for tok in str(text).split(",") if tok.strip() != ""])
    except ValueError as exc:
        raise InvalidInputError(f"cannot parse grid {text!r}") from exc
    if grid.size == 0:
        raise InvalidInputError("grid must be non-empty")
    return grid


def cmd_sweep(args) -> None:
    panel = io.load_panel(args.input, d=args.d)
    seed = _resolve_seed(args)
    config = _sim_config(args, seed)
    grid = _parse_grid(args.grid)
    sweep = lambda_sweep(panel, grid, config, args.window, args.top_n)
    io.write_sweep(sweep.rows, args.output)
    _manifest(args, seed=seed, inputs=[args.input]).write(args.output)


def cmd_portfolio(args) -> None:
    rule = _rule_from_args(args)
    input_path = Path(args.input)
    head = input_path.open("rb").read(4)
    if head == b"RVSM":
        traj = io.read_trajectory(input_path)
        params = io.read_params(args.params) if args.params else None
        path = wealth_path(traj, rule, params, method=args.method)
        io.write_wealth_path(path, args.output)
        meta = {"rule": json.loads(rule.to_json()), "method": args.method}
    else:
        result = io.read_calibration(input_path)
        mu_hat = result.estimates.mu
        weights = portfolio_weights(rule, mu_hat, result.params)
        io.write_weight_snapshot(weights, args.output, {"mu_hat": mu_hat})
        meta = {"rule": json.loads(rule.to_json()), "evaluated_at": "average_capital_distribution"}
        if rule.kind == "diversity":
            meta["t_star_years"] = t_star(mu_hat, rule.p, result.params.sigma2)
    io.dump_json(meta, Path(args.output).with_suffix(".json"))
    _manifest(args, inputs=[args.input]).write(args.output)


def cmd_report(args) -> None:
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    panel = io.load_panel(args.input, d=args.d)
    seed = _resolve_seed(args)
    config = _sim_config(args, seed)
    grid = _parse_grid(args.grid)
    if args.lam not in grid:
        grid = np.sort(np.append(grid, args.lam))

    sweep = lambda_sweep(panel, grid, config, args.window, args.top_n)
    io.write_sweep(sweep.rows, out_dir / "lambda_tradeoff.csv")

    base = None
    for lam, det in zip(grid, sweep.details):
        if det is not None and float(lam) == float(args.lam):
            base = det
    if base is None:
        raise RankVolError("the requested market return failed to calibrate")
    result, moments, report = base
    d = panel.d

    est_frame = {
        "rank": np.arange(1, d + 1),
        "sigma2_raw": result.estimates.sigma2_raw,
        "sigma2": result.estimates.sigma2,
    }
    pd.DataFrame(est_frame).to_csv(out_dir / "volatility_by_rank.csv", index=False)
    pd.DataFrame(
        {
            "rank": np.arange(1, d + 1),
            "phibar": result.estimates.phibar,
            "phi": result.estimates.phi,
        }
    ).to_csv(out_dir / "collisions_by_rank.csv", index=False)

    growth = {"rank": np.arange(1, d + 1)}
    for lam in grid:
        growth[f"a_lambda_{lam:g}"] = rebuild_growth_rates(result.estimates, float(lam))
    pd.DataFrame(growth).to_csv(out_dir / "growth_params_by_rank.csv", index=False)

    a = result.params.a
    tail_sum = np.cumsum(a[::-1])[::-1]
    tail_max = np.maximum.accumulate(result.params.sigma2[::-1])[::-1]
    pd.DataFrame(
        {
            "rank": np.arange(1, d + 1),
            "tail_sum_a": tail_sum,
            "half_tail_max_sigma2": 0.5 * tail_max,
        }
    ).to_csv(out_dir / "growth_tail_vs_variance.csv", index=False)

    cdc = {"rank": np.arange(1, d + 1), "mu_hat": result.estimates.mu}
    coll_err = {"rank": np.arange(1, d + 1)}
    cdc_err = {"rank": np.arange(1, d + 1)}
    for lam, det in zip(grid, sweep.details):
        if det is None:
            continue
        _, mom_l, rep_l = det
        cdc[f"mu_model_lambda_{lam:g}"] = mom_l.mu
        coll_err[f"err_lambda_{lam:g}"] = rep_l.norm_collision_err
        cdc_err[f"err_lambda_{lam:g}"] = rep_l.norm_cdc_err
    pd.DataFrame(cdc).to_csv(out_dir / "capital_distribution.csv", index=False)
    pd.DataFrame(coll_err).to_csv(out_dir / "collision_errors_by_rank.csv", index=False)
    pd.DataFrame(cdc_err).to_csv(out_dir / "cdc_errors_by_rank.csv", index=False)

    # sampled ranked trajectories from the historical starting point
    x0 = panel.weights()[0]
    traj_cfg = SimConfig(
        horizon=min(panel.span, args.horizon),
        dt=args.dt,
        substeps_per_sample=args.substeps,
        seed=seed,
        top_m=args.top_m,
    )
    traj = simulate_path(result.params, x0, traj_cfg)
    ranked, _, _ = traj.ranked()
    ks = [k for k in (1, 10, 50, 100, 500, 1000) if k <= traj.d]
    frames = []
    for k in ks:
        frames.append(
            pd.DataFrame({"time": traj.times, "rank": k, "weight": ranked[:, k - 1]})
        )
    pd.concat(frames, ignore_index=True).to_csv(out_dir / "ranked_trajectories.csv", index=False)

    mu_hat = result.estimates.mu
    n_open = min(args.n_open, d)
    snapshot = {
        "rank": np.arange(1, d + 1),
        "mu_hat": mu_hat,
        "diversity": portfolio_weights(PortfolioRule.diversity(args.p), mu_hat),
        "growth_open": portfolio_weights(
            PortfolioRule.growth_open(n_open), mu_hat, result.params
        ),
        "growth_closed": portfolio_weights(PortfolioRule.growth_closed(), mu_hat, result.params),
    }
    pd.DataFrame(snapshot).to_csv(out_dir / "portfolio_weights_by_rank.csv", index=False)

    io.write_calibration(result, out_dir / "calibration.json")
    io.write_moments(moments, out_dir / "moments.csv")
    _manifest(args, seed=seed, inputs=[args.input]).write(out_dir)


_HANDLERS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "moments": cmd_moments,
    "implied": cmd_implied,
    "sweep": cmd_sweep,
    "portfolio": cmd_portfolio,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv if argv is not None else sys.argv[1:])
        _HANDLERS[args.command](args)
        return 0
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except DataQualityError as exc:
        print(f"data-quality error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
