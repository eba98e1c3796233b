#!/usr/bin/env python3
"""
Command-line front end

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical non-convergence.
Ranges use lo:hi:steps, e.g. --alpha -6:2:64.
"""

import argparse
import logging
import re
import sys
from typing import List, Optional

from pydantic import ValidationError

from calibration import (
    DandelionEmpirical,
    DiamondEmpirical,
    FitConfig,
    calibrate_dandelion,
    calibrate_diamond,
    calibrate_general,
)
from config import Config
from core import PortfolioSpec, load_portfolio
from dataio import (
    PRESETS,
    histogram,
    load_series,
    read_pmf_csv,
    synthetic_series,
    write_ensemble_csv,
    write_frame,
    write_json,
    write_phase_grid_csv,
    write_pmf_csv,
    write_samples_csv,
    write_series,
    write_state_dump,
)
from ensemble import UncertaintyBox, detect_family, run_ensemble
from errors import ConfigurationError, ConvergenceError, JungleError
from exact_models import (
    DandelionParams,
    DiamondParams,
    binomial_pmf,
    dandelion_pmf,
    diamond_pmf,
    pair_contagion_pmf,
)
from risk import scan_phase, var_es
from sampler import McmcConfig, enumerate_exact, gibbs_sample, losses_from_states
from utils import create_error_message, parse_range

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NOT_CONVERGED = 2

NEGATIVE_RANGE = re.compile(r"^-[\d.]+:")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Report usage problems as exceptions so they map to exit code 1"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _attach_negative_ranges(argv: List[str]) -> List[str]:
    """Rewrite '--alpha -6:2:64' as '--alpha=-6:2:64'; argparse reads a leading minus as an option"""
    out: List[str] = []
    for token in argv:
        if out and out[-1].startswith("--") and "=" not in out[-1] and NEGATIVE_RANGE.match(token):
            out[-1] = f"{out[-1]}={token}"
        else:
            out.append(token)
    return out


def _range(text: str):
    try:
        return parse_range(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} {getattr(args, 'model', '')}: missing {', '.join(missing)}".replace("  ", " "))


def _spec_from_config(args) -> PortfolioSpec:
    _require(args, "config")
    return load_portfolio(args.config)


def _dandelion_empirical(args) -> DandelionEmpirical:
    if args.config:
        spec = _spec_from_config(args)
        if detect_family(spec) != "dandelion":
            raise ConfigurationError(f"{args.config} does not describe a homogeneous Dandelion portfolio")
        hub = spec.hub_node()
        peripheral = [i for i in range(spec.n) if i != hub]
        return DandelionEmpirical(n=len(peripheral), p=spec.p[peripheral[0]], p0=spec.p[hub],
                                  rho=next(iter(spec.rho.values())))
    _require(args, "n", "p", "p0", "rho")
    return DandelionEmpirical(n=args.n, p=args.p, p0=args.p0, rho=args.rho)


def _diamond_empirical(args) -> DiamondEmpirical:
    if args.config:
        spec = _spec_from_config(args)
        if detect_family(spec) != "diamond":
            raise ConfigurationError(f"{args.config} does not describe a homogeneous Diamond portfolio")
        return DiamondEmpirical(n=spec.n, p=spec.p[0], rho=next(iter(spec.rho.values())))
    _require(args, "n", "p", "rho")
    return DiamondEmpirical(n=args.n, p=args.p, rho=args.rho)


def _fit_config(args) -> FitConfig:
    values = {"mode": args.mode, "max_iter": args.max_iter}
    if args.tol is not None:
        values["tol"] = args.tol
    if args.seed is not None:
        values["seed"] = args.seed
    return FitConfig(**values)


def _mcmc_config(args) -> McmcConfig:
    values = {"chains": args.chains, "walkers": args.walkers, "draws": args.draws}
    if args.burn_in is not None:
        values["burn_in"] = args.burn_in
    if args.thin is not None:
        values["thin"] = args.thin
    if args.seed is not None:
        values["seed"] = args.seed
    return McmcConfig(**values)


def _emit_pmf_or_risk(pmf, args) -> str:
    if args.pmf_out:
        write_pmf_csv(pmf, args.pmf_out)
    if args.risk is not None:
        return write_json(var_es(pmf, args.risk).to_dict(), args.out)
    return write_pmf_csv(pmf, args.out)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_solve(args) -> str:
    model = args.model
    if model == "binomial":
        _require(args, "n", "p")
        pmf = binomial_pmf(args.n, args.p)
    elif model == "pair":
        _require(args, "n", "alpha", "beta")
        pmf = pair_contagion_pmf(args.n, args.alpha, args.beta).pmf
    elif model == "dandelion":
        if args.alpha is not None and args.beta is not None and args.alpha0 is not None:
            _require(args, "n")
            params = DandelionParams(n=args.n, alpha0=args.alpha0, alpha=args.alpha, beta=args.beta)
        else:
            params = calibrate_dandelion(_dandelion_empirical(args)).params
        pmf = dandelion_pmf(params)
    elif model == "diamond":
        if args.alpha is not None and args.beta is not None:
            _require(args, "n")
            params = DiamondParams(n=args.n, alpha=args.alpha, beta=args.beta)
        else:
            params = calibrate_diamond(_diamond_empirical(args)).params
        pmf = diamond_pmf(params)
    else:
        spec = _spec_from_config(args)
        params = calibrate_general(spec, _fit_config(args)).params
        pmf = enumerate_exact(params).pmf
    return _emit_pmf_or_risk(pmf, args)


def cmd_calibrate(args) -> str:
    if args.model == "dandelion":
        result = calibrate_dandelion(_dandelion_empirical(args))
    elif args.model == "diamond":
        result = calibrate_diamond(_diamond_empirical(args), max_iter=args.max_iter,
                                   **({"tol": args.tol} if args.tol is not None else {}))
    else:
        result = calibrate_general(_spec_from_config(args), _fit_config(args))
    return write_json(result.to_dict(), args.out)


def cmd_sample(args) -> str:
    spec = _spec_from_config(args)
    params = calibrate_general(spec, _fit_config(args)).params
    samples = gibbs_sample(params, _mcmc_config(args))
    losses = losses_from_states(samples, spec)
    if args.dump_states:
        write_state_dump(samples, args.dump_states)
    if args.summary:
        write_json({
            "losses": losses.summary(),
            "diagnostics": samples.diagnostics.to_dict(),
        }, args.summary)
    return write_samples_csv(samples, losses.losses, args.out)


def cmd_risk(args) -> str:
    pmf = read_pmf_csv(args.input)
    return write_json(var_es(pmf, args.confidence).to_dict(), args.out)


def cmd_scan(args) -> str:
    grid = scan_phase(args.n, args.alpha, args.beta, critical_method=args.critical_method)
    if args.summary:
        critical = grid.critical_point_estimate
        write_json({
            "n": args.n,
            "critical_point": None if critical is None else {"alpha": critical[0], "beta": critical[1]},
            "critical_method": grid.critical_method,
            "transition_line": grid.transition_line.tolist(),
        }, args.summary)
    return write_phase_grid_csv(grid, args.out)


def cmd_ensemble(args) -> str:
    spec = _spec_from_config(args)
    box_values = {"dp": args.dp, "drho": args.drho, "samples": args.samples}
    if args.seed is not None:
        box_values["seed"] = args.seed
    report = run_ensemble(spec, UncertaintyBox(**box_values), confidence=args.confidence,
                          fit_config=_fit_config(args))
    if args.csv:
        write_ensemble_csv(report, args.csv)
    return write_json(report.to_dict(), args.out)


def cmd_histogram(args) -> str:
    if args.synthetic:
        preset = dict(PRESETS[args.synthetic])
        series = [synthetic_series(seed=args.seed, **preset)]
        if args.series_out:
            write_series(series, args.series_out)
    else:
        _require(args, "input")
        series = load_series(args.input)
    if args.cohort:
        series = [s for s in series if s.cohort == args.cohort]
    hist = histogram(series, args.bins)
    return write_frame(hist.to_frame(), args.out)


def cmd_check_env(args) -> str:
    return write_json(Config.validate_config(), args.out)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_output(parser):
    parser.add_argument("--out", help="output path (default: standard output)")


def _add_fit(parser):
    parser.add_argument("--tol", type=float, help="calibration tolerance (default 1e-6 exact, 1e-3 sampled)")
    parser.add_argument("--max-iter", type=int, default=500, help="maximum calibration iterations")
    parser.add_argument("--mode", choices=["auto", "exact", "sampled"], default="auto",
                        help="general calibration mode (auto: exact up to JUNGLE_ENUMERATION_THRESHOLD nodes)")
    parser.add_argument("--seed", type=int, help="random seed (default JUNGLE_SEED)")


def _add_empirical(parser):
    parser.add_argument("--config", help="portfolio spec JSON")
    parser.add_argument("--n", type=int, help="node count (peripheral count for dandelion)")
    parser.add_argument("--p", type=float, help="default probability")
    parser.add_argument("--p0", type=float, help="hub default probability (dandelion)")
    parser.add_argument("--rho", type=float, help="default correlation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jungle", description="Maximum-entropy credit contagion: loss distributions, "
                                                 "calibration, sampling and systemic-risk scans")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    solve = sub.add_parser("solve", help="exact loss pmf")
    solve.add_argument("model", choices=["binomial", "pair", "dandelion", "diamond", "general"])
    _add_empirical(solve)
    solve.add_argument("--alpha", type=float, help="field (skips calibration)")
    solve.add_argument("--alpha0", type=float, help="hub field (dandelion)")
    solve.add_argument("--beta", type=float, help="coupling (skips calibration)")
    solve.add_argument("--risk", type=float, metavar="C", help="emit VaR/ES at confidence C instead of the pmf")
    solve.add_argument("--pmf-out", help="also write the pmf CSV here")
    _add_fit(solve)
    _add_output(solve)
    solve.set_defaults(handler=cmd_solve)

    calibrate = sub.add_parser("calibrate", help="invert empirical moments into model parameters")
    calibrate.add_argument("model", choices=["dandelion", "diamond", "general"])
    _add_empirical(calibrate)
    _add_fit(calibrate)
    _add_output(calibrate)
    calibrate.set_defaults(handler=cmd_calibrate)

    sample = sub.add_parser("sample", help="Gibbs-sample a calibrated portfolio")
    sample.add_argument("--config", required=True, help="portfolio spec JSON")
    sample.add_argument("--chains", type=int, default=4)
    sample.add_argument("--walkers", type=int, default=1)
    sample.add_argument("--draws", type=int, default=1000, help="retained draws per walker")
    sample.add_argument("--burn-in", type=int, help="sweeps discarded per chain (default JUNGLE_BURN_IN)")
    sample.add_argument("--thin", type=int, help="sweeps between retained draws (default JUNGLE_THIN)")
    sample.add_argument("--dump-states", help="write packed state vectors here")
    sample.add_argument("--summary", help="write loss summary and diagnostics JSON here")
    _add_fit(sample)
    _add_output(sample)
    sample.set_defaults(handler=cmd_sample)

    risk = sub.add_parser("risk", help="VaR, ES and modes of a pmf CSV")
    risk.add_argument("--input", required=True, help="pmf CSV (loss_count,loss_fraction,probability)")
    risk.add_argument("--confidence", type=float, default=0.99)
    _add_output(risk)
    risk.set_defaults(handler=cmd_risk)

    scan = sub.add_parser("scan", help="Diamond phase diagram (plot-ready CSV)")
    scan.add_argument("model", choices=["diamond"])
    scan.add_argument("--n", type=int, required=True)
    scan.add_argument("--alpha", type=_range, required=True, help="lo:hi:steps, e.g. -6:2:64")
    scan.add_argument("--beta", type=_range, required=True, help="lo:hi:steps, e.g. 0:0.2:64")
    scan.add_argument("--critical-method", choices=["bimodal", "half_max"], default="bimodal")
    scan.add_argument("--summary", help="write critical point and transition line JSON here")
    _add_output(scan)
    scan.set_defaults(handler=cmd_scan)

    ens = sub.add_parser("ensemble", help="model-risk ensemble over an uncertainty box")
    ens.add_argument("--config", required=True, help="portfolio spec JSON")
    ens.add_argument("--dp", type=float, default=0.0, help="half-width on every p_i")
    ens.add_argument("--drho", type=float, default=0.0, help="half-width on every rho_ij")
    ens.add_argument("--samples", type=int, default=16)
    ens.add_argument("--confidence", type=float, default=0.99)
    ens.add_argument("--csv", help="write per-sample CSV here")
    _add_fit(ens)
    _add_output(ens)
    ens.set_defaults(handler=cmd_ensemble)

    hist = sub.add_parser("histogram", help="histogram of default-rate series")
    hist.add_argument("--input", help="series CSV (year,cohort,rate[,count])")
    hist.add_argument("--synthetic", choices=sorted(PRESETS), help="generate a synthetic series instead")
    hist.add_argument("--series-out", help="write the synthetic series CSV here")
    hist.add_argument("--cohort", help="restrict to one cohort")
    hist.add_argument("--bins", type=int, default=20)
    hist.add_argument("--seed", type=int)
    _add_output(hist)
    hist.set_defaults(handler=cmd_histogram)

    check = sub.add_parser("check-env", help="show the effective configuration and its problems")
    _add_output(check)
    check.set_defaults(handler=cmd_check_env)

    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Execute one command; returns the exit code"""
    try:
        argv = sys.argv[1:] if argv is None else list(argv)
        args = build_parser().parse_args(_attach_negative_ranges(argv))
        text = args.handler(args)
        if not args.out or args.out == "-":
            sys.stdout.write(text)
        return EXIT_OK
    except ConvergenceError as e:
        print(create_error_message(e, "convergence"), file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (UsageError, JungleError, ValidationError, ValueError, OSError) as e:
        print(create_error_message(e, "invalid input"), file=sys.stderr)
        return EXIT_INVALID


def main():
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
