"""
Command-line entry point for crtsurv.

Examples:
python main.py fit --data results/scenario_1_seed2025.csv --formula "W1 + W2 + Z1 + Z2" --variance jackknife
python main.py simulate --scenario 1 --seed 2025
python main.py truth --scenario 3 --times 0.5 1
python main.py evaluate --scenario 1 --reps 200 --strategies marginal-o1c1 KM --threads 4
python main.py probe --scenario 3c --reps 100
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from crtsurv.cli_io import COMMANDS, ESTIMANDS, METHODS, OR_BACKENDS, VARIANCES, RunConfig, run
from crtsurv.errors import CRTSurvError

logger = logging.getLogger("crtsurv")


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Doubly robust survival estimands for cluster-randomized trials.")
    parser.add_argument("command", choices=COMMANDS, help="What to run.")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")

    data = parser.add_argument_group("fit")
    data.add_argument("--data", type=Path, help="Participant-level CSV for fit.")
    data.add_argument("--formula", help="Outcome model right-hand side, e.g. 'W1 + W2 + Z1*Z2 + N/50'.")
    data.add_argument("--cens-formula", help="Censoring model right-hand side (defaults to --formula).")
    data.add_argument(
        "--method",
        choices=METHODS,
        default="marginal",
        help=(
            "marginal, frailty or km: AIPWCC with Cox, gamma-frailty Cox or Kaplan-Meier nuisance models. "
            "outcome_regression: standardized outcome model (family from --or-backend). "
            "weighted_km: Kaplan-Meier comparator weighted by 1/N_i at the cluster level."
        ),
    )
    data.add_argument(
        "--or-backend", choices=OR_BACKENDS, default="marginal", help="Cox family for --method outcome_regression."
    )
    data.add_argument("--cluster-col", default="cluster_id")
    data.add_argument("--time-col", default="time")
    data.add_argument("--event-col", default="event")
    data.add_argument("--arm-col", default="arm")
    data.add_argument("--cluster-covariates", nargs="*", default=[], help="Columns constant within cluster.")
    data.add_argument("--curves", type=Path, help="Optional CSV of the estimated curves.")

    est = parser.add_argument_group("estimand")
    est.add_argument("--estimand", choices=ESTIMANDS, default="SPCE")
    est.add_argument("--tau", type=float, nargs="*", default=[], help="RMST horizons (required for RMST).")
    est.add_argument("--times", type=float, nargs="*", default=[], help="Report times (default: observed-time quartiles).")
    est.add_argument("--pi", type=float, default=0.5, help="Randomization probability of arm 1.")
    est.add_argument("--scale", choices=("difference", "ratio"), default="difference")
    est.add_argument("--variance", choices=VARIANCES, default="none")
    est.add_argument("--alpha", type=float, default=0.05)

    sim = parser.add_argument_group("simulation")
    sim.add_argument("--scenario", default="1", help="Preset (1, 2, 3, 3a, 3b, 3c) or a YAML scenario file.")
    sim.add_argument("--clusters", type=int, help="Override the number of clusters per trial.")
    sim.add_argument("--reps", type=int, default=100, help="Replicates for evaluate/probe.")
    sim.add_argument("--truth-clusters", type=int, default=100_000, help="Monte Carlo clusters for the truth.")
    sim.add_argument("--truth", type=Path, help="Truth JSON written by the truth command.")
    sim.add_argument("--strategies", nargs="*", default=["marginal-o1c1"])

    parser.add_argument("--seed", type=int, default=2025)
    parser.add_argument("--threads", type=int, default=1, help="Parallel workers (-1 for all cores).")
    parser.add_argument("--output", type=Path, help="Output path.")
    return parser.parse_args(argv)


def config_from_args(args) -> RunConfig:
    return RunConfig(
        command=args.command,
        dataset=args.data,
        outcome_formula=args.formula,
        censoring_formula=args.cens_formula,
        method=args.method,
        or_backend=args.or_backend,
        estimand=args.estimand,
        taus=tuple(args.tau),
        report_times=tuple(args.times),
        pi=args.pi,
        variance=args.variance,
        alpha=args.alpha,
        scale=args.scale,
        seed=args.seed,
        threads=args.threads,
        output=args.output,
        curves=args.curves,
        cluster_col=args.cluster_col,
        time_col=args.time_col,
        event_col=args.event_col,
        arm_col=args.arm_col,
        cluster_covariates=tuple(args.cluster_covariates),
        scenario=args.scenario,
        n_clusters=args.clusters,
        n_reps=args.reps,
        n_truth_clusters=args.truth_clusters,
        truth=args.truth,
        strategies=tuple(args.strategies),
    )


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    try:
        run(config_from_args(args))
    except CRTSurvError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}), file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFoundError", "message": str(exc), "exit_code": 2}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
