"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ratingmatch import harness
from ratingmatch.matching import check_desirable
from ratingmatch.ratings import from_values


def _resolve(path: str) -> Path:
    """Accept a file path or the name of a bundled scenario."""
    p = Path(path)
    if p.exists():
        return p
    for name in (path, f"{path}.json"):
        try:
            return harness.bundled(name)
        except FileNotFoundError:
            pass
    raise harness.ScenarioError(f"{path}: no such file or bundled scenario")


def _out(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else harness.default_out_dir()


def cmd_run(args: argparse.Namespace) -> int:
    scenario = harness.load_scenario(_resolve(args.scenario))
    if args.mode:
        scenario = replace(scenario, mode=args.mode)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    if args.mu is not None:
        scenario = replace(scenario, mu=args.mu)
    if scenario.mode == "sampled" and scenario.seed is None:
        raise harness.ScenarioError("sampled mode needs --seed")
    result = harness.run_scenario(scenario, _out(args))
    v = result.outcome.verdict
    extra = f" (period ~{v.period}, heuristic)" if v.kind == "oscillating" else ""
    print(f"{scenario.name}: {v.kind} at t={v.t}{extra}")
    for f in result.files:
        print(f"  wrote {f}")
    return result.exit_code


def cmd_sweep(args: argparse.Namespace) -> int:
    sweep = harness.load_sweep(_resolve(args.sweep))
    result = harness.run_sweep(sweep, _out(args), jobs=args.jobs)
    print(result.csv(), end="")
    print(f"quality argmax: {result.argmax('quality')}; welfare argmax: {result.argmax('welfare')}")
    return 0


def cmd_max_mu(args: argparse.Namespace) -> int:
    scenario = harness.load_scenario(_resolve(args.scenario))
    found = harness.max_step_size(scenario, args.lo, args.hi, args.res)
    for mu, ok in found.tested:
        print(f"  mu={mu:.6g}: {'converged' if ok else 'not converged'}")
    if found.non_monotone:
        print("warning: convergence was not monotone in the step size")
    if found.mu is None:
        print("no converging step size in range")
        return harness.EXIT_MAX_ITERS
    print(f"largest converging step size: {found.mu:.6g}")
    return 0


def cmd_verify_golden(args: argparse.Namespace) -> int:
    report = harness.verify_golden(args.dir)
    for d in report.diffs:
        print(f"MISMATCH {d}")
    print(f"{len(report.cases)} case(s): {'pass' if report.passed else 'fail'}")
    return 0 if report.passed else harness.EXIT_GOLDEN_MISMATCH


def cmd_check_desirable(args: argparse.Namespace) -> int:
    scenario = harness.load_scenario(_resolve(args.scenario))
    rng = np.random.default_rng(args.seed)
    # every rating held by at least two agents, as in grouped populations
    samples = []
    for _ in range(args.samples):
        K = int(rng.integers(2, 12))
        values = np.unique(np.round(rng.uniform(0.01, 1.0, K), 6))[::-1]
        samples.append(from_values(values, rng.integers(2, 5, len(values))))
    ok = True
    for benefit in sorted({t.benefit for t in scenario.types}, key=repr):
        report = check_desirable(scenario.rule, samples, benefit)
        kinds = ", ".join(sorted(report.kinds())) or "none"
        print(f"{scenario.rule.label} / {benefit.family}{benefit.params}: desirable={report.desirable} violations={kinds}")
        ok &= report.desirable
    return 0 if ok else harness.EXIT_UNDESIRABLE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ratingmatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    p.add_argument("scenario")
    p.add_argument("--out", help=f"output directory (default ${harness.OUT_ENV} or ./out)")
    p.add_argument("--mode", choices=["expected", "sampled"])
    p.add_argument("--seed", type=int)
    p.add_argument("--mu", type=float, help="override the step size")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter sweep")
    p.add_argument("sweep")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("max-mu", help="largest converging step size")
    p.add_argument("scenario")
    p.add_argument("--lo", type=float, required=True)
    p.add_argument("--hi", type=float, required=True)
    p.add_argument("--res", type=float, default=0.01)
    p.set_defaults(func=cmd_max_mu)

    p = sub.add_parser("verify-golden", help="compare current outputs with stored ones")
    p.add_argument("dir")
    p.set_defaults(func=cmd_verify_golden)

    p = sub.add_parser("check-desirable", help="scan the scenario's rule on random distributions")
    p.add_argument("scenario")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_desirable)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (harness.ScenarioError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
