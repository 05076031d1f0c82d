"""Command line entry point: ``ducb <command> [options]``.

Tables go to stdout as CSV so they can be piped; diagnostics go to stderr.
Exit codes: 0 success, 2 config error, 3 IO error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import bounds
from .divergence import empirical_divergences, exact_divergences
from .env import TabularEnvironment, load_environment
from .experiment import ConfigError, load_config, run_experiment
from .experts import TabularExpert, load_experts

EXIT_CONFIG = 2
EXIT_IO = 3


def _writer():
    return csv.writer(sys.stdout, lineterminator="\n")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def cmd_run(args) -> int:
    if not args.config:
        raise ConfigError("run needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.reps is not None:
        cfg.reps = args.reps
    if args.policy:
        cfg.policies = [p.strip() for p in args.policy.split(",") if p.strip()]
    cfg.validate()
    summary = run_experiment(cfg, out_dir=args.out, quiet=args.quiet)
    w = _writer()
    w.writerow(["policy", "t", "mean_regret", "std_regret"])
    for policy, stats in summary["policies"].items():
        for t, m, s in zip(summary["checkpoints"], stats["mean_regret"], stats["std_regret"]):
            w.writerow([policy, t, m, s])
    return 0


def cmd_bounds(args) -> int:
    """Gap profile file: ``{"gaps": [...]} or {"means": [...]}, "T", "M", "sigma"``."""
    if not args.config:
        raise ConfigError("bounds needs --config")
    spec = _read_json(args.config)
    try:
        prof = (bounds.GapProfile.from_means(spec["means"]) if "means" in spec
                else bounds.GapProfile(spec["gaps"]))
        T = int(spec.get("T", 10000))
        rows = []
        for which, key in (("r1", "M"), ("r2", "sigma")):
            if key in spec:
                rows.append(bounds.bound_summary(prof, T, float(spec[key]), which))
        if not rows:
            raise ConfigError("bounds config needs 'M' and/or 'sigma'")
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad gap profile: {exc}") from None
    w = _writer()
    w.writerow(["which", "quantity", "value"])
    for r in rows:
        for k, v in r.items():
            if k != "which":
                w.writerow([r["which"], k, v])
    return 0


def cmd_lambda_mc(args) -> int:
    sizes = [int(n) for n in args.sizes.split(",")]
    reps = args.reps or 5000
    rng = np.random.default_rng(args.seed or 0)
    w = _writer()
    w.writerow(["N", "delta2", "reps", "mean_lambda", "ceiling"])
    for N in sizes:
        mean, ceiling = bounds.lambda_expectation_check(N, args.delta2, reps, rng)
        w.writerow([N, args.delta2, reps, mean, ceiling])
    return 0


def cmd_instance_terms(args) -> int:
    sizes = [int(n) for n in args.sizes.split(",")]
    rows = bounds.instance_term_sweep(sizes, args.delta2, args.reps or 200, args.seed or 0)
    w = _writer()
    w.writerow(["N", "mean_ducb_term", "mean_ucb1_term", "mean_ratio"])
    for row in rows:
        w.writerow(row)
    return 0


def cmd_divergence(args) -> int:
    if not args.config:
        raise ConfigError("divergence needs --config (an expert file)")
    experts = load_experts(args.config)
    if args.env:
        env = load_environment(args.env)
        if isinstance(env, TabularEnvironment) and all(isinstance(e, TabularExpert) for e in experts):
            div = exact_divergences(experts, env.context_probs)
        else:
            contexts = (list(env.features) if not isinstance(env, TabularEnvironment)
                        else np.random.default_rng(args.seed or 0).choice(
                            env.num_contexts, 10000, p=env.context_probs).tolist())
            div = empirical_divergences(experts, contexts)
    elif all(isinstance(e, TabularExpert) for e in experts):
        C = experts[0].num_contexts
        div = exact_divergences(experts, np.full(C, 1.0 / C))
    else:
        raise ConfigError("softmax experts need --env to supply contexts")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "divergence.json", "w") as fh:
            json.dump(div.to_dict(), fh, indent=2)
    w = _writer()
    w.writerow(["i", "j", "M", "sigma"])
    for i in range(div.size):
        for j in range(div.size):
            w.writerow([i, j, div.m[i, j], div.sigma[i, j]])
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config or input file")
    common.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    common.add_argument("--reps", type=int, help="number of replications")
    common.add_argument("--out", help="output directory")
    common.add_argument("--policy", help="comma-separated policy names")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = argparse.ArgumentParser(prog="ducb", description="D-UCB experiments and bound evaluation")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run an experiment config").set_defaults(func=cmd_run)
    sub.add_parser("bounds", parents=[common], help="evaluate bounds for a gap profile file") \
        .set_defaults(func=cmd_bounds)
    lm = sub.add_parser("lambda-mc", parents=[common], help="Monte Carlo of lambda under uniform gaps")
    lm.add_argument("--sizes", default="10,100,1000")
    lm.add_argument("--delta2", type=float, default=0.05)
    lm.set_defaults(func=cmd_lambda_mc)
    dv = sub.add_parser("divergence", parents=[common], help="divergence matrices of an expert file")
    dv.add_argument("--env", help="environment file supplying the context distribution")
    dv.set_defaults(func=cmd_divergence)
    it = sub.add_parser("instance-terms", parents=[common], help="D-UCB vs UCB-1 instance terms over N")
    it.add_argument("--sizes", default="10,20,40,80,160,320")
    it.add_argument("--delta2", type=float, default=0.1)
    it.set_defaults(func=cmd_instance_terms)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
