"""Command line entry point.

Every subcommand runs one suite of :func:`kvflows.harness.run_experiment` on a
config file (or a bundled config name such as ``additive-gaussian``).  The
exit status is 0 on success, 1 when an acceptance-tagged check fails and 2
for config or output errors.  ``KVFLOWS_WORKERS`` sets the worker count.
"""
from __future__ import annotations

import argparse
import os
import sys
from importlib import resources

from .config import load_config
from .errors import ConfigInvalid, OutputUnwritable
from .harness import run_experiment
from .parallel import WORKERS_ENV

COMMANDS = {
    "simulate": "simulate replicas; write trajectories and measure checkpoints",
    "check-calculus": "finite-difference oracles for intrinsic derivatives, chain rule, Ito formula, duality",
    "kv-kernels": "chaos kernels by semigroup, projection and Clark-Ocone estimators",
    "kv-diagnostics": "variance budget against first-order chaos energy",
    "stability": "sensitivity of the measure flow to the initial measure",
    "convergence": "strong self-convergence order on a dyadic step ladder",
    "picard": "frozen-measure iteration against the direct solver",
}


def bundled_configs():
    root = resources.files("kvflows") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_config_path(name: str) -> str:
    if os.path.exists(name):
        return name
    candidate = resources.files("kvflows") / "configs" / f"{name}.json"
    if candidate.is_file():
        return str(candidate)
    raise ConfigInvalid(f"no config file {name!r} (bundled: {', '.join(bundled_configs())})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvflows", description=__doc__.split("\n\n")[0],
                                     epilog=f"Set {WORKERS_ENV}=<n> to use n worker processes.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, help="config file, or a bundled config name")
        p.add_argument("--out", help="output directory (default: the config's 'output')")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--replicas", type=int, help="override budgets.replicas")
        if name == "kv-kernels":
            p.add_argument("--order", type=int, choices=(1, 2), default=1, help="kernel order")
    sub.add_parser("list-configs", help="print the names of the bundled configs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-configs":
        print("\n".join(bundled_configs()))
        return 0
    try:
        cfg = load_config(resolve_config_path(args.config))
        cfg = cfg.with_overrides(seed=args.seed, replicas=args.replicas, output=args.out)
        res = run_experiment(cfg, suites=[args.command], kv_order=getattr(args, "order", 1))
    except (ConfigInvalid, OutputUnwritable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rep = res.report
    print(f"{rep['experiment']} [{rep['config_hash'][:12]}] seed={rep['seed']}: "
          f"{rep['records']} records, {rep['passed']} passed, {rep['failed']} failed -> {res.out_dir}")
    for test in rep["acceptance_failed"]:
        print(f"  FAILED {test}")
    return 0 if res.success else 1


if __name__ == "__main__":
    sys.exit(main())
