"""
Command line interface.

    sliceorch run --config experiments/safe.json [--seed 0 1] [--algo safe] [--set safe.clip_eps=0.1]
    sliceorch report out/safe gate-off=out-gate-off/safe --out cdf.csv --usage-out usage.csv
    sliceorch demo-collect --config experiments/imitation.json --out demos.jsonl
    sliceorch bc --config experiments/imitation.json --demos demos.jsonl --out policy.ckpt

Exit codes: 0 success, 1 configuration error, 2 any other failure.
"""
import os
import sys
import logging
import argparse
from collections import OrderedDict
from typing import List, Optional

import numpy as np

from sliceorch import __version__
from sliceorch.config import ALGORITHMS, ExperimentConfig, load_config, parse_override
from sliceorch.env import SliceEnv
from sliceorch.errors import ConfigurationError, SliceOrchError, ValidationError
from sliceorch.imitation import bc_train, collect_demonstrations, load_demonstrations, save_demonstrations
from sliceorch.neural import GaussianPolicy, save_policy
from sliceorch.orchestrator import (
    BC_LOSS_FILE,
    find_reports,
    run_experiment,
    usage_curve,
    violation_cdf,
    write_cdf,
    write_usage,
)
from sliceorch.report import BC_LOSS_COLUMNS, write_csv
from sliceorch.schema import load_scenario

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILURE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sliceorch", description="Safe DRL orchestration of network slices")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def with_config(sub):
        sub.add_argument("--config", required=True, help="experiment file (JSON)")
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
        sub.add_argument("--seed", type=int, nargs="+", default=None, help="replace the configured seeds")

    run = subparsers.add_parser("run", help="run every (algorithm, seed) cell of an experiment")
    with_config(run)
    run.add_argument("--algo", choices=ALGORITHMS, default=None, help="replace the configured algorithm")
    run.add_argument("--out", default="out", help="output root directory")
    run.add_argument("--workers", type=int, default=1, help="cells run in parallel processes")

    report = subparsers.add_parser("report", help="violation CDF and usage per iteration over completed reports")
    report.add_argument("runs", nargs="+", metavar="[LABEL=]PATH", help="report file or output directory")
    report.add_argument("--out", default="violation_cdf.csv", help="violation CDF written")
    report.add_argument("--usage-out", default="usage.csv", help="usage per iteration written")

    demo = subparsers.add_parser("demo-collect", help="record baseline demonstrations")
    with_config(demo)
    demo.add_argument("--out", default="demonstrations.jsonl")

    bc = subparsers.add_parser("bc", help="behavior cloning of recorded demonstrations")
    with_config(bc)
    bc.add_argument("--demos", required=True, help="demonstration records")
    bc.add_argument("--out", default="policy.ckpt", help="policy checkpoint written")
    return parser


def _load(args) -> ExperimentConfig:
    overrides = OrderedDict(parse_override(assignment) for assignment in args.set)
    if getattr(args, "algo", None):
        overrides["algorithm"] = args.algo
    config = load_config(args.config, overrides)
    if args.seed:
        config = config.copy(update={"seeds": list(args.seed)})
    return config


def cmd_run(args) -> int:
    config = _load(args)
    result = run_experiment(config, out_dir=args.out, workers=args.workers)
    for cell in result.cells:
        print(f"{cell.algorithm}/seed_{cell.seed}: {cell.status} ({cell.directory})")
    return EXIT_OK if result.ok else EXIT_FAILURE


def cmd_report(args) -> int:
    schemes = OrderedDict()
    for run in args.runs:
        label, _, path = run.rpartition("=")
        label = label or os.path.normpath(path)
        paths = find_reports(path)
        if not paths:
            raise ConfigurationError(f"no report found under {path}")
        schemes[label] = paths
    write_cdf(args.out, violation_cdf(schemes))
    write_usage(args.usage_out, usage_curve(schemes))
    print(f"violation CDF of {len(schemes)} scheme(s) written to {args.out}, usage to {args.usage_out}")
    return EXIT_OK


def cmd_demo_collect(args) -> int:
    config = _load(args)
    env = SliceEnv(load_scenario(config.scenario))
    seeds = args.seed or config.imitation.demo_seeds
    demos = collect_demonstrations(env, None, config.imitation.demo_steps, seeds, show_progress=config.show_progress)
    save_demonstrations(args.out, demos)
    print(f"{len(demos)} demonstrations written to {args.out}")
    return EXIT_OK


def cmd_bc(args) -> int:
    config = _load(args)
    env = SliceEnv(load_scenario(config.scenario))
    demos = load_demonstrations(args.demos, env)
    seed = config.seeds[0]
    sizes = [demos.states.shape[1], *config.safe.network.hidden_sizes, demos.actions.shape[1]]
    rng = np.random.default_rng([seed, len(sizes)])
    policy = GaussianPolicy.init(sizes, rng, log_std=config.safe.initial_log_std)
    im = config.imitation
    policy, trace = bc_train(
        policy, demos, im.epochs, im.lr, batch_size=im.batch_size, rng=rng,
        optimizer=config.safe.network.optimizer, show_progress=config.show_progress,
    )
    save_policy(args.out, policy)
    loss_path = os.path.join(os.path.dirname(os.path.abspath(args.out)), BC_LOSS_FILE)
    write_csv(loss_path, BC_LOSS_COLUMNS, [{"epoch": i, "loss": loss} for i, loss in enumerate(trace)])
    if trace:
        print(f"bc loss {trace[0]:.6g} -> {trace[-1]:.6g}; policy written to {args.out}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "report": cmd_report,
    "demo-collect": cmd_demo_collect,
    "bc": cmd_bc,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, ValidationError) as e:
        for issue in e.format():
            print(f"config error: {issue['diagnostics']}", file=sys.stderr)
        return EXIT_CONFIG
    except SliceOrchError as e:
        for issue in e.format():
            print(f"{issue['code']}: {issue['diagnostics']}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"{args.command} failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
