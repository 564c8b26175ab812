"""
Experiment lifecycle: one output directory per (algorithm, seed) cell holding
report.csv, manifest.json and checkpoints/, plus violation CDFs and usage curves over reports.
"""
import os
import glob
import logging
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from sliceorch import __version__
from sliceorch.config import ExperimentConfig
from sliceorch.distributed import build_assignments
from sliceorch.env import ScenarioConfig, SliceEnv
from sliceorch.errors import SchemaMismatchError, TrainingError, describe
from sliceorch.imitation import bc_train, collect_demonstrations, evaluate_imitation, save_demonstrations
from sliceorch.neural import GaussianPolicy, save_checkpoint, save_policy
from sliceorch.report import (
    BC_LOSS_COLUMNS,
    REPORT_COLUMNS,
    read_report,
    write_csv,
    write_manifest,
)
from sliceorch.schema import load_scenario
from sliceorch.training import agent_actor, evaluate_policy, run_baseline, train_distributed, train_safe

logger = logging.getLogger(__name__)

REPORT_FILE = "report.csv"
MANIFEST_FILE = "manifest.json"
BC_LOSS_FILE = "bc_loss.csv"
DEMONSTRATIONS_FILE = "demonstrations.jsonl"
CHECKPOINT_DIR = "checkpoints"
CDF_COLUMNS = ("scheme", "violation_level", "cumulative_probability")
USAGE_COLUMNS = ("scheme", "iteration", "mean_usage", "std_usage", "runs")


@dataclass
class CellResult:
    algorithm: str
    seed: int
    directory: str
    status: str
    errors: List[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "completed"

    @property
    def report_path(self) -> str:
        return os.path.join(self.directory, REPORT_FILE)


@dataclass
class ExperimentResult:
    algorithm: str
    cells: List[CellResult]

    @property
    def ok(self) -> bool:
        return all(cell.ok for cell in self.cells)

    @property
    def report_paths(self) -> List[str]:
        return [cell.report_path for cell in self.cells]


def cell_directory(out_dir: str, algorithm: str, seed: int) -> str:
    return os.path.join(out_dir, algorithm, f"seed_{seed}")


def _save_agents(agents, directory: str):
    os.makedirs(directory, exist_ok=True)
    for agent in agents:
        save_policy(os.path.join(directory, f"{agent.agent_id}.policy.ckpt"), agent.policy)
        save_checkpoint(os.path.join(directory, f"{agent.agent_id}.value.ckpt"), agent.value)
        save_checkpoint(os.path.join(directory, f"{agent.agent_id}.cost_value.ckpt"), agent.cost_value)
        for i, member in enumerate(agent.critic.members):
            save_checkpoint(os.path.join(directory, f"{agent.agent_id}.cost_critic_{i}.ckpt"), member)


def _warm_start(env: SliceEnv, config: ExperimentConfig, seed: int, directory: str, manifest: dict) -> GaussianPolicy:
    im = config.imitation
    demos = collect_demonstrations(env, None, im.demo_steps, im.demo_seeds, show_progress=config.show_progress)
    save_demonstrations(os.path.join(directory, DEMONSTRATIONS_FILE), demos)

    sizes = [demos.states.shape[1], *config.safe.network.hidden_sizes, demos.actions.shape[1]]
    rng = np.random.default_rng([seed, len(sizes)])
    policy = GaussianPolicy.init(sizes, rng, log_std=config.safe.initial_log_std)
    policy, trace = bc_train(
        policy,
        demos,
        im.epochs,
        im.lr,
        batch_size=im.batch_size,
        rng=rng,
        optimizer=config.safe.network.optimizer,
        show_progress=config.show_progress,
    )
    write_csv(
        os.path.join(directory, BC_LOSS_FILE),
        BC_LOSS_COLUMNS,
        [{"epoch": i, "loss": loss} for i, loss in enumerate(trace)],
    )
    eval_seeds = [1000 + seed + e for e in range(im.eval_episodes)]
    policy_usage, baseline_usage, gap = evaluate_imitation(policy, None, env, im.eval_episodes, eval_seeds)
    manifest["imitation"] = {
        "demonstrations": len(demos),
        "policy_usage": policy_usage,
        "baseline_usage": baseline_usage,
        "mean_action_gap": gap,
    }
    return policy


def run_cell(config: ExperimentConfig, seed: int, out_dir: str, scenario: Optional[ScenarioConfig] = None) -> CellResult:
    """Runs one (algorithm, seed) cell; failures are recorded in the manifest, never raised."""
    directory = cell_directory(out_dir, config.algorithm, seed)
    os.makedirs(directory, exist_ok=True)
    report_path = os.path.join(directory, REPORT_FILE)
    manifest = OrderedDict(
        version=__version__,
        algorithm=config.algorithm,
        seed=seed,
        config=config.to_manifest(),
        status="running",
        errors=[],
    )
    logger.info(f"cell {config.algorithm}/seed_{seed} started in {directory}")
    try:
        scenario = scenario or load_scenario(config.scenario)
        manifest["scenario"] = scenario.to_dict()
        manifest["scenario_fingerprint"] = scenario.fingerprint()
        env = SliceEnv(scenario)

        if config.algorithm == "baseline-only":
            report = run_baseline(env, config.iterations, config.safe.rollout_length, seed, report_path)
        elif config.algorithm == "distributed":
            assignments = build_assignments(scenario, config.distributed.mode)
            manifest["assignments"] = [
                {"id": a.agent_id, "domains": list(a.domains), "slices": list(a.slices)} for a in assignments
            ]
            report = train_distributed(
                env, assignments, config.safe, config.distributed, config.iterations, seed,
                report_path=report_path, show_progress=config.show_progress,
            )
        else:
            warm_start = None
            if config.algorithm == "imitation+safe":
                warm_start = _warm_start(env, config, seed, directory, manifest)
            report = train_safe(
                env, config.safe, config.iterations, seed,
                report_path=report_path, show_progress=config.show_progress, warm_start=warm_start,
            )
            if report.agents:
                eval_seeds = [1000 + seed + e for e in range(config.imitation.eval_episodes)]
                actor = agent_actor(report.agents[0], env, gate=config.safe.switch.enabled)
                evaluation = evaluate_policy(env, actor, eval_seeds)
                manifest["evaluation"] = {
                    "seeds": eval_seeds,
                    "mean_usage": evaluation["mean_usage"],
                    "mean_cost": evaluation["mean_cost"],
                    "violation_rate": evaluation["violation_rate"],
                }

        if report.agents:
            _save_agents(report.agents, os.path.join(directory, CHECKPOINT_DIR))
        manifest["iterations_completed"] = len(report)
        manifest["status"] = "completed"
    except TrainingError as e:
        manifest["status"] = "failed"
        manifest["errors"] = describe(e)
        manifest["iterations_completed"] = len(e.report) if e.report is not None else 0
        logger.error(f"cell {config.algorithm}/seed_{seed} failed: {e}")
    except Exception as e:
        manifest["status"] = "failed"
        manifest["errors"] = describe(e)
        logger.error(f"cell {config.algorithm}/seed_{seed} failed: {e}")
    finally:
        write_manifest(os.path.join(directory, MANIFEST_FILE), manifest)

    logger.info(f"cell {config.algorithm}/seed_{seed} {manifest['status']}")
    return CellResult(config.algorithm, seed, directory, manifest["status"], manifest["errors"])


def _run_cell_args(args):
    return run_cell(*args)


def run_experiment(
    config: ExperimentConfig,
    out_dir: str = "out",
    workers: int = 1,
    seeds: Optional[Sequence[int]] = None,
) -> ExperimentResult:
    """
    Runs every seed of the config. Cells are independent and may run in
    separate processes when workers > 1; results keep the seed order.
    An invalid agent partition raises ConfigurationError before any cell starts.
    """
    seeds = list(seeds) if seeds is not None else list(config.seeds)
    scenario = load_scenario(config.scenario)
    if config.algorithm == "distributed":
        build_assignments(scenario, config.distributed.mode)
    jobs = [(config, seed, out_dir, scenario) for seed in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            cells = list(executor.map(_run_cell_args, jobs))
    else:
        cells = [_run_cell_args(job) for job in jobs]
    result = ExperimentResult(config.algorithm, cells)
    if not result.ok:
        failed = [c.seed for c in cells if not c.ok]
        logger.error(f"{config.algorithm}: cells for seeds {failed} failed")
    return result


def find_reports(directory: str) -> List[str]:
    if os.path.isfile(directory):
        return [directory]
    return sorted(glob.glob(os.path.join(directory, "**", REPORT_FILE), recursive=True))


def _as_schemes(reports: Union[Sequence[str], Mapping[str, Sequence[str]]]) -> Mapping[str, Sequence[str]]:
    if not isinstance(reports, Mapping):
        return OrderedDict((path, [path]) for path in reports)
    return reports


def _scheme_rows(scheme: str, paths: Sequence[str]) -> List[Dict[str, float]]:
    rows = []
    for path in paths:
        header, report_rows = read_report(path)
        if tuple(header[: len(REPORT_COLUMNS)]) != REPORT_COLUMNS:
            raise SchemaMismatchError(f"{path}: header {header} does not start with {list(REPORT_COLUMNS)}")
        rows.extend(report_rows)
    if not rows:
        raise SchemaMismatchError(f"scheme {scheme} has no report rows")
    return rows


def violation_cdf(reports: Union[Sequence[str], Mapping[str, Sequence[str]]]) -> List[Dict[str, object]]:
    """
    Empirical CDF of the per-window violation rates of each scheme.
    `reports` maps a scheme name to its report files; a plain list is one
    scheme per file, named by its path. Rows are sorted by scheme then level.
    """
    rows = []
    for scheme, paths in _as_schemes(reports).items():
        rates = np.sort(np.array([row["violation_rate"] for row in _scheme_rows(scheme, paths)]))
        levels, counts = np.unique(rates, return_counts=True)
        for level, cumulative in zip(levels, np.cumsum(counts)):
            rows.append(
                {
                    "scheme": scheme,
                    "violation_level": float(level),
                    "cumulative_probability": float(cumulative / rates.size),
                }
            )
    return rows


def usage_curve(reports: Union[Sequence[str], Mapping[str, Sequence[str]]]) -> List[Dict[str, object]]:
    """
    Resources allocated per iteration (-mean_reward) of each scheme, mean and
    standard deviation over its reports. `runs` counts the reports reaching the iteration.
    """
    rows = []
    for scheme, paths in _as_schemes(reports).items():
        by_iteration: Dict[int, List[float]] = {}
        for row in _scheme_rows(scheme, paths):
            by_iteration.setdefault(int(row["iteration"]), []).append(-row["mean_reward"])
        for iteration in sorted(by_iteration):
            usage = np.array(by_iteration[iteration])
            rows.append(
                {
                    "scheme": scheme,
                    "iteration": iteration,
                    "mean_usage": float(usage.mean()),
                    "std_usage": float(usage.std()),
                    "runs": usage.size,
                }
            )
    return rows


def write_cdf(path: str, rows: Sequence[Dict[str, object]]):
    write_csv(path, CDF_COLUMNS, rows)


def write_usage(path: str, rows: Sequence[Dict[str, object]]):
    write_csv(path, USAGE_COLUMNS, rows)
