"""
Collect-then-update training loop shared by the monolithic and the
multi-agent learners. The monolithic learner is the single agent owning
every slice and domain, so both paths run the same code.
"""
import sys
import logging
import functools
from typing import Callable, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from sliceorch.config import DistributedConfig, SafeConfig
from sliceorch.distributed import (
    AgentAssignment,
    aggregate_and_update,
    compose_action,
    extract_block,
    initial_decomposition,
    local_cost,
    local_obs_dim,
    local_view,
    rebalance_sla,
    single_assignment,
    validate_partition,
)
from sliceorch.env import AllocationAction, SliceEnv, reward_fn
from sliceorch.errors import SliceOrchError, TrainingError
from sliceorch.managers import Orchestrator
from sliceorch.mdp import Trajectory, Transition
from sliceorch.neural import GaussianPolicy, logistic, project_action
from sliceorch.report import ReportWriter, TrainingReport, report_columns
from sliceorch.safe import SafeAgent

logger = logging.getLogger(__name__)


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def baseline_blocks(env: SliceEnv, state, assignments: Sequence[AgentAssignment]) -> List[Callable[[], AllocationAction]]:
    """Lazy per-agent blocks of the baseline allocation; the baseline runs at most once per state."""
    cache: List[np.ndarray] = []

    def block(assignment: AgentAssignment) -> AllocationAction:
        if not cache:
            cache.append(env.baseline(state).shares)
        return AllocationAction(extract_block(cache[0], assignment, env.scenario))

    return [functools.partial(block, a) for a in assignments]


def train_safe(
    env: SliceEnv,
    config: SafeConfig,
    iterations: int,
    seed: int,
    report_path: Optional[str] = None,
    show_progress: bool = False,
    warm_start: Optional[GaussianPolicy] = None,
) -> TrainingReport:
    """Monolithic safe learner over the whole allocation matrix."""
    return _train(
        env,
        single_assignment(env.scenario),
        config,
        DistributedConfig(),
        iterations,
        seed,
        report_path=report_path,
        show_progress=show_progress,
        warm_start=warm_start,
    )


def train_distributed(
    env: SliceEnv,
    assignments: Sequence[AgentAssignment],
    config: SafeConfig,
    distributed: DistributedConfig,
    iterations: int,
    seed: int,
    report_path: Optional[str] = None,
    show_progress: bool = False,
) -> TrainingReport:
    validate_partition(assignments, env.scenario, distributed.mode)
    return _train(
        env,
        list(assignments),
        config,
        distributed,
        iterations,
        seed,
        report_path=report_path,
        show_progress=show_progress,
    )


def _train(
    env: SliceEnv,
    assignments: List[AgentAssignment],
    config: SafeConfig,
    distributed: DistributedConfig,
    iterations: int,
    seed: int,
    report_path: Optional[str] = None,
    show_progress: bool = False,
    warm_start: Optional[GaussianPolicy] = None,
) -> TrainingReport:
    scenario = env.scenario
    n_agents = len(assignments)
    joint_projection = distributed.mode == "slice"
    rebalancing = any(not a.owns_chain(scenario) for a in assignments)

    root = np.random.SeedSequence(seed)
    initial_share = config.exploration.initial_share or 1.0 / (scenario.n_slices + 1)
    agents = [
        SafeAgent(
            a.agent_id, local_obs_dim(a, scenario), a.shape(scenario), config, np.random.default_rng(s), initial_share
        )
        for a, s in zip(assignments, root.spawn(n_agents))
    ]
    if warm_start is not None:
        agents[0].warm_start(warm_start)
    blocks_weights = [scenario.weight_vector[a.cols(scenario)] for a in assignments]

    report = TrainingReport(columns=report_columns(n_agents), path=report_path, agents=agents)
    writer = ReportWriter(report_path, report.columns) if report_path else None

    orchestrator = Orchestrator(env)
    decomp = initial_decomposition(scenario)
    episode = 0
    state = orchestrator.reset(episode_seed(seed, episode))
    latency_sum = np.zeros(env.action_shape)
    latency_steps = 0

    steps = range(iterations)
    if show_progress:
        tqdm.write("\n", end="")
        steps = tqdm(steps, file=sys.stdout, desc="Training agents...")

    try:
        for iteration in steps:
            trajectories = [Trajectory() for _ in agents]
            rewards, costs, violations, switched = [], [], [], []
            local_rewards = np.zeros((config.rollout_length, n_agents))
            local_costs = np.zeros((config.rollout_length, n_agents))
            agent_switched = np.zeros((config.rollout_length, n_agents), dtype=bool)
            learner_rewards = np.zeros((config.rollout_length, n_agents))
            learner_costs = np.zeros((config.rollout_length, n_agents))

            for slot in range(config.rollout_length):
                views = [local_view(state, a, decomp, scenario) for a in assignments]
                fallbacks = baseline_blocks(env, state, assignments)
                if joint_projection:
                    proposals = [agent.act(view) for agent, view in zip(agents, views)]
                    candidate = compose_action(
                        [logistic(raw).reshape(a.shape(scenario)) for (raw, _), a in zip(proposals, assignments)],
                        assignments,
                        scenario,
                    )
                    decisions = [
                        agent.screen(view, raw, logp, extract_block(candidate.shares, a, scenario), fallback)
                        for agent, view, (raw, logp), a, fallback in zip(agents, views, proposals, assignments, fallbacks)
                    ]
                else:
                    decisions = [agent.select(view, fallback) for agent, view, fallback in zip(agents, views, fallbacks)]
                action = compose_action([d.shares for d in decisions], assignments, scenario)

                outcome = orchestrator.execute(state, action)
                done = outcome.next_state.t >= scenario.episode_length

                for i, (decision, a) in enumerate(zip(decisions, assignments)):
                    executed = extract_block(action.shares, a, scenario)
                    local_rewards[slot, i] = reward_fn(executed, blocks_weights[i])
                    local_costs[slot, i] = local_cost(outcome, a, decomp, scenario)
                    agent_switched[slot, i] = decision.used_baseline
                    learner_rewards[slot, i] = local_rewards[slot, i]
                    learner_costs[slot, i] = local_costs[slot, i]
                    if decision.used_baseline:
                        learner_rewards[slot, i] = reward_fn(decision.proposal, blocks_weights[i])
                        learner_costs[slot, i] = decision.predicted_cost
                    trajectories[i].append(
                        Transition(
                            state_vec=views[i],
                            action_vec=decision.raw,
                            logp=decision.logp,
                            reward=learner_rewards[slot, i],
                            cost=learner_costs[slot, i],
                            done=done,
                            used_baseline=decision.used_baseline,
                            executed=executed.ravel(),
                            executed_cost=local_costs[slot, i],
                        )
                    )
                rewards.append(outcome.reward)
                costs.append(outcome.cost)
                violations.append(outcome.sla_violated)
                switched.append(bool(agent_switched[slot].any()))
                if rebalancing:
                    latency_sum += outcome.per_domain_latency
                    latency_steps += 1

                if done:
                    episode += 1
                    state = orchestrator.reset(episode_seed(seed, episode))
                else:
                    state = outcome.next_state

            bootstrap = [local_view(state, a, decomp, scenario) for a in assignments]
            aggregate_and_update(agents, trajectories, bootstrap)
            for i, agent in enumerate(agents):
                agent.end_iteration(float(learner_costs[:, i].mean()))

            if rebalancing and (iteration + 1) % distributed.rebalance_period == 0:
                decomp = rebalance_sla(decomp, latency_sum / latency_steps, scenario.slices, distributed.rebalance_step)
                latency_sum = np.zeros(env.action_shape)
                latency_steps = 0
                logger.debug(f"iteration {iteration}: latency budgets rebalanced to {decomp.latency_budgets.tolist()}")

            row = {
                "iteration": iteration,
                "mean_reward": float(np.mean(rewards)),
                "mean_cost": float(np.mean(costs)),
                "violation_rate": float(np.mean(violations)),
                "lambda": float(np.mean([agent.lagrangian.value for agent in agents])),
                "switch_rate": float(np.mean(switched)),
            }
            if n_agents > 1:
                for i, agent in enumerate(agents):
                    row[f"agent_{i + 1}_mean_reward"] = float(local_rewards[:, i].mean())
                    row[f"agent_{i + 1}_mean_cost"] = float(local_costs[:, i].mean())
                    row[f"agent_{i + 1}_lambda"] = agent.lagrangian.value
                    row[f"agent_{i + 1}_switch_rate"] = float(agent_switched[:, i].mean())
            report.rows.append(row)
            if writer is not None:
                writer.write(row)
            logger.debug(
                f"iteration {iteration}: cost={row['mean_cost']:.4f} "
                f"violations={row['violation_rate']:.3f} switch={row['switch_rate']:.3f}"
            )
    except SliceOrchError as e:
        logger.error(f"training aborted after {len(report)} iterations: {e}")
        raise TrainingError(f"training aborted after {len(report)} iterations: {e}", report=report) from e
    finally:
        if writer is not None:
            writer.close()

    logger.info(f"trained {n_agents} agent(s) for {iterations} iterations (seed {seed})")
    return report


def evaluate_policy(env: SliceEnv, act, seeds: Sequence[int], steps: Optional[int] = None) -> dict:
    """
    Runs `act(state) -> AllocationAction` on one episode per seed through an
    orchestrator. Returns usage (-reward), cost and violation statistics, plus
    the per-episode violation rates.
    """
    scenario = env.scenario
    steps = steps or scenario.episode_length
    orchestrator = Orchestrator(env)
    usage, costs, episode_violations = [], [], []
    for seed in seeds:
        state = orchestrator.reset(seed)
        violated = []
        for _ in range(steps):
            outcome = orchestrator.execute(state, act(state))
            usage.append(-outcome.reward)
            costs.append(outcome.cost)
            violated.append(outcome.sla_violated)
            state = outcome.next_state
        episode_violations.append(float(np.mean(violated)))
    return {
        "mean_usage": float(np.mean(usage)),
        "mean_cost": float(np.mean(costs)),
        "violation_rate": float(np.mean(episode_violations)),
        "episode_violation_rates": episode_violations,
    }


def run_baseline(
    env: SliceEnv,
    iterations: int,
    rollout_length: int,
    seed: int,
    report_path: Optional[str] = None,
) -> TrainingReport:
    """Baseline rollouts reported with the training schema: lambda 0, switch rate 1."""
    scenario = env.scenario
    report = TrainingReport(columns=report_columns(1), path=report_path)
    orchestrator = Orchestrator(env)
    episode = 0
    state = orchestrator.reset(episode_seed(seed, episode))
    with ReportWriter(report_path, report.columns) if report_path else _NullWriter() as writer:
        for iteration in range(iterations):
            rewards, costs, violations = [], [], []
            for _ in range(rollout_length):
                outcome = orchestrator.execute(state, env.baseline(state))
                rewards.append(outcome.reward)
                costs.append(outcome.cost)
                violations.append(outcome.sla_violated)
                if outcome.next_state.t >= scenario.episode_length:
                    episode += 1
                    state = orchestrator.reset(episode_seed(seed, episode))
                else:
                    state = outcome.next_state
            row = {
                "iteration": iteration,
                "mean_reward": float(np.mean(rewards)),
                "mean_cost": float(np.mean(costs)),
                "violation_rate": float(np.mean(violations)),
                "lambda": 0.0,
                "switch_rate": 1.0,
            }
            report.rows.append(row)
            writer.write(row)
    return report


class _NullWriter:
    def write(self, row):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        pass


def agent_actor(agent: SafeAgent, env: SliceEnv, gate: bool = True):
    """
    Deterministic actor for a single agent owning the whole allocation: the
    projected policy mean, replaced by the baseline when the gate fires.
    """
    scenario = env.scenario
    assignment = single_assignment(scenario)[0]
    decomp = initial_decomposition(scenario)

    def act(state):
        view = local_view(state, assignment, decomp, scenario)
        raw = agent.policy.mean(view)
        proposal = project_action(raw, env.action_shape)
        if not gate:
            return proposal
        decision = agent.screen(view, raw, 0.0, proposal.shares, functools.partial(env.baseline, state))
        return AllocationAction(decision.shares) if decision.used_baseline else proposal

    return act
