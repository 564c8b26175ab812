"""
Multi-agent orchestration: agents own allocation blocks (domain columns, or
slice rows in the per-slice mode), latency bounds are decomposed into
per-domain budgets, and agent updates are applied atomically.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from sliceorch import DOMAINS
from sliceorch.env import AllocationAction, ScenarioConfig, SliceSpec, StepOutcome, cost_fn
from sliceorch.errors import ConfigurationError, DimensionError, UpdateRejectedError

logger = logging.getLogger(__name__)

MODES = ("domain", "slice")
DEFAULT_PARTITION = (("agent_1", ("RAN", "EDGE")), ("agent_2", ("TN",)), ("agent_3", ("CN",)))


@dataclass(frozen=True)
class AgentAssignment:
    agent_id: str
    domains: Tuple[str, ...]
    # empty means every slice
    slices: Tuple[int, ...] = ()

    def rows(self, scenario: ScenarioConfig) -> np.ndarray:
        if not self.slices:
            return np.arange(scenario.n_slices)
        return np.array(sorted(self.slices), dtype=int)

    def cols(self, scenario: ScenarioConfig) -> np.ndarray:
        return np.array([scenario.domain_ids.index(d) for d in self.domains], dtype=int)

    def shape(self, scenario: ScenarioConfig) -> Tuple[int, int]:
        return (len(self.rows(scenario)), len(self.domains))

    def owns_chain(self, scenario: ScenarioConfig) -> bool:
        return set(self.domains) == set(scenario.domain_ids)


def default_assignments(scenario: ScenarioConfig) -> List[AgentAssignment]:
    """RAN and EDGE to one agent, TN and CN to one agent each; absent domains are dropped."""
    assignments = []
    for agent_id, domains in DEFAULT_PARTITION:
        owned = tuple(d for d in domains if d in scenario.domain_ids)
        if owned:
            assignments.append(AgentAssignment(agent_id, owned))
    return assignments


def slice_assignments(scenario: ScenarioConfig) -> List[AgentAssignment]:
    return [
        AgentAssignment(f"agent_{k + 1}", scenario.domain_ids, (k,))
        for k in range(scenario.n_slices)
    ]


def single_assignment(scenario: ScenarioConfig) -> List[AgentAssignment]:
    return [AgentAssignment("agent_1", scenario.domain_ids)]


def validate_partition(assignments: Sequence[AgentAssignment], scenario: ScenarioConfig, mode: str = "domain"):
    if mode not in MODES:
        raise ConfigurationError(f"unknown assignment mode '{mode}', expected one of {MODES}")
    if not assignments:
        raise ConfigurationError("at least one agent is required")
    ids = [a.agent_id for a in assignments]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate agent ids in {ids}")

    if mode == "domain":
        owned = [d for a in assignments for d in a.domains]
        unknown = sorted(set(owned) - set(scenario.domain_ids))
        if unknown:
            raise ConfigurationError(f"agents reference domains absent from the scenario: {unknown}")
        if len(owned) != len(set(owned)):
            raise ConfigurationError(f"domain assignments overlap: {owned}")
        missing = [d for d in scenario.domain_ids if d not in owned]
        if missing:
            raise ConfigurationError(f"domains {missing} are not owned by any agent")
        if any(a.slices for a in assignments):
            raise ConfigurationError("domain-mode agents own every slice")
    else:
        owned = [k for a in assignments for k in a.slices]
        if any(not a.slices for a in assignments):
            raise ConfigurationError("slice-mode agents must list their slices")
        if len(owned) != len(set(owned)) or sorted(owned) != list(range(scenario.n_slices)):
            raise ConfigurationError(f"slice assignments must partition 0..{scenario.n_slices - 1}, got {owned}")
        if any(set(a.domains) != set(scenario.domain_ids) for a in assignments):
            raise ConfigurationError("slice-mode agents own every domain")


def build_assignments(scenario: ScenarioConfig, mode: str = "domain") -> List[AgentAssignment]:
    """Assignments from the scenario's `agents` entry, or the default partition for the mode."""
    if scenario.agents:
        assignments = []
        for doc in scenario.agents:
            if "slices" in doc:
                assignments.append(AgentAssignment(doc["id"], scenario.domain_ids, tuple(doc["slices"])))
            else:
                domains = tuple(sorted(doc["domains"], key=DOMAINS.index))
                assignments.append(AgentAssignment(doc["id"], domains))
    elif mode == "slice":
        assignments = slice_assignments(scenario)
    else:
        assignments = default_assignments(scenario)
    validate_partition(assignments, scenario, mode)
    return assignments


@dataclass(frozen=True)
class SlaDecomposition:
    # seconds, [slice x domain]
    latency_budgets: np.ndarray

    def __post_init__(self):
        arr = np.array(self.latency_budgets, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"latency budgets must be a [slice x domain] matrix, got {arr.shape}")
        if np.any(arr <= 0):
            raise ConfigurationError("latency budgets must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "latency_budgets", arr)

    def is_sound(self, specs: Sequence[SliceSpec]) -> bool:
        bounds = np.array([s.latency_bound for s in specs])
        return bool(np.all(self.latency_budgets.sum(axis=1) <= bounds))


def _fit_to_bound(budgets: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    # rounding may push a row sum one ulp above its bound
    budgets = budgets.copy()
    for k, bound in enumerate(bounds):
        while budgets[k].sum() > bound:
            budgets[k] *= np.nextafter(bound / budgets[k].sum(), 0.0)
    return budgets


def decompose_sla(specs: Sequence[SliceSpec], domains: Sequence, weights: Optional[Sequence[float]] = None) -> SlaDecomposition:
    """budget[k][d] = bound_k * weights[d] / sum(weights)."""
    weights = np.ones(len(domains)) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(domains),):
        raise DimensionError(f"expected {len(domains)} decomposition weights, got {weights.shape}")
    if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
        raise ConfigurationError("decomposition weights must be positive")
    bounds = np.array([s.latency_bound for s in specs], dtype=np.float64)
    budgets = bounds[:, None] * (weights / weights.sum())[None, :]
    return SlaDecomposition(_fit_to_bound(budgets, bounds))


def rebalance_sla(
    decomp: SlaDecomposition,
    observed: np.ndarray,
    specs: Sequence[SliceSpec],
    step: float = 0.1,
) -> SlaDecomposition:
    """
    Moves budget from domains running under budget to domains running over it,
    proportionally to the gaps. No domain's budget changes by more than
    `step` times its current value; row sums are conserved.
    """
    budgets = decomp.latency_budgets
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != budgets.shape:
        raise DimensionError(f"observed latencies {observed.shape} do not match budgets {budgets.shape}")
    gap = observed - budgets
    cap = step * budgets
    increase = np.where(gap > 0, np.minimum(gap, cap), 0.0)
    decrease = np.where(gap < 0, np.minimum(-gap, cap), 0.0)

    updated = budgets.copy()
    for k in range(budgets.shape[0]):
        total_in, total_out = increase[k].sum(), decrease[k].sum()
        if total_in <= 0 or total_out <= 0:
            continue
        moved = min(total_in, total_out)
        updated[k] += increase[k] * (moved / total_in) - decrease[k] * (moved / total_out)

    bounds = np.array([s.latency_bound for s in specs], dtype=np.float64)
    return SlaDecomposition(_fit_to_bound(updated, bounds))


def local_view(
    state,
    assignment: AgentAssignment,
    decomp: SlaDecomposition,
    scenario: ScenarioConfig,
) -> np.ndarray:
    """
    Rates of the agent's block, then its backlogs, then its latency budgets, each
    slice-major/domain-minor. Rates and backlogs are scaled by the domain full rate.
    """
    rows, cols = assignment.rows(scenario), assignment.cols(scenario)
    full = scenario.full_rates[cols][None, :]
    block = np.ix_(rows, cols)
    return np.concatenate(
        [
            (state.rates[block] / full).ravel(),
            (state.backlogs[block] / (full * scenario.slot_duration)).ravel(),
            decomp.latency_budgets[block].ravel(),
        ]
    )


def initial_decomposition(scenario: ScenarioConfig) -> SlaDecomposition:
    return decompose_sla(scenario.slices, scenario.domain_ids, scenario.decomposition_weights)


def learner_view(state, scenario: ScenarioConfig) -> np.ndarray:
    """Input of a single agent owning every slice and domain."""
    return local_view(state, single_assignment(scenario)[0], initial_decomposition(scenario), scenario)


def local_obs_dim(assignment: AgentAssignment, scenario: ScenarioConfig) -> int:
    rows, cols = assignment.shape(scenario)
    return 3 * rows * cols


def local_cost(
    outcome: StepOutcome,
    assignment: AgentAssignment,
    decomp: SlaDecomposition,
    scenario: ScenarioConfig,
) -> float:
    """
    Max normalized margin over the agent's block: latency against the domain
    budget, throughput of each owned domain against the slice floor. An agent
    owning the whole chain is held to the end-to-end SLA of its slices.
    """
    rows, cols = assignment.rows(scenario), assignment.cols(scenario)
    specs = [scenario.slices[k] for k in rows]
    if assignment.owns_chain(scenario):
        return cost_fn(
            outcome.per_slice_latency[rows], outcome.per_slice_throughput[rows], specs, scenario.throughput_epsilon
        )
    if outcome.per_domain_latency is None or outcome.per_domain_throughput is None:
        raise DimensionError("local_cost needs per-domain latencies and throughputs")
    block = np.ix_(rows, cols)
    budgets = decomp.latency_budgets[block]
    latency_margin = (outcome.per_domain_latency[block] - budgets) / budgets
    floors = np.array([s.min_throughput for s in specs], dtype=np.float64)[:, None]
    throughput_margin = (floors - outcome.per_domain_throughput[block]) / np.maximum(floors, scenario.throughput_epsilon)
    return float(np.max(np.maximum(latency_margin, throughput_margin)))


def compose_action(
    blocks: Sequence[np.ndarray],
    assignments: Sequence[AgentAssignment],
    scenario: ScenarioConfig,
) -> AllocationAction:
    """
    Writes each agent's block into one [slice x domain] matrix. Columns summing
    above 1 (only possible when several agents share a domain) are rescaled.
    """
    shares = np.zeros((scenario.n_slices, scenario.n_domains))
    for block, assignment in zip(blocks, assignments):
        block = np.asarray(block, dtype=np.float64).reshape(assignment.shape(scenario))
        shares[np.ix_(assignment.rows(scenario), assignment.cols(scenario))] = block
    sums = shares.sum(axis=0)
    over = sums > 1.0
    shares[:, over] = shares[:, over] / sums[over]
    return AllocationAction(shares)


def extract_block(shares: np.ndarray, assignment: AgentAssignment, scenario: ScenarioConfig) -> np.ndarray:
    return np.asarray(shares)[np.ix_(assignment.rows(scenario), assignment.cols(scenario))]


def aggregate_and_update(agents, trajectories, bootstrap_views) -> List[Dict]:
    """
    Runs every agent's update on its own stream. Either all agents advance one
    version or, if any update raises, every agent is restored to its pre-batch state.
    """
    if not (len(agents) == len(trajectories) == len(bootstrap_views)):
        raise DimensionError("one trajectory and bootstrap view per agent is required")
    lengths = {len(t) for t in trajectories}
    if len(lengths) != 1:
        raise DimensionError(f"agent trajectories are not synchronized: lengths {sorted(lengths)}")

    snapshots = [agent.snapshot() for agent in agents]
    stats = []
    failing = None
    try:
        for agent, traj, view in zip(agents, trajectories, bootstrap_views):
            failing = agent.agent_id
            stats.append(agent.update(traj, view))
    except Exception as e:
        for member, snapshot in zip(agents, snapshots):
            member.restore(snapshot)
        logger.error(f"batch update rejected at agent {failing}, {len(agents)} agents rolled back: {e}")
        raise UpdateRejectedError(f"update of agent {failing} failed: {e}") from e
    return stats
