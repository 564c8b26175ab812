"""
Brute-force reference for tiny scenarios: for every visited state, enumerate
a share grid and keep the cheapest allocation that meets every SLA.
"""
import itertools
import logging
from typing import Sequence

import numpy as np

from sliceorch.env import AllocationAction, NetworkState, SliceEnv, domain_latency, sla_margins
from sliceorch.errors import ConfigurationError
from sliceorch.training import evaluate_policy

logger = logging.getLogger(__name__)

GRID_POINTS = 51
# enumeration is GRID_POINTS ** cells
MAX_CELLS = 2


def share_grid(points: int = GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, 1.0, points)


def oracle_allocation(state: NetworkState, env: SliceEnv, points: int = GRID_POINTS) -> AllocationAction:
    """
    Cheapest grid allocation with cost <= 0 in `state`; the full allocation
    of every domain (split evenly) when no grid point is safe.
    """
    scenario = env.scenario
    shape = env.action_shape
    cells = shape[0] * shape[1]
    if cells > MAX_CELLS:
        raise ConfigurationError(f"the grid oracle handles at most {MAX_CELLS} allocation cells, got {cells}")

    grid = share_grid(points)
    candidates = np.array(list(itertools.product(grid, repeat=cells))).reshape(-1, *shape)
    candidates = candidates[np.all(candidates.sum(axis=1) <= 1.0 + 1e-12, axis=1)]

    full = scenario.full_rates[None, None, :]
    service = candidates * full
    rates = state.rates[None, :, :]
    latency = domain_latency(np.broadcast_to(rates, service.shape), service, scenario.l_max).sum(axis=2)
    throughput = np.minimum(rates, service).min(axis=2)

    cost = sla_margins(latency, throughput, scenario.slices, scenario.throughput_epsilon).max(axis=1)

    safe = cost <= 0
    if not np.any(safe):
        return AllocationAction(np.full(shape, 1.0 / shape[0]))
    usage = (candidates * scenario.weight_vector[None, None, :]).sum(axis=(1, 2))
    usage = np.where(safe, usage, np.inf)
    return AllocationAction(candidates[int(np.argmin(usage))])


def oracle_actor(env: SliceEnv, points: int = GRID_POINTS):
    def act(state: NetworkState) -> AllocationAction:
        return oracle_allocation(state, env, points)

    return act


def oracle_usage(env: SliceEnv, seeds: Sequence[int], points: int = GRID_POINTS) -> dict:
    """Usage, cost and violation statistics of the oracle over one episode per seed."""
    stats = evaluate_policy(env, oracle_actor(env, points), seeds)
    logger.info(f"oracle usage {stats['mean_usage']:.4f}, violation rate {stats['violation_rate']:.4f}")
    return stats
