"""
Domain managers and the orchestrator that coordinates them.

Each manager exposes the two interaction points of its domain: read_state and
apply_action. The orchestrator is the only caller of SliceEnv.step.
"""
import logging
from typing import List, Optional

import numpy as np

from sliceorch.env import (
    FEASIBILITY_TOLERANCE,
    AllocationAction,
    DomainSpec,
    NetworkState,
    SliceEnv,
    StepOutcome,
)
from sliceorch.errors import DimensionError, FeasibilityError

logger = logging.getLogger(__name__)


class DomainManager:
    def __init__(self, domain: DomainSpec, index: int, n_slices: int):
        self.domain = domain
        self.index = index
        self.n_slices = n_slices
        self.pending_action: Optional[np.ndarray] = None
        self.last_state: Optional[dict] = None
        # number of allocation columns applied so far
        self.applied = 0

    def read_state(self, state: NetworkState) -> dict:
        self.last_state = {
            "t": state.t,
            "rates": state.rates[:, self.index].copy(),
            "backlogs": state.backlogs[:, self.index].copy(),
        }
        return self.last_state

    def apply_action(self, column) -> np.ndarray:
        column = np.asarray(column, dtype=np.float64)
        if column.shape != (self.n_slices,):
            raise DimensionError(f"domain {self.domain.id}: expected {self.n_slices} shares, got {column.shape}")
        if not np.all(np.isfinite(column)) or np.any(column < 0) or np.any(column > 1):
            raise FeasibilityError(f"domain {self.domain.id}: shares must lie within [0, 1]")
        if column.sum() > 1 + FEASIBILITY_TOLERANCE:
            raise FeasibilityError(f"domain {self.domain.id}: shares sum to {column.sum():.6f} > 1")
        self.pending_action = column
        self.applied += 1
        return column


class Orchestrator:
    """End-to-end coordinator: splits an allocation into domain columns and advances the network."""

    def __init__(self, env: SliceEnv):
        self.env = env
        scenario = env.scenario
        self.managers: List[DomainManager] = [
            DomainManager(d, i, scenario.n_slices) for i, d in enumerate(scenario.domains)
        ]
        self.steps = 0

    def reset(self, seed: int) -> NetworkState:
        state = self.env.reset(seed)
        for manager in self.managers:
            manager.read_state(state)
        return state

    def execute(self, state: NetworkState, action: AllocationAction) -> StepOutcome:
        shares = np.asarray(action.shares)
        if shares.shape != self.env.action_shape:
            raise DimensionError(f"expected allocation of shape {self.env.action_shape}, got {shares.shape}")
        for manager in self.managers:
            manager.apply_action(shares[:, manager.index])
        applied = np.column_stack([m.pending_action for m in self.managers])
        outcome = self.env.step(state, AllocationAction(applied))
        for manager in self.managers:
            manager.pending_action = None
            manager.read_state(outcome.next_state)
        self.steps += 1
        return outcome
