"""
Trajectories and return/advantage estimation for the reward and cost streams.

Record files are JSON lines: a header object, then one object per transition
with the fields in TRANSITION_FIELDS order.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np

from sliceorch.config import DiscountConfig
from sliceorch.errors import DimensionError, ValidationError

logger = logging.getLogger(__name__)

RECORD_FORMAT = "sliceorch-records"
RECORD_VERSION = 1
TRANSITION_FIELDS = ("state_vec", "action_vec", "logp", "reward", "cost", "done", "used_baseline")


@dataclass
class Transition:
    state_vec: np.ndarray
    # raw (pre-projection) action for policy steps
    action_vec: np.ndarray
    logp: float
    reward: float
    cost: float
    done: bool
    used_baseline: bool = False
    # executed allocation block and its observed cost, the cost critic samples
    executed: Optional[np.ndarray] = None
    executed_cost: Optional[float] = None

    def __post_init__(self):
        if not np.isfinite(self.logp):
            raise ValidationError(f"transition logp must be finite, got {self.logp}")


@dataclass
class Trajectory:
    transitions: List[Transition] = field(default_factory=list)
    reward_advantages: Optional[np.ndarray] = None
    cost_advantages: Optional[np.ndarray] = None
    reward_returns: Optional[np.ndarray] = None
    cost_returns: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.transitions)

    def append(self, transition: Transition):
        self.transitions.append(transition)

    @property
    def states(self) -> np.ndarray:
        return np.array([t.state_vec for t in self.transitions], dtype=np.float64)

    @property
    def actions(self) -> np.ndarray:
        return np.array([t.action_vec for t in self.transitions], dtype=np.float64)

    @property
    def executed(self) -> np.ndarray:
        return np.array(
            [t.action_vec if t.executed is None else t.executed for t in self.transitions],
            dtype=np.float64,
        )

    @property
    def logps(self) -> np.ndarray:
        return np.array([t.logp for t in self.transitions], dtype=np.float64)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=np.float64)

    @property
    def costs(self) -> np.ndarray:
        return np.array([t.cost for t in self.transitions], dtype=np.float64)

    @property
    def executed_costs(self) -> np.ndarray:
        return np.array(
            [t.cost if t.executed_cost is None else t.executed_cost for t in self.transitions],
            dtype=np.float64,
        )

    @property
    def dones(self) -> np.ndarray:
        return np.array([t.done for t in self.transitions], dtype=bool)

    @property
    def used_baseline(self) -> np.ndarray:
        return np.array([t.used_baseline for t in self.transitions], dtype=bool)


def compute_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """G_t = r_t + gamma * G_{t+1}, G_last = r_last."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise DimensionError("compute_returns needs at least one reward")
    returns = np.empty_like(rewards)
    running = 0.0
    for t in reversed(range(rewards.size)):
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lambda_gae: float,
) -> np.ndarray:
    """
    delta_t = r_t + gamma * V_{t+1} - V_t ; A_t = delta_t + gamma * lambda * A_{t+1}.
    A done transition neither bootstraps nor propagates the trace.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (rewards.size + 1,):
        raise DimensionError(f"expected {rewards.size + 1} values (bootstrap appended), got {values.shape}")
    advantages = np.empty_like(rewards)
    running = 0.0
    for t in reversed(range(rewards.size)):
        mask = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * values[t + 1] * mask - values[t]
        running = delta + gamma * lambda_gae * mask * running
        advantages[t] = running
    return advantages


def compute_advantages(
    traj: Trajectory,
    values: Sequence[float],
    config: DiscountConfig,
    cost_values: Optional[Sequence[float]] = None,
) -> Trajectory:
    """
    Fills reward/cost advantages and returns. `values` and `cost_values` both hold
    |transitions| + 1 entries, the last being the bootstrap value (0 if done).
    Missing cost values are taken as zeros.
    """
    n = len(traj)
    values = np.asarray(values, dtype=np.float64)
    cost_values = np.zeros(n + 1) if cost_values is None else np.asarray(cost_values, dtype=np.float64)
    if values.shape != (n + 1,) or cost_values.shape != (n + 1,):
        raise DimensionError(
            f"trajectory of {n} transitions needs {n + 1} values, got {values.shape} and {cost_values.shape}"
        )
    dones = traj.dones
    traj.reward_advantages = gae(traj.rewards, values, dones, config.gamma, config.lambda_gae)
    traj.cost_advantages = gae(traj.costs, cost_values, dones, config.gamma, config.lambda_gae)
    traj.reward_returns = traj.reward_advantages + values[:-1]
    traj.cost_returns = traj.cost_advantages + cost_values[:-1]
    return traj


def normalize_advantages(values: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    centered = values - values.mean()
    return centered / max(float(values.std()), std_floor)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    indices = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield indices[start:start + batch_size]


def _record(transition: Transition) -> dict:
    return {
        "state_vec": [float(x) for x in transition.state_vec],
        "action_vec": [float(x) for x in transition.action_vec],
        "logp": float(transition.logp),
        "reward": float(transition.reward),
        "cost": float(transition.cost),
        "done": bool(transition.done),
        "used_baseline": bool(transition.used_baseline),
    }


def write_records(path: str, transitions: Sequence[Transition], metadata: Optional[dict] = None):
    header = {
        "format": RECORD_FORMAT,
        "version": RECORD_VERSION,
        "fields": list(TRANSITION_FIELDS),
        "metadata": metadata or {},
    }
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for transition in transitions:
            f.write(json.dumps(_record(transition)) + "\n")
    logger.info(f"wrote {len(transitions)} records to {path}")


def read_records(path: str):
    """Returns (metadata, transitions)."""
    with open(path, "r") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValidationError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != RECORD_FORMAT or header.get("version") != RECORD_VERSION:
        raise ValidationError(f"line 1: {path} is not a {RECORD_FORMAT} v{RECORD_VERSION} file")
    transitions = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            doc = json.loads(line)
            transitions.append(
                Transition(
                    state_vec=np.array(doc["state_vec"], dtype=np.float64),
                    action_vec=np.array(doc["action_vec"], dtype=np.float64),
                    logp=doc["logp"],
                    reward=doc["reward"],
                    cost=doc["cost"],
                    done=doc["done"],
                    used_baseline=doc.get("used_baseline", False),
                )
            )
        except (json.JSONDecodeError, KeyError) as e:
            raise ValidationError(f"line {lineno}: malformed record in {path}: {e}")
    return header["metadata"], transitions
