"""
Behavior-cloning warm start: fit the policy mean so that its projected
allocation reproduces the baseline's on recorded states.
"""
import sys
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from sliceorch.distributed import learner_view
from sliceorch.env import AllocationAction, NetworkState, SliceEnv
from sliceorch.errors import ConfigurationError, DimensionError, FeasibilityError, TrainingError
from sliceorch.managers import Orchestrator
from sliceorch.mdp import Transition, minibatches, read_records, write_records
from sliceorch.neural import (
    GaussianPolicy,
    OptimizerState,
    backward,
    forward,
    grad_step,
    logistic,
    project_action,
    project_backward,
    project_shares,
)
from sliceorch.training import episode_seed, evaluate_policy

logger = logging.getLogger(__name__)

Actor = Callable[[NetworkState], AllocationAction]


@dataclass(frozen=True)
class DemonstrationSet:
    # learner views, one row per record
    states: np.ndarray
    # demonstrated shares, flattened slice-major
    actions: np.ndarray
    shape: Tuple[int, int]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.array(self.states, dtype=np.float64, ndmin=2)
        actions = np.array(self.actions, dtype=np.float64, ndmin=2)
        if states.shape[0] != actions.shape[0]:
            raise DimensionError(f"{states.shape[0]} states for {actions.shape[0]} actions")
        if actions.shape[1] != self.shape[0] * self.shape[1]:
            raise DimensionError(f"actions of size {actions.shape[1]} do not fill a {self.shape} allocation")
        for i, flat in enumerate(actions):
            problems = AllocationAction(flat.reshape(self.shape)).violations()
            if problems:
                raise FeasibilityError(f"demonstration {i}: {'; '.join(problems)}")
        states.setflags(write=False)
        actions.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "shape", tuple(self.shape))

    def __len__(self):
        return self.states.shape[0]

    def check_scenario(self, env: SliceEnv):
        expected = self.metadata.get("scenario")
        if expected is not None and expected != env.scenario.fingerprint():
            raise ConfigurationError("demonstrations were collected on a different scenario")


def collect_demonstrations(
    env: SliceEnv,
    baseline: Optional[Actor] = None,
    n_steps: int = 1000,
    seeds: Sequence[int] = (0,),
    show_progress: bool = False,
) -> DemonstrationSet:
    """
    Rolls the baseline out for `n_steps` slots per seed, recording
    (learner view, executed shares) pairs. Episodes restart every
    episode_length slots.
    """
    if n_steps < 1:
        raise ConfigurationError(f"n_steps must be >= 1, got {n_steps}")
    if not seeds:
        raise ConfigurationError("at least one demonstration seed is required")
    baseline = baseline or env.baseline
    scenario = env.scenario
    orchestrator = Orchestrator(env)
    states, actions = [], []
    seed_list = [int(s) for s in seeds]

    if show_progress:
        tqdm.write("\n", end="")
        seeds = tqdm(seed_list, file=sys.stdout, desc="Collecting demonstrations...")
    for seed in seeds:
        episode = 0
        state = orchestrator.reset(episode_seed(seed, episode))
        for _ in range(n_steps):
            action = baseline(state)
            states.append(learner_view(state, scenario))
            actions.append(action.flat())
            outcome = orchestrator.execute(state, action)
            if outcome.next_state.t >= scenario.episode_length:
                episode += 1
                state = orchestrator.reset(episode_seed(seed, episode))
            else:
                state = outcome.next_state

    metadata = {"scenario": scenario.fingerprint(), "seeds": seed_list, "steps_per_seed": n_steps}
    logger.info(f"collected {len(states)} demonstrations over {len(seed_list)} seeds")
    return DemonstrationSet(np.array(states), np.array(actions), env.action_shape, metadata)


def save_demonstrations(path: str, demos: DemonstrationSet):
    transitions = [
        Transition(state_vec=s, action_vec=a, logp=0.0, reward=0.0, cost=0.0, done=False, used_baseline=True)
        for s, a in zip(demos.states, demos.actions)
    ]
    write_records(path, transitions, {**demos.metadata, "shape": list(demos.shape)})


def load_demonstrations(path: str, env: Optional[SliceEnv] = None) -> DemonstrationSet:
    metadata, transitions = read_records(path)
    shape = tuple(metadata.pop("shape", ()))
    if len(shape) != 2:
        raise ConfigurationError(f"{path} does not describe an allocation shape")
    if not transitions:
        raise ConfigurationError(f"{path} holds no demonstrations")
    demos = DemonstrationSet(
        np.array([t.state_vec for t in transitions]),
        np.array([t.action_vec for t in transitions]),
        shape,
        metadata,
    )
    if env is not None:
        demos.check_scenario(env)
    return demos


def bc_loss(policy: GaussianPolicy, states: np.ndarray, actions: np.ndarray, shape: Tuple[int, int]):
    """
    Mean squared gap between projected policy means and demonstrated shares, with its gradient.

    Rescaling an over-full column is flat along its sum, so columns the
    demonstrations leave under-full also pay the squared excess of their
    logistic mass over 1.
    """
    raw = forward(policy.mean_net, states)
    diff = project_shares(raw, shape).reshape(actions.shape) - actions
    loss = float(np.mean(diff ** 2))
    upstream = project_backward(raw, shape, 2.0 * diff / diff.size)

    squashed = logistic(raw).reshape(raw.shape[:-1] + tuple(shape))
    target_sums = actions.reshape(squashed.shape).sum(axis=-2, keepdims=True)
    excess = np.where(target_sums < 1.0 - 1e-9, np.maximum(squashed.sum(axis=-2, keepdims=True) - 1.0, 0.0), 0.0)
    loss += float(np.sum(excess ** 2)) / excess.size
    g_mass = np.broadcast_to(2.0 * excess / excess.size, squashed.shape)
    upstream = upstream + (g_mass * squashed * (1.0 - squashed)).reshape(raw.shape)
    return loss, backward(policy.mean_net, states, upstream)


def bc_train(
    policy: GaussianPolicy,
    demos: DemonstrationSet,
    epochs: int,
    lr: float,
    batch_size: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    optimizer: str = "adam",
    show_progress: bool = False,
) -> Tuple[GaussianPolicy, List[float]]:
    """
    Regresses the policy mean onto the demonstrations. Returns the policy and
    the per-epoch loss trace (mean minibatch loss of each epoch). log_std is untouched.
    """
    if len(demos) == 0:
        raise ConfigurationError("behavior cloning needs at least one demonstration")
    if policy.n_actions != demos.actions.shape[1] or policy.mean_net.n_inputs != demos.states.shape[1]:
        raise DimensionError(
            f"policy {policy.mean_net.layer_sizes} does not match demonstrations "
            f"({demos.states.shape[1]} inputs, {demos.actions.shape[1]} actions)"
        )
    rng = rng or np.random.default_rng(0)
    batch_size = batch_size or len(demos)
    state = OptimizerState(kind=optimizer)
    net = policy.mean_net
    trace: List[float] = []

    epoch_range = range(epochs)
    if show_progress:
        tqdm.write("\n", end="")
        epoch_range = tqdm(epoch_range, file=sys.stdout, desc="Cloning baseline...")
    for epoch in epoch_range:
        losses, weights = [], []
        for idx in minibatches(len(demos), batch_size, rng):
            loss, grads = bc_loss(GaussianPolicy(net, policy.log_std), demos.states[idx], demos.actions[idx], demos.shape)
            if not np.isfinite(loss):
                raise TrainingError(f"epoch {epoch}: non-finite behavior-cloning loss", report=trace)
            net = net.with_params(grad_step(net.params, grads, state, lr))
            losses.append(loss)
            weights.append(idx.size)
        trace.append(float(np.average(losses, weights=weights)))
        logger.debug(f"bc epoch {epoch}: loss={trace[-1]:.6g}")

    if trace:
        logger.info(f"behavior cloning: loss {trace[0]:.4g} -> {trace[-1]:.4g} over {epochs} epochs")
    return GaussianPolicy(net, policy.log_std.copy()), trace


def policy_actor(policy: GaussianPolicy, env: SliceEnv) -> Actor:
    """Deterministic actor: projected policy mean on the learner view."""
    scenario = env.scenario

    def act(state: NetworkState) -> AllocationAction:
        return project_action(policy.mean(learner_view(state, scenario)), env.action_shape)

    return act


def evaluate_imitation(
    policy: Union[GaussianPolicy, Actor],
    baseline: Optional[Actor],
    env: SliceEnv,
    episodes: int,
    seeds: Optional[Sequence[int]] = None,
) -> Tuple[float, float, float]:
    """
    Runs the policy (mean actions) and the baseline on the same seeds.
    Returns (policy_usage, baseline_usage, mean_action_gap) where the gap is the
    mean elementwise distance to the baseline's action on the states the policy visits.
    """
    if episodes < 1:
        raise ConfigurationError(f"episodes must be >= 1, got {episodes}")
    baseline = baseline or env.baseline
    actor = policy_actor(policy, env) if isinstance(policy, GaussianPolicy) else policy
    seeds = list(seeds) if seeds is not None else list(range(episodes))
    seeds = seeds[:episodes]

    gaps = []

    def recording_actor(state: NetworkState) -> AllocationAction:
        action = actor(state)
        gaps.append(float(np.mean(np.abs(action.shares - baseline(state).shares))))
        return action

    policy_stats = evaluate_policy(env, recording_actor, seeds)
    baseline_stats = evaluate_policy(env, baseline, seeds)
    return policy_stats["mean_usage"], baseline_stats["mean_usage"], float(np.mean(gaps))
