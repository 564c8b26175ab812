"""
Safety DRL: clipped-surrogate policy optimization on the Lagrangian-shaped
reward r - lambda * c, an ensemble cost critic predicting the immediate cost
c(s, a), and the gate that falls back to the baseline policy when the
critic is confident the proposed action breaks an SLA.
"""
import copy
import math
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from sliceorch.config import ExplorationConfig, SafeConfig, SwitchConfig
from sliceorch.env import AllocationAction
from sliceorch.errors import DimensionError, NonFiniteError
from sliceorch.mdp import Trajectory, compute_advantages, gae, minibatches, normalize_advantages
from sliceorch.neural import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    GaussianPolicy,
    OptimizerState,
    ParamFunction,
    backward,
    clip_exploration,
    forward,
    gaussian_log_prob,
    grad_step,
    project_action,
    sample_action,
)

logger = logging.getLogger(__name__)

ENTROPY_CONSTANT = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class LagrangianState:
    # one multiplier per constraint stream; a single aggregated stream here
    multipliers: np.ndarray
    eta: float
    update_period: int

    def __post_init__(self):
        object.__setattr__(self, "multipliers", np.asarray(self.multipliers, dtype=np.float64))

    @property
    def value(self) -> float:
        return float(self.multipliers[0])


def shaped_reward(r, c, lag: LagrangianState):
    """r - lambda * c."""
    return r - lag.value * c


def update_multiplier(lag: LagrangianState, avg_cost: float) -> LagrangianState:
    """Projected dual ascent: lambda' = max(0, lambda + eta * avg_cost)."""
    updated = np.maximum(0.0, lag.multipliers + lag.eta * avg_cost)
    return LagrangianState(updated, lag.eta, lag.update_period)


def regression_step(f: ParamFunction, optimizer: OptimizerState, x, y, lr: float):
    """One mean-squared-error descent step on a scalar-output function."""
    y = np.asarray(y, dtype=np.float64)
    err = forward(f, x)[:, 0] - y
    grads = backward(f, x, (2.0 * err / y.size)[:, None])
    return f.with_params(grad_step(f.params, grads, optimizer, lr)), float(np.mean(err ** 2))


@dataclass
class CostCritic:
    """Ensemble of scalar regressors on state (+) action; members differ only by init."""

    members: List[ParamFunction]
    optimizers: List[OptimizerState] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise DimensionError("a cost critic needs at least one member")
        sizes = {m.layer_sizes for m in self.members}
        if len(sizes) != 1:
            raise DimensionError(f"ensemble members must share one architecture, got {sizes}")
        if not self.optimizers:
            self.optimizers = [OptimizerState() for _ in self.members]

    @classmethod
    def init(
        cls,
        input_dim: int,
        hidden_sizes: Sequence[int],
        ensemble_size: int,
        rng: np.random.Generator,
        optimizer: str = "adam",
    ):
        sizes = [input_dim, *hidden_sizes, 1]
        members = [ParamFunction.init(sizes, rng) for _ in range(ensemble_size)]
        return cls(members, [OptimizerState(kind=optimizer) for _ in members])

    @property
    def input_dim(self) -> int:
        return self.members[0].n_inputs


def _critic_input(critic: CostCritic, state_vec, action_vec) -> np.ndarray:
    x = np.concatenate([np.asarray(state_vec, dtype=np.float64), np.asarray(action_vec, dtype=np.float64)], axis=-1)
    if x.shape[-1] != critic.input_dim:
        raise DimensionError(f"cost critic expects {critic.input_dim} inputs, got {x.shape[-1]}")
    return x


def predict_cost(critic: CostCritic, state_vec, action_vec) -> Tuple[float, float]:
    """Ensemble mean and standard deviation of the predicted immediate cost."""
    x = _critic_input(critic, state_vec, action_vec)
    predictions = np.array([forward(m, x)[..., 0] for m in critic.members])
    mean = predictions.mean(axis=0)
    std = predictions.std(axis=0)
    if np.ndim(mean) == 0:
        return float(mean), float(std)
    return mean, std


def train_cost_critic(critic: CostCritic, states, actions, costs, lr: float):
    """
    One regression step per ensemble member toward the observed immediate costs.
    Returns the critic and the post-step mean-squared error averaged over members.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size == 0:
        raise DimensionError("train_cost_critic needs a non-empty batch")
    if not np.all(np.isfinite(costs)):
        raise NonFiniteError("non-finite cost targets rejected")
    x = _critic_input(critic, states, actions)
    for i, member in enumerate(critic.members):
        critic.members[i], _ = regression_step(member, critic.optimizers[i], x, costs, lr)
    mse = np.mean([np.mean((forward(m, x)[:, 0] - costs) ** 2) for m in critic.members])
    return critic, float(mse)


def surrogate_loss(
    states,
    raw_actions,
    policy: GaussianPolicy,
    old_logp,
    advantages,
    clip_eps: float,
    entropy_coef: float = 0.0,
):
    """
    loss = -mean(min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)) - entropy_coef * H
    with rho = exp(logp - old_logp). Returns (loss, gradient over policy.params).
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    raws = np.atleast_2d(np.asarray(raw_actions, dtype=np.float64))
    old_logp = np.asarray(old_logp, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    n = states.shape[0]

    mean = forward(policy.mean_net, states)
    log_std = policy.clamped_log_std
    var = np.exp(2.0 * log_std)
    logp = gaussian_log_prob(raws, mean, log_std)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(logp - old_logp)
    if not np.all(np.isfinite(ratio)):
        raise NonFiniteError("non-finite probability ratio, batch rejected")

    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped_term = ratio * advantages
    surrogate = np.minimum(unclipped_term, clipped * advantages)
    entropy = float(np.sum(log_std + ENTROPY_CONSTANT))
    loss = -float(np.mean(surrogate)) - entropy_coef * entropy

    # d(-mean surrogate)/d logp_i; zero where the clipped branch is selected
    active = unclipped_term <= clipped * advantages
    coef = -np.where(active, unclipped_term, 0.0) / n

    diff = raws - mean
    g_mean = coef[:, None] * diff / var
    g_net = backward(policy.mean_net, states, g_mean)
    g_log_std = np.sum(coef[:, None] * (diff ** 2 / var - 1.0), axis=0) - entropy_coef
    g_log_std = g_log_std * ((policy.log_std > LOG_STD_MIN) & (policy.log_std < LOG_STD_MAX))
    return loss, np.concatenate([g_net, g_log_std])


def gate_decision(mean_cost: float, std_cost: float, cfg: SwitchConfig) -> bool:
    """Invoke the baseline when mean + kappa * std exceeds the threshold."""
    return bool(cfg.enabled and mean_cost + cfg.kappa * std_cost > cfg.threshold)


def propose(policy: GaussianPolicy, state_vec, exploration: ExplorationConfig, rng: np.random.Generator):
    """Gaussian sample whose deviation from the mean is clipped to +-H; returns (raw, logp)."""
    sample, _ = sample_action(policy, state_vec, rng)
    mean = policy.mean(state_vec)
    raw = clip_exploration(mean, sample - mean, exploration)
    return raw, float(gaussian_log_prob(raw, mean, policy.clamped_log_std))


@dataclass(frozen=True)
class Decision:
    shares: np.ndarray
    used_baseline: bool
    raw: np.ndarray
    logp: float
    predicted_cost: float = 0.0
    predicted_std: float = 0.0
    # projected policy proposal, equal to shares unless the baseline took over
    proposal: Optional[np.ndarray] = None


def screen_proposal(
    state_vec,
    raw: np.ndarray,
    logp: float,
    proposal: np.ndarray,
    critic: CostCritic,
    baseline: Union[AllocationAction, Callable[[], AllocationAction]],
    cfg: SwitchConfig,
) -> Decision:
    """Keeps a projected proposal unless the gate fires, in which case the baseline allocation is returned."""
    proposal = np.asarray(proposal, dtype=np.float64)
    mean_cost, std_cost = 0.0, 0.0
    if cfg.enabled:
        mean_cost, std_cost = predict_cost(critic, state_vec, proposal.ravel())
    if gate_decision(mean_cost, std_cost, cfg):
        fallback = baseline() if callable(baseline) else baseline
        return Decision(np.array(fallback.shares), True, raw, logp, mean_cost, std_cost, proposal)
    return Decision(proposal, False, raw, logp, mean_cost, std_cost, proposal)


def select_action(
    state_vec,
    policy: GaussianPolicy,
    critic: CostCritic,
    baseline: Union[AllocationAction, Callable[[], AllocationAction]],
    cfg: SwitchConfig,
    exploration: ExplorationConfig,
    rng: np.random.Generator,
    shape: Tuple[int, int],
) -> Decision:
    """
    Projects an explored policy sample; returns the baseline allocation instead when
    the gate is enabled and the critic predicts an SLA break with confidence.
    """
    raw, logp = propose(policy, state_vec, exploration, rng)
    return screen_proposal(state_vec, raw, logp, project_action(raw, shape).shares, critic, baseline, cfg)


class SafeAgent:
    """
    One learner: Gaussian policy, reward and cost value critics, the immediate-cost
    ensemble and the Lagrange multiplier. `shape` is the allocation block it controls.
    """

    def __init__(
        self,
        agent_id: str,
        obs_dim: int,
        shape: Tuple[int, int],
        config: SafeConfig,
        rng: np.random.Generator,
        initial_share: Optional[float] = None,
    ):
        self.agent_id = agent_id
        self.obs_dim = obs_dim
        self.shape = tuple(shape)
        self.config = config
        self.rng = rng
        hidden = list(config.network.hidden_sizes)
        act_dim = self.shape[0] * self.shape[1]
        kind = config.network.optimizer

        if initial_share is None:
            initial_share = config.exploration.initial_share or 1.0 / (self.shape[0] + 1)
        self.policy = GaussianPolicy.init(
            [obs_dim, *hidden, act_dim], rng, log_std=config.initial_log_std, initial_share=initial_share
        )
        self.value = ParamFunction.init([obs_dim, *hidden, 1], rng)
        self.cost_value = ParamFunction.init([obs_dim, *hidden, 1], rng)
        self.critic = CostCritic.init(obs_dim + act_dim, hidden, config.network.ensemble_size, rng, kind)
        lag = config.lagrangian
        self.lagrangian = LagrangianState(np.array([lag.initial]), lag.eta, lag.update_period)

        self.policy_opt = OptimizerState(kind=kind)
        self.value_opt = OptimizerState(kind=kind)
        self.cost_value_opt = OptimizerState(kind=kind)
        self.version = 0
        self.iterations = 0
        self._cost_window: List[float] = []

    def act(self, obs) -> Tuple[np.ndarray, float]:
        return propose(self.policy, obs, self.config.exploration, self.rng)

    def select(self, obs, baseline) -> Decision:
        cfg = self.config
        return select_action(obs, self.policy, self.critic, baseline, cfg.switch, cfg.exploration, self.rng, self.shape)

    def screen(self, obs, raw, logp, proposal, baseline) -> Decision:
        return screen_proposal(obs, raw, logp, proposal, self.critic, baseline, self.config.switch)

    def warm_start(self, policy: GaussianPolicy):
        """Adopts a pre-trained policy mean and resets exploration to the configured sigma."""
        if policy.mean_net.layer_sizes != self.policy.mean_net.layer_sizes:
            raise DimensionError(
                f"warm-start policy {policy.mean_net.layer_sizes} does not match "
                f"{self.policy.mean_net.layer_sizes}"
            )
        self.policy = GaussianPolicy(
            policy.mean_net.with_params(policy.mean_net.params),
            np.full(self.policy.n_actions, self.config.initial_log_std),
        )
        self.policy_opt = OptimizerState(kind=self.config.network.optimizer)

    def snapshot(self) -> dict:
        return copy.deepcopy(self.__dict__)

    def restore(self, snapshot: dict):
        self.__dict__.update(copy.deepcopy(snapshot))

    def update(self, traj: Trajectory, bootstrap_obs) -> dict:
        """
        Critic fits, shaped advantages and clipped-surrogate epochs on one rollout.
        The cost critic learns from executed allocations and their observed costs;
        the policy and value critics learn from the proposal stream, where a step
        the baseline took over carries the proposal's reward and predicted cost.
        """
        cfg = self.config
        lr_critic = cfg.network.critic_lr
        n = len(traj)
        states = traj.states
        executed = traj.executed
        costs = traj.costs
        executed_costs = traj.executed_costs
        stats = {"critic_mse": float("nan"), "policy_loss": float("nan"), "skipped_batches": 0}

        for _ in range(cfg.critic_epochs):
            for idx in minibatches(n, cfg.minibatch_size, self.rng):
                _, stats["critic_mse"] = train_cost_critic(
                    self.critic, states[idx], executed[idx], executed_costs[idx], lr_critic
                )

        last_done = traj.transitions[-1].done
        values = np.append(forward(self.value, states)[:, 0], 0.0 if last_done else forward(self.value, bootstrap_obs)[0])
        cost_values = np.append(
            forward(self.cost_value, states)[:, 0],
            0.0 if last_done else forward(self.cost_value, bootstrap_obs)[0],
        )
        compute_advantages(traj, values, cfg.discount, cost_values)
        lam = self.lagrangian.value
        shaped = shaped_reward(traj.rewards, costs, self.lagrangian)
        shaped_advantages = gae(
            shaped, values - lam * cost_values, traj.dones, cfg.discount.gamma, cfg.discount.lambda_gae
        )

        if n >= 2:
            advantages = normalize_advantages(shaped_advantages)
            raws = traj.actions
            old_logp = traj.logps
            for _ in range(cfg.epochs):
                for idx in minibatches(n, cfg.minibatch_size, self.rng):
                    try:
                        loss, grads = surrogate_loss(
                            states[idx], raws[idx], self.policy, old_logp[idx], advantages[idx],
                            cfg.clip_eps, cfg.entropy_coef,
                        )
                        params = grad_step(self.policy.params, grads, self.policy_opt, cfg.network.policy_lr)
                    except NonFiniteError as e:
                        logger.warning(f"agent {self.agent_id}: skipping batch ({e})")
                        stats["skipped_batches"] += 1
                        continue
                    self.policy = self.policy.with_params(params)
                    stats["policy_loss"] = loss
        else:
            logger.warning(f"agent {self.agent_id}: rollout of {n} step(s), surrogate skipped")

        for _ in range(cfg.critic_epochs):
            for idx in minibatches(n, cfg.minibatch_size, self.rng):
                self.value, _ = regression_step(self.value, self.value_opt, states[idx], traj.reward_returns[idx], lr_critic)
                self.cost_value, _ = regression_step(
                    self.cost_value, self.cost_value_opt, states[idx], traj.cost_returns[idx], lr_critic
                )

        self.version += 1
        return stats

    def end_iteration(self, mean_cost: float) -> Optional[float]:
        """
        Records the iteration's mean cost; every update_period iterations the
        multiplier takes a dual step on the window average. Returns the new value if updated.
        """
        self.iterations += 1
        self._cost_window.append(float(mean_cost))
        if self.iterations % self.lagrangian.update_period != 0:
            return None
        avg_cost = float(np.mean(self._cost_window))
        self._cost_window = []
        if self.config.lagrangian.adaptive:
            self.lagrangian = update_multiplier(self.lagrangian, avg_cost)
            logger.debug(f"agent {self.agent_id}: lambda -> {self.lagrangian.value:.6f} (avg cost {avg_cost:.4f})")
        return self.lagrangian.value
