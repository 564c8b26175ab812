import math
import pytest

import numpy as np

from sliceorch.config import ExplorationConfig, SafeConfig, SwitchConfig
from sliceorch.env import AllocationAction
from sliceorch.errors import DimensionError, NonFiniteError
from sliceorch.mdp import Trajectory, Transition
from sliceorch.neural import GaussianPolicy, ParamFunction, project_action
from sliceorch.report import REPORT_COLUMNS, read_report
from sliceorch.safe import (
    CostCritic,
    LagrangianState,
    SafeAgent,
    gate_decision,
    predict_cost,
    propose,
    screen_proposal,
    select_action,
    shaped_reward,
    surrogate_loss,
    train_cost_critic,
    update_multiplier,
)
from sliceorch.training import train_safe


def lagrangian(value, eta=0.1, period=1):
    return LagrangianState(np.array([value]), eta, period)


def constant_critic(input_dim, value, members=3):
    """Ensemble whose every member outputs `value`."""
    sizes = (input_dim, 4, 1)
    params = np.zeros((input_dim + 1) * 4 + 5)
    params[-1] = value
    return CostCritic([ParamFunction(sizes, params.copy()) for _ in range(members)])


def random_trajectory(agent, rng, n=32, baseline_every=0):
    traj = Trajectory()
    for i in range(n):
        obs = rng.uniform(0, 1, agent.obs_dim)
        raw, logp = agent.act(obs)
        used_baseline = bool(baseline_every) and i % baseline_every == 0
        traj.append(
            Transition(
                state_vec=obs,
                action_vec=raw,
                logp=logp,
                reward=-float(rng.uniform(0, 4)),
                cost=float(rng.uniform(-1, 0.5)),
                done=i == n - 1,
                used_baseline=used_baseline,
                executed=project_action(raw, agent.shape).flat(),
            )
        )
    return traj


@pytest.fixture
def policy(rng):
    return GaussianPolicy.init([3, 4, 2], rng)


@pytest.fixture
def batch(policy, rng):
    states = rng.standard_normal((6, 3))
    raws = policy.mean(states) + 0.3 * rng.standard_normal((6, 2))
    return states, raws, policy.log_prob(states, raws)


class TestLagrangian:
    "shaped_reward / update_multiplier"

    def test_unconstrained(self):
        """lambda 0 leaves the reward as is"""
        assert shaped_reward(-1.5, 0.7, lagrangian(0.0)) == -1.5

    def test_arithmetic(self):
        """r=-1, c=0.2, lambda=2 -> -1.4"""
        assert shaped_reward(-1.0, 0.2, lagrangian(2.0)) == pytest.approx(-1.4)

    def test_dual_step(self):
        """0.5 + 0.1 * -0.2 -> 0.48"""
        assert update_multiplier(lagrangian(0.5), -0.2).value == pytest.approx(0.48)

    def test_projection(self):
        """the multiplier never goes below zero"""
        assert update_multiplier(lagrangian(0.01), -0.5).value == 0.0

    def test_monotone_ascent(self):
        """persistent violations raise lambda every period"""
        lag = lagrangian(0.0)
        trace = []
        for _ in range(5):
            lag = update_multiplier(lag, 0.3)
            trace.append(lag.value)
        assert all(b > a for a, b in zip(trace, trace[1:]))


class TestSurrogate:
    "surrogate_loss"

    def test_on_policy(self, policy, batch):
        """ratio 1 gives -mean(A)"""
        states, raws, logp = batch
        advantages = np.array([1.0, -2.0, 0.5, 0.0, 3.0, -1.0])
        loss, _ = surrogate_loss(states, raws, policy, logp, advantages, 0.2)
        assert loss == pytest.approx(-advantages.mean())

    def test_clip_engages(self, policy, batch):
        """ratio 1.3, eps 0.2, A=1 -> 1.2 and no gradient through the ratio"""
        states, raws, logp = batch
        loss, grads = surrogate_loss(states, raws, policy, logp - math.log(1.3), np.ones(6), 0.2)
        assert loss == pytest.approx(-1.2)
        assert np.allclose(grads, 0.0)

    def test_zero_advantages(self, policy, batch):
        """A=0 gives zero loss and zero gradient"""
        states, raws, logp = batch
        loss, grads = surrogate_loss(states, raws, policy, logp, np.zeros(6), 0.2)
        assert loss == 0.0
        assert not grads.any()

    def test_non_finite_ratio(self, policy, batch):
        """an exploding ratio rejects the batch"""
        states, raws, logp = batch
        with pytest.raises(NonFiniteError):
            surrogate_loss(states, raws, policy, logp - 1e6, np.ones(6), 0.2)

    def test_finite_differences(self, policy, batch, rng):
        """analytic gradient of the unclipped surrogate plus entropy bonus"""
        states, raws, logp = batch
        old_logp = logp + 0.1 * rng.standard_normal(6)
        advantages = rng.standard_normal(6)

        def loss_at(params):
            return surrogate_loss(states, raws, policy.with_params(params), old_logp, advantages, 10.0, 0.01)[0]

        _, grads = surrogate_loss(states, raws, policy, old_logp, advantages, 10.0, 0.01)
        h = 1e-6
        numeric = np.empty_like(policy.params)
        for i in range(policy.params.size):
            plus, minus = policy.params.copy(), policy.params.copy()
            plus[i] += h
            minus[i] -= h
            numeric[i] = (loss_at(plus) - loss_at(minus)) / (2 * h)
        assert np.allclose(grads, numeric, rtol=1e-4, atol=1e-7)


class TestCostCritic:
    "CostCritic / train_cost_critic / predict_cost"

    def test_identical_members(self, rng):
        """an ensemble of copies has zero spread"""
        member = ParamFunction.init((5, 4, 1), rng)
        critic = CostCritic([member, member.with_params(member.params)])
        _, std = predict_cost(critic, rng.standard_normal(3), rng.standard_normal(2))
        assert std == 0.0

    def test_single_member(self, rng):
        """E=1 has zero spread by convention"""
        critic = CostCritic.init(5, [4], 1, rng)
        assert predict_cost(critic, np.zeros(3), np.zeros(2))[1] == 0.0

    def test_untrained_members_disagree(self, rng):
        """independent inits give a nonzero spread"""
        critic = CostCritic.init(5, [8], 5, rng)
        _, std = predict_cost(critic, rng.standard_normal(3), rng.standard_normal(2))
        assert std > 0

    def test_batched_prediction(self, rng):
        """2-D inputs give one mean and std per row"""
        critic = CostCritic.init(5, [8], 3, rng)
        mean, std = predict_cost(critic, rng.standard_normal((4, 3)), rng.standard_normal((4, 2)))
        assert mean.shape == (4,) and std.shape == (4,)

    def test_input_size(self, rng):
        critic = CostCritic.init(5, [8], 3, rng)
        with pytest.raises(DimensionError):
            predict_cost(critic, np.zeros(3), np.zeros(3))

    def test_constant_cost_mse_decreases(self, rng):
        """full-batch steps on a constant target decrease the error monotonically"""
        critic = CostCritic.init(5, [8], 3, rng, optimizer="sgd")
        states, actions = rng.uniform(0, 1, (64, 3)), rng.uniform(0, 1, (64, 2))
        costs = np.full(64, 0.5)
        trace = [train_cost_critic(critic, states, actions, costs, 0.01)[1] for _ in range(100)]
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
        assert trace[-1] < trace[0]

    def test_overfit_single_sample(self, rng):
        """a repeated sample is fitted within 1e-3"""
        critic = CostCritic.init(5, [8], 3, rng, optimizer="sgd")
        state, action = rng.uniform(0, 1, 3), rng.uniform(0, 1, 2)
        states, actions = np.tile(state, (8, 1)), np.tile(action, (8, 1))
        for _ in range(2000):
            train_cost_critic(critic, states, actions, np.full(8, 0.3), 0.02)
        mean, _ = predict_cost(critic, state, action)
        assert abs(mean - 0.3) < 1e-3

    def test_generalizes_on_simulator_data(self, env, rng):
        """held-out error beats the untrained ensemble"""
        states, actions, costs = [], [], []
        episode = 0
        state = env.reset(episode)
        for _ in range(400):
            action = AllocationAction(env.baseline(state).shares * rng.uniform(0.75, 1.0))
            outcome = env.step(state, action)
            states.append(env.observation(state))
            actions.append(action.flat())
            costs.append(outcome.cost)
            state = outcome.next_state
            if state.t >= 50:
                episode += 1
                state = env.reset(episode)
        states, actions, costs = np.array(states), np.array(actions), np.array(costs)

        critic = CostCritic.init(env.obs_dim + 8, [16], 3, rng)
        untrained, _ = predict_cost(critic, states[300:], actions[300:])
        for _ in range(500):
            train_cost_critic(critic, states[:300], actions[:300], costs[:300], 1e-2)
        trained, _ = predict_cost(critic, states[300:], actions[300:])
        assert np.mean(np.abs(trained - costs[300:])) < np.mean(np.abs(untrained - costs[300:]))

    def test_rejects_bad_targets(self, rng):
        critic = CostCritic.init(5, [4], 2, rng)
        with pytest.raises(NonFiniteError):
            train_cost_critic(critic, np.zeros((2, 3)), np.zeros((2, 2)), [0.0, np.inf], 0.1)
        with pytest.raises(DimensionError):
            train_cost_critic(critic, np.zeros((0, 3)), np.zeros((0, 2)), [], 0.1)


class TestGate:
    "gate_decision / select_action"

    def test_gate_threshold(self):
        """mean + kappa * std against the threshold"""
        cfg = SwitchConfig(threshold=0.0, kappa=2.0)
        assert gate_decision(-0.1, 0.1, cfg)
        assert not gate_decision(-0.3, 0.1, cfg)
        assert not gate_decision(10.0, 1.0, SwitchConfig(enabled=False))

    def test_threshold_monotone(self, rng):
        """raising the threshold never adds baseline invocations on recorded predictions"""
        means = rng.normal(0.0, 1.0, 500)
        stds = rng.uniform(0.0, 0.5, 500)
        counts = [
            sum(gate_decision(m, s, SwitchConfig(threshold=threshold)) for m, s in zip(means, stds))
            for threshold in np.linspace(-3.0, 3.0, 25)
        ]
        assert all(later <= earlier for earlier, later in zip(counts, counts[1:]))
        assert counts[0] > counts[-1]

    def test_disabled_gate(self, rng):
        """a disabled gate always executes the policy proposal"""
        policy = GaussianPolicy.init([4, 4, 4], rng)
        critic = constant_critic(8, 10.0)

        def baseline():
            raise AssertionError("baseline consulted with the gate disabled")

        for _ in range(20):
            decision = select_action(
                rng.uniform(size=4), policy, critic, baseline, SwitchConfig(enabled=False),
                ExplorationConfig(), rng, (2, 2),
            )
            assert not decision.used_baseline
            assert np.allclose(decision.shares, project_action(decision.raw, (2, 2)).shares)

    def test_saturated_gate(self, rng):
        """a critic predicting +10 always hands over to the baseline"""
        policy = GaussianPolicy.init([4, 4, 4], rng)
        fallback = AllocationAction(np.full((2, 2), 0.25))
        for _ in range(20):
            decision = select_action(
                rng.uniform(size=4), policy, constant_critic(8, 10.0), fallback, SwitchConfig(),
                ExplorationConfig(), rng, (2, 2),
            )
            assert decision.used_baseline
            assert np.array_equal(decision.shares, fallback.shares)
            assert decision.predicted_cost == pytest.approx(10.0)

    def test_exploration_bounded(self, rng):
        """proposals never stray more than H from the policy mean"""
        policy = GaussianPolicy.init([4, 4, 4], rng, log_std=1.0)
        state = rng.uniform(size=4)
        for _ in range(50):
            decision = select_action(
                state, policy, constant_critic(8, -1.0), None, SwitchConfig(),
                ExplorationConfig(max_deviation=0.2), rng, (2, 2),
            )
            assert np.all(np.abs(decision.raw - policy.mean(state)) <= 0.2 + 1e-12)

    def test_select_is_propose_then_screen(self):
        """select_action equals an explored proposal, projected and then screened"""
        policy = GaussianPolicy.init([4, 4, 4], np.random.default_rng(0))
        critic = constant_critic(8, -0.05, members=2)
        fallback = AllocationAction(np.full((2, 2), 0.25))
        state = np.linspace(0.0, 1.0, 4)
        for seed in range(10):
            decision = select_action(
                state, policy, critic, fallback, SwitchConfig(), ExplorationConfig(), np.random.default_rng(seed), (2, 2)
            )
            raw, logp = propose(policy, state, ExplorationConfig(), np.random.default_rng(seed))
            screened = screen_proposal(
                state, raw, logp, project_action(raw, (2, 2)).shares, critic, fallback, SwitchConfig()
            )
            assert np.array_equal(decision.raw, screened.raw)
            assert np.array_equal(decision.shares, screened.shares)
            assert decision.used_baseline == screened.used_baseline

    def test_gated_decision_keeps_proposal(self, rng):
        """a gated decision still carries the proposal it replaced"""
        proposal = np.full((2, 2), 0.1)
        decision = screen_proposal(
            rng.uniform(size=4), np.zeros(4), -1.0, proposal, constant_critic(8, 0.5),
            AllocationAction(np.full((2, 2), 0.4)), SwitchConfig(),
        )
        assert decision.used_baseline
        assert np.array_equal(decision.proposal, proposal)
        assert np.allclose(decision.shares, 0.4)
        assert decision.predicted_cost == pytest.approx(0.5)


class TestSafeAgent:
    "SafeAgent"

    def test_update_advances(self, small_safe_config, rng):
        """one update changes the policy and bumps the version"""
        agent = SafeAgent("agent_1", 24, (2, 4), small_safe_config, rng)
        before = agent.policy.params.copy()
        stats = agent.update(random_trajectory(agent, rng), np.zeros(24))
        assert agent.version == 1
        assert not np.array_equal(agent.policy.params, before)
        assert math.isfinite(stats["critic_mse"])
        assert stats["skipped_batches"] == 0

    def test_gated_steps_train_policy(self, small_safe_config, rng):
        """a rollout run entirely by the baseline still moves the policy on its proposals"""
        agent = SafeAgent("agent_1", 24, (2, 4), small_safe_config, rng)
        before = agent.policy.params.copy()
        agent.update(random_trajectory(agent, rng, baseline_every=1), np.zeros(24))
        assert not np.array_equal(agent.policy.params, before)
        assert agent.version == 1

    def test_critic_learns_executed_costs(self, small_safe_config):
        """the cost critic only sees executed costs, whatever the proposal stream carries"""
        critics = []
        for shift in (0.0, 3.0):
            agent = SafeAgent("agent_1", 24, (2, 4), small_safe_config, np.random.default_rng(0))
            traj = random_trajectory(agent, np.random.default_rng(1), baseline_every=2)
            for t in traj.transitions:
                t.executed_cost = t.cost
                t.cost = t.cost + shift
            agent.update(traj, np.zeros(24))
            critics.append(np.concatenate([member.params for member in agent.critic.members]))
        assert np.array_equal(critics[0], critics[1])

    def test_initial_allocation_under_full(self, small_safe_config, rng):
        """a fresh agent starts every domain below full use"""
        agent = SafeAgent("agent_1", 24, (2, 4), small_safe_config, rng)
        shares = project_action(agent.policy.mean(rng.uniform(size=24)), (2, 4)).shares
        assert np.allclose(shares, 1.0 / 3.0, atol=0.02)
        assert np.all(shares.sum(axis=0) < 0.75)

    def test_multiplier_period(self, rng):
        """lambda moves once per update_period iterations, on the window average"""
        config = SafeConfig.parse_obj({"lagrangian": {"eta": 0.1, "update_period": 2}})
        agent = SafeAgent("agent_1", 6, (1, 2), config, rng)
        assert agent.end_iteration(0.2) is None
        assert agent.end_iteration(0.4) == pytest.approx(0.03)
        assert agent.lagrangian.value == pytest.approx(0.03)

    def test_fixed_multiplier(self, rng):
        """a non-adaptive multiplier stays at its initial value"""
        config = SafeConfig.parse_obj({"lagrangian": {"initial": 0.5, "update_period": 1, "adaptive": False}})
        agent = SafeAgent("agent_1", 6, (1, 2), config, rng)
        for _ in range(3):
            agent.end_iteration(1.0)
        assert agent.lagrangian.value == 0.5

    def test_snapshot_restore(self, small_safe_config, rng):
        """restore brings back bit-identical parameters"""
        agent = SafeAgent("agent_1", 24, (2, 4), small_safe_config, rng)
        snapshot = agent.snapshot()
        before = agent.policy.params.copy()
        agent.update(random_trajectory(agent, rng), np.zeros(24))
        agent.restore(snapshot)
        assert np.array_equal(agent.policy.params, before)
        assert agent.version == 0

    def test_warm_start(self, small_safe_config, rng):
        """the pre-trained mean is adopted, exploration reset to sigma"""
        agent = SafeAgent("agent_1", 24, (2, 4), small_safe_config, rng)
        pretrained = GaussianPolicy.init([24, 8, 8, 8], rng, log_std=-3.0)
        agent.warm_start(pretrained)
        assert np.array_equal(agent.policy.mean_net.params, pretrained.mean_net.params)
        assert np.allclose(agent.policy.log_std, math.log(0.3))
        with pytest.raises(DimensionError):
            agent.warm_start(GaussianPolicy.init([24, 4, 8], rng))


class TestTrainSafe:
    "train_safe"

    def test_zero_iterations(self, env, small_safe_config, tmp_path):
        """an empty report still carries its header"""
        path = str(tmp_path / "report.csv")
        report = train_safe(env, small_safe_config, 0, seed=0, report_path=path)
        assert len(report) == 0
        header, rows = read_report(path)
        assert header == list(REPORT_COLUMNS)
        assert rows == []

    def test_report_rows(self, env, small_safe_config):
        """one row per iteration, rates within [0, 1], lambda non-negative"""
        report = train_safe(env, small_safe_config, 3, seed=0)
        assert report.column("iteration").tolist() == [0, 1, 2]
        assert np.all((report.column("violation_rate") >= 0) & (report.column("violation_rate") <= 1))
        assert np.all(report.lambda_trace >= 0)
        assert len(report.agents) == 1

    def test_deterministic(self, env, small_safe_config, tmp_path):
        """same seed, byte-identical reports"""
        a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        train_safe(env, small_safe_config, 2, seed=5, report_path=a)
        train_safe(env, small_safe_config, 2, seed=5, report_path=b)
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()

    def test_gate_off(self, env, small_safe_config):
        """a disabled gate never switches"""
        config = small_safe_config.copy(update={"switch": SwitchConfig(enabled=False)})
        report = train_safe(env, config, 2, seed=0)
        assert not report.column("switch_rate").any()

    def test_gate_always(self, env, small_safe_config):
        """a gate that always fires runs the baseline, which keeps the SLAs"""
        config = small_safe_config.copy(update={"switch": SwitchConfig(threshold=-1e9)})
        report = train_safe(env, config, 2, seed=0)
        assert np.all(report.column("switch_rate") == 1.0)
        assert np.all(report.column("violation_rate") <= 0.05)
