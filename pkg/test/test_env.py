import math
import pytest

import numpy as np

from sliceorch.env import (
    AllocationAction,
    DomainSpec,
    NetworkState,
    ScenarioConfig,
    SliceEnv,
    SliceSpec,
    TrafficModel,
    baseline_policy,
    cost_fn,
    reward_fn,
    sla_margins,
)
from sliceorch.errors import ConfigurationError, DimensionError, FeasibilityError


def single_chain(n_domains=1, capacity=2.0, service_rate=10.0, bound=1.0, min_tp=0.0, base_rate=10.0):
    domains = [DomainSpec(d, capacity, service_rate) for d in ("RAN", "TN", "CN", "EDGE")[:n_domains]]
    slices = [SliceSpec(0, bound, TrafficModel(base_rate), min_throughput=min_tp)]
    return ScenarioConfig(domains=domains, slices=slices)


def fixed_state(rates, backlogs=None, arrivals=None, t=0):
    rates = np.array(rates, dtype=np.float64)
    backlogs = np.zeros_like(rates) if backlogs is None else backlogs
    arrivals = rates[:, 0] if arrivals is None else arrivals
    return NetworkState(t=t, rates=rates, backlogs=backlogs, arrivals=arrivals)


class TestScenario:
    "ScenarioConfig"

    def test_zero_slices(self):
        """a scenario without slices is rejected"""
        with pytest.raises(ConfigurationError, match="at least one slice"):
            ScenarioConfig(domains=[DomainSpec("RAN", 1, 1)], slices=[])

    def test_non_positive_capacity(self):
        """capacity and service rate must be positive"""
        with pytest.raises(ConfigurationError) as e:
            ScenarioConfig(
                domains=[DomainSpec("RAN", 0, 1), DomainSpec("TN", 1, -1)],
                slices=[SliceSpec(0, 0.1, TrafficModel(1))],
            )
        assert "capacity must be > 0" in str(e.value)
        assert "service_rate must be > 0" in str(e.value)
        assert [issue["code"] for issue in e.value.format()] == ["invalid", "invalid"]

    def test_domain_order(self):
        """domains follow the RAN -> TN -> CN -> EDGE chain"""
        with pytest.raises(ConfigurationError, match="chain order"):
            ScenarioConfig(
                domains=[DomainSpec("TN", 1, 1), DomainSpec("RAN", 1, 1)],
                slices=[SliceSpec(0, 0.1, TrafficModel(1))],
            )

    def test_defaults(self, scenario):
        """weights default to one per domain"""
        assert scenario.n_slices == 2
        assert scenario.domain_ids == ("RAN", "TN", "CN", "EDGE")
        assert scenario.weights == (1.0, 1.0, 1.0, 1.0)
        assert scenario.l_max == 10
        assert np.array_equal(scenario.full_rates, [100.0] * 4)

    def test_fingerprint(self, scenario):
        """equal scenarios share a fingerprint, any change alters it"""
        same = ScenarioConfig(**{**scenario.__dict__})
        assert same.fingerprint() == scenario.fingerprint()
        other = ScenarioConfig(**{**scenario.__dict__, "headroom": 1.5})
        assert other.fingerprint() != scenario.fingerprint()


class TestSliceEnv:
    "SliceEnv"

    ###
    # SliceEnv.reset()
    ###
    def test_reset_deterministic(self, env):
        """the same seed gives bit-identical states"""
        a, b = env.reset(7), env.reset(7)
        assert a.t == 0
        assert np.array_equal(a.rates, b.rates)
        assert np.array_equal(a.arrivals, b.arrivals)

    def test_reset_backlogs_zero(self, env):
        """initial backlogs are zero"""
        for seed in range(5):
            assert not env.reset(seed).backlogs.any()

    def test_reset_seeds_differ(self, env):
        """distinct seeds give distinct traffic"""
        assert not np.array_equal(env.reset(7).rates, env.reset(8).rates)

    def test_state_read_only(self, env):
        """states cannot be mutated in place"""
        state = env.reset(0)
        with pytest.raises(ValueError):
            state.rates[0, 0] = 1.0

    ###
    # SliceEnv.step()
    ###
    def test_step_before_reset(self, scenario):
        """step() needs a prior reset()"""
        env = SliceEnv(scenario)
        state = fixed_state(np.ones((2, 4)))
        with pytest.raises(ConfigurationError):
            env.step(state, AllocationAction(np.full((2, 4), 0.5)))

    def test_step_domain_latency(self):
        """lambda=10, full rate 20, share 1 -> 0.1 s"""
        env = SliceEnv(single_chain())
        env.reset(0)
        outcome = env.step(fixed_state([[10.0]]), AllocationAction([[1.0]]))
        assert outcome.per_domain_latency[0, 0] == pytest.approx(0.1)
        assert outcome.per_slice_latency[0] == pytest.approx(0.1)
        assert outcome.per_slice_throughput[0] == pytest.approx(10.0)

    def test_step_unstable_queue(self):
        """a share serving exactly the load gives L_MAX and no backlog growth"""
        env = SliceEnv(single_chain())
        env.reset(0)
        outcome = env.step(fixed_state([[10.0]]), AllocationAction([[0.5]]))
        assert outcome.per_slice_latency[0] == 10.0
        assert outcome.next_state.backlogs[0, 0] == 0.0

    def test_step_backlog_growth(self):
        """arrivals beyond the service rate accumulate"""
        env = SliceEnv(single_chain())
        env.reset(0)
        outcome = env.step(fixed_state([[10.0]]), AllocationAction([[0.25]]))
        assert outcome.next_state.backlogs[0, 0] == pytest.approx(5.0)
        assert outcome.per_slice_throughput[0] == pytest.approx(5.0)

    def test_step_end_to_end_latency(self):
        """four identical 0.1 s stages sum to 0.4 s"""
        env = SliceEnv(single_chain(n_domains=4))
        env.reset(0)
        outcome = env.step(fixed_state([[10.0] * 4]), AllocationAction(np.ones((1, 4))))
        stages = [1.0 / (20.0 - 10.0)] * 4
        assert outcome.per_slice_latency[0] == pytest.approx(sum(stages))

    def test_step_infeasible(self, env):
        """capacity violations are rejected, never clipped"""
        state = env.reset(0)
        shares = np.full((2, 4), 0.6)
        with pytest.raises(FeasibilityError, match="sum to"):
            env.step(state, AllocationAction(shares))
        with pytest.raises(FeasibilityError, match="within"):
            env.step(state, AllocationAction(np.full((2, 4), -0.1)))

    def test_step_wrong_shape(self, env):
        """the allocation must be [slice x domain]"""
        state = env.reset(0)
        with pytest.raises(DimensionError):
            env.step(state, AllocationAction(np.full((4, 2), 0.1)))

    def test_step_deterministic(self, scenario):
        """same seed and actions give identical trajectories"""

        def rollout():
            env = SliceEnv(scenario)
            state = env.reset(3)
            outcomes = []
            for _ in range(20):
                outcome = env.step(state, AllocationAction(np.full((2, 4), 0.3)))
                outcomes.append((outcome.reward, outcome.cost, outcome.per_slice_latency.tolist()))
                state = outcome.next_state
            return outcomes

        assert rollout() == rollout()

    def test_step_violation_flag(self, env):
        """sla_violated is exactly cost >= 0"""
        state = env.reset(0)
        for share in (0.05, 0.2, 0.45):
            outcome = env.step(state, AllocationAction(np.full((2, 4), share)))
            assert outcome.sla_violated == (outcome.cost >= 0)

    def test_observation_layout(self, env):
        """rates then backlogs, scaled by the full domain rate"""
        state = env.reset(0)
        obs = env.observation(state)
        assert obs.shape == (env.obs_dim,)
        assert np.allclose(obs[:8], state.rates.ravel() / 100.0)
        assert not obs[8:].any()


class TestRewardCost:
    "reward_fn / cost_fn"

    def test_reward_zero(self):
        """no usage, no penalty"""
        assert reward_fn(np.zeros((2, 4)), np.ones(4)) == 0.0

    def test_reward_arithmetic(self):
        """1 slice, 4 domains at 0.5 each -> -2"""
        assert reward_fn(np.full((1, 4), 0.5), np.ones(4)) == -2.0

    def test_reward_linear(self):
        """doubling every share doubles the reward"""
        shares = np.array([[0.1, 0.2, 0.3, 0.1], [0.2, 0.2, 0.1, 0.3]])
        weights = np.array([1.0, 2.0, 0.5, 1.0])
        assert reward_fn(2 * shares, weights) == pytest.approx(2 * reward_fn(shares, weights))

    def test_cost_latency_margin(self):
        """60 ms against a 50 ms bound -> 0.2"""
        spec = SliceSpec(0, 0.05, TrafficModel(1), min_throughput=1.0)
        assert cost_fn([0.06], [2.0], [spec]) == pytest.approx(0.2)

    def test_cost_boundary(self):
        """SLAs met exactly -> 0"""
        spec = SliceSpec(0, 0.05, TrafficModel(1), min_throughput=1.0)
        assert cost_fn([0.05], [1.0], [spec]) == 0.0

    def test_cost_max_aggregation(self):
        """margins -0.1 and +0.3 -> 0.3"""
        specs = [SliceSpec(0, 1.0, TrafficModel(1)), SliceSpec(1, 1.0, TrafficModel(1))]
        assert cost_fn([0.9, 1.3], [1.0, 1.0], specs) == pytest.approx(0.3)

    def test_cost_best_effort(self):
        """min_throughput 0 never divides by zero"""
        spec = SliceSpec(0, 1.0, TrafficModel(1), min_throughput=0.0)
        assert math.isfinite(cost_fn([0.5], [0.0], [spec]))

    def test_cost_dimension(self):
        """one latency and throughput per slice"""
        with pytest.raises(DimensionError):
            cost_fn([0.1, 0.2], [1.0], [SliceSpec(0, 1.0, TrafficModel(1))])

    def test_batched_margins(self, rng):
        """row maxima of the batched margins are the scalar costs"""
        specs = [SliceSpec(0, 0.4, TrafficModel(1), min_throughput=5.0), SliceSpec(1, 0.8, TrafficModel(1))]
        latency = rng.uniform(0.0, 2.0, (20, 2))
        throughput = rng.uniform(0.0, 10.0, (20, 2))
        margins = sla_margins(latency, throughput, specs)
        assert margins.shape == (20, 2)
        for row, l, t in zip(margins, latency, throughput):
            assert row.max() == cost_fn(l, t, specs)


class TestBaseline:
    "baseline_policy"

    def test_closed_form(self):
        """budget 0.2 s, lambda 10, full rate 20 -> 0.75 raised to 0.9"""
        scenario = single_chain(bound=0.2)
        action = baseline_policy(fixed_state([[10.0]]), scenario.slices, scenario.domains, 1.2)
        assert action.shares[0, 0] == pytest.approx(0.9)
        assert not action.saturated

    def test_zero_traffic(self):
        """idle slices still get headroom / (budget * full rate)"""
        scenario = single_chain(bound=0.2)
        action = baseline_policy(fixed_state([[0.0]]), scenario.slices, scenario.domains, 1.2)
        assert action.shares[0, 0] == pytest.approx(1.2 * (1 / 0.2) / 20)

    def test_saturation(self):
        """demand beyond capacity is renormalized and flagged"""
        scenario = single_chain(bound=0.2)
        action = baseline_policy(fixed_state([[30.0]]), scenario.slices, scenario.domains, 1.2)
        assert action.saturated
        assert action.feasible

    def test_baseline_safe(self, env):
        """the baseline meets the SLAs on at least 99% of slots"""
        violations, steps = 0, 0
        for seed in range(10):
            state = env.reset(seed)
            for _ in range(50):
                outcome = env.step(state, env.baseline(state))
                violations += outcome.sla_violated
                steps += 1
                state = outcome.next_state
        assert violations <= 0.01 * steps
