"""
Training-scale reproductions on the shipped experiments. Excluded from the
default run, select them with `pytest -m slow`.
"""
import numpy as np
import pytest

from sliceorch.config import load_config
from sliceorch.env import SliceEnv
from sliceorch.imitation import bc_train, collect_demonstrations, evaluate_imitation
from sliceorch.neural import GaussianPolicy
from sliceorch.oracle import oracle_usage
from sliceorch.schema import load_scenario
from sliceorch.training import agent_actor, evaluate_policy, train_safe

pytestmark = pytest.mark.slow

EVAL_SEEDS = [1000, 1001, 1002, 1003, 1004]


def first_window_violations(config, seed, window=50):
    env = SliceEnv(load_scenario(config.scenario))
    report = train_safe(env, config.safe, window, seed)
    return float(np.mean([row["violation_rate"] for row in report.rows]))


class TestToyCmdp:
    "safe learner on the single-cell scenario"

    @pytest.fixture(scope="class")
    def trained(self):
        config = load_config("experiments/toy.json")
        env = SliceEnv(load_scenario(config.scenario))
        return config, env, [train_safe(env, config.safe, config.iterations, seed) for seed in config.seeds]

    def test_close_to_oracle(self, trained):
        """usage within 10% of the grid oracle, violations at most 2%"""
        _, env, reports = trained
        oracle = oracle_usage(env, EVAL_SEEDS)
        for report in reports:
            stats = evaluate_policy(env, agent_actor(report.agents[0], env), EVAL_SEEDS)
            assert stats["mean_usage"] <= 1.1 * oracle["mean_usage"]
            assert stats["violation_rate"] <= 0.02

    def test_multiplier_follows_cost(self, trained):
        """lambda never drops after a window of positive cost, and late costs are negative"""
        config, _, reports = trained
        period = config.safe.lagrangian.update_period
        for report in reports:
            costs = [row["mean_cost"] for row in report.rows]
            lambdas = [row["lambda"] for row in report.rows]
            for i in range(period - 1, len(costs), period):
                previous = lambdas[i - period] if i >= period else config.safe.lagrangian.initial
                if np.mean(costs[i - period + 1:i + 1]) > 0:
                    assert lambdas[i] >= previous
            assert np.mean(costs[-len(costs) // 4:]) < 0


def test_gate_lowers_violations():
    """over the first 50 iterations the gate keeps violations down on at least 4 of 5 seeds"""
    on = load_config("experiments/safe.json")
    off = load_config("experiments/safe-no-gate.json")
    pairs = [(first_window_violations(on, seed), first_window_violations(off, seed)) for seed in on.seeds]
    assert sum(gated <= 0.02 and ungated >= 0.10 for gated, ungated in pairs) >= 4


def test_cloned_policy_matches_baseline():
    """10k demonstrations clone the baseline within 5% usage, loss down tenfold"""
    config = load_config("experiments/imitation.json")
    env = SliceEnv(load_scenario(config.scenario))
    im = config.imitation
    demos = collect_demonstrations(env, None, im.demo_steps, im.demo_seeds)
    assert len(demos) == 10000

    sizes = [demos.states.shape[1], *config.safe.network.hidden_sizes, demos.actions.shape[1]]
    rng = np.random.default_rng(0)
    policy, trace = bc_train(GaussianPolicy.init(sizes, rng), demos, im.epochs, im.lr, im.batch_size, rng)
    assert trace[-1] <= trace[0] / 10

    policy_usage, baseline_usage, _ = evaluate_imitation(policy, None, env, len(EVAL_SEEDS), EVAL_SEEDS)
    assert abs(policy_usage - baseline_usage) <= 0.05 * baseline_usage
