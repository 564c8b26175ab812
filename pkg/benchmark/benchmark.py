import statistics
from timeit import default_timer as timer

import numpy as np
from tqdm import tqdm

from sliceorch.env import SliceEnv
from sliceorch.managers import Orchestrator
from sliceorch.neural import GaussianPolicy, backward, forward, project_action
from sliceorch.schema import load_scenario

N_STEPS = 5000
N_PASSES = 2000
BATCH_SIZE = 64


def report(name, values):
    print(f"{name} per second (on average): {1/statistics.mean(values):.2f}")
    print(f"average: {statistics.mean(values)*1000:.4f} milliseconds")
    print(f"median: {statistics.median(values)*1000:.4f} milliseconds")
    print(f"min: {min(values)*1000:.4f} milliseconds")
    print(f"max: {max(values)*1000:.4f} milliseconds")


scenario = load_scenario("scenarios/two-slices.json")
env = SliceEnv(scenario)
orchestrator = Orchestrator(env)
episode = 0
state = orchestrator.reset(episode)

step_stats = []
for _ in tqdm(range(N_STEPS), desc="Running simulator benchmark"):
    action = env.baseline(state)
    start = timer()
    outcome = orchestrator.execute(state, action)
    end = timer()
    step_stats.append(end - start)
    if outcome.next_state.t >= scenario.episode_length:
        episode += 1
        state = orchestrator.reset(episode)
    else:
        state = outcome.next_state
report("steps", step_stats)

rng = np.random.default_rng(0)
obs_dim = 3 * scenario.n_slices * scenario.n_domains
policy = GaussianPolicy.init([obs_dim, 64, 64, scenario.n_slices * scenario.n_domains], rng)
batch = rng.standard_normal((BATCH_SIZE, obs_dim))

forward_stats, backward_stats = [], []
for _ in tqdm(range(N_PASSES), desc="Running network benchmark"):
    start = timer()
    out = forward(policy.mean_net, batch)
    middle = timer()
    backward(policy.mean_net, batch, np.ones_like(out))
    end = timer()
    forward_stats.append(middle - start)
    backward_stats.append(end - middle)
report(f"forward passes (batch {BATCH_SIZE})", forward_stats)
report(f"backward passes (batch {BATCH_SIZE})", backward_stats)

project_stats = []
for row in tqdm(batch, desc="Running projection benchmark"):
    start = timer()
    project_action(row[: policy.n_actions], env.action_shape)
    end = timer()
    project_stats.append(end - start)
report("projections", project_stats)
