import json
from typing import Optional
import pytest

import numpy as np

from sliceorch.config import SafeConfig, build_config
from sliceorch.env import SliceEnv
from sliceorch.schema import load_scenario

TWO_SLICES = "test/fixtures/scenario-two-slices.json"
TOY = "test/fixtures/scenario-toy.json"
THREE_AGENTS = "test/fixtures/scenario-three-agents.json"


@pytest.fixture(scope="session")
def scenario():
    return load_scenario(TWO_SLICES)


@pytest.fixture(scope="session")
def toy_scenario():
    return load_scenario(TOY)


@pytest.fixture(scope="session")
def three_agent_scenario():
    return load_scenario(THREE_AGENTS)


@pytest.fixture(scope="function")
def env(scenario):
    return SliceEnv(scenario)


@pytest.fixture(scope="function")
def toy_env(toy_scenario):
    return SliceEnv(toy_scenario)


@pytest.fixture(scope="function")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_safe_config():
    return SafeConfig.parse_obj(
        {
            "rollout_length": 32,
            "epochs": 2,
            "minibatch_size": 16,
            "critic_epochs": 1,
            "network": {"hidden_sizes": [8, 8], "ensemble_size": 3},
        }
    )


@pytest.fixture(scope="function")
def experiment_file(tmp_path):
    """Writes an experiment document next to a copy of the two-slice scenario."""

    def write(document: dict) -> str:
        with open(TWO_SLICES) as f:
            (tmp_path / "scenario.json").write_text(f.read())
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps({"scenario": "scenario.json", **document}, indent=2))
        return str(path)

    return write


@pytest.fixture(scope="function")
def small_experiment():
    def build(algorithm: str, overrides: Optional[dict] = None):
        document = {
            "scenario": TWO_SLICES,
            "algorithm": algorithm,
            "seeds": [0],
            "iterations": 2,
            "safe": {
                "rollout_length": 16,
                "epochs": 1,
                "minibatch_size": 8,
                "critic_epochs": 1,
                "network": {"hidden_sizes": [8], "ensemble_size": 2},
            },
            "imitation": {"demo_steps": 20, "demo_seeds": [0, 1], "epochs": 3, "batch_size": 16, "eval_episodes": 1},
        }
        return build_config(document, overrides)

    return build
