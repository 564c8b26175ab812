"""
Experiment configuration.

Every tunable affecting outputs lives in one of these models and is written
verbatim to the run manifest. Unknown keys are rejected.
"""
import os
import math
import json
import logging
from typing import List, Literal, Optional

import pydantic
from pydantic import BaseModel, Field, validator
from dotty_dict import dotty

from sliceorch.errors import ValidationError
from sliceorch.schema.parser import locate, parse_json

logger = logging.getLogger(__name__)

ALGORITHMS = ("safe", "distributed", "imitation+safe", "baseline-only")


class StrictModel(BaseModel):
    class Config:
        extra = "forbid"
        validate_assignment = True
        allow_mutation = False


class DiscountConfig(StrictModel):
    gamma: float = Field(0.99, ge=0.0, lt=1.0)
    lambda_gae: float = Field(0.95, ge=0.0, le=1.0)


class ExplorationConfig(StrictModel):
    # initial policy standard deviation
    sigma: float = Field(0.3, ge=0.0)
    # H: per-dimension bound on exploration noise
    max_deviation: float = Field(1.0, gt=0.0)
    # share every logistic output starts at; unset means 1 / (slices + 1)
    initial_share: Optional[float] = Field(None, gt=0.0, lt=1.0)


class SwitchConfig(StrictModel):
    threshold: float = 0.0
    kappa: float = Field(1.0, ge=0.0)
    enabled: bool = True


class LagrangianConfig(StrictModel):
    initial: float = Field(0.0, ge=0.0)
    eta: float = Field(0.05, ge=0.0)
    # training iterations between two multiplier updates
    update_period: int = Field(5, ge=1)
    # false keeps the multiplier at `initial` (fixed-penalty reward shaping)
    adaptive: bool = True


class NetworkConfig(StrictModel):
    hidden_sizes: List[int] = [64, 64]
    policy_lr: float = Field(3e-4, ge=0.0)
    critic_lr: float = Field(1e-3, ge=0.0)
    optimizer: Literal["adam", "sgd"] = "adam"
    ensemble_size: int = Field(5, ge=1)

    @validator("hidden_sizes")
    def positive_sizes(cls, sizes):
        if any(s < 1 for s in sizes):
            raise ValueError("hidden sizes must be >= 1")
        return sizes


class SafeConfig(StrictModel):
    rollout_length: int = Field(256, ge=1)
    epochs: int = Field(10, ge=0)
    minibatch_size: int = Field(64, ge=1)
    clip_eps: float = Field(0.2, gt=0.0)
    entropy_coef: float = Field(0.0, ge=0.0)
    critic_epochs: int = Field(5, ge=0)
    discount: DiscountConfig = DiscountConfig()
    exploration: ExplorationConfig = ExplorationConfig()
    switch: SwitchConfig = SwitchConfig()
    lagrangian: LagrangianConfig = LagrangianConfig()
    network: NetworkConfig = NetworkConfig()

    @property
    def initial_log_std(self) -> float:
        return math.log(self.exploration.sigma) if self.exploration.sigma > 0 else -5.0


class DistributedConfig(StrictModel):
    mode: Literal["domain", "slice"] = "domain"
    # evaluation windows (training iterations) between two SLA rebalances
    rebalance_period: int = Field(10, ge=1)
    rebalance_step: float = Field(0.1, gt=0.0, le=1.0)


class ImitationConfig(StrictModel):
    demo_steps: int = Field(1000, ge=1)
    demo_seeds: List[int] = list(range(10))
    epochs: int = Field(200, ge=0)
    lr: float = Field(1e-3, ge=0.0)
    batch_size: int = Field(256, ge=1)
    eval_episodes: int = Field(5, ge=1)


class ExperimentConfig(StrictModel):
    scenario: str
    algorithm: Literal["safe", "distributed", "imitation+safe", "baseline-only"] = "safe"
    seeds: List[int] = [0]
    iterations: int = Field(150, ge=0)
    show_progress: bool = False
    safe: SafeConfig = SafeConfig()
    distributed: DistributedConfig = DistributedConfig()
    imitation: ImitationConfig = ImitationConfig()

    @validator("seeds")
    def non_empty_seeds(cls, seeds):
        if not seeds:
            raise ValueError("at least one seed is required")
        return seeds

    def scenario_path(self, base_dir: str = ".") -> str:
        if os.path.isabs(self.scenario):
            return self.scenario
        return os.path.normpath(os.path.join(base_dir, self.scenario))

    def to_manifest(self) -> dict:
        return json.loads(self.json())


def build_config(document: dict, overrides: Optional[dict] = None, text: str = "") -> ExperimentConfig:
    """
    Validates a config document after applying dotted overrides
    (eg: {"safe.switch.enabled": False}).
    """
    data = dotty(json.loads(json.dumps(document)))
    for key, value in (overrides or {}).items():
        data[key] = value
    try:
        return ExperimentConfig.parse_obj(data.to_dict())
    except pydantic.ValidationError as e:
        raise ValidationError(e, locate=lambda loc: locate(text, loc) if text else None)


def load_config(path: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """
    Parses, validates and fills defaults of an experiment file.
    A relative scenario path is resolved against the directory of the file.
    """
    with open(path, "r") as f:
        text = f.read()
    document = parse_json(text, source=path)
    if not isinstance(document, dict):
        raise ValidationError(f"{path}: an experiment config must be a JSON object")
    config = build_config(document, overrides, text)
    if not os.path.isabs(config.scenario):
        resolved = config.scenario_path(os.path.dirname(os.path.abspath(path)))
        config = config.copy(update={"scenario": resolved})
    logger.info(f"loaded config {path}: algorithm={config.algorithm}, seeds={config.seeds}")
    return config


def parse_override(assignment: str):
    """'safe.clip_eps=0.1' -> ('safe.clip_eps', 0.1); values are read as JSON when possible."""
    if "=" not in assignment:
        raise ValidationError(f"override '{assignment}' must look like key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
