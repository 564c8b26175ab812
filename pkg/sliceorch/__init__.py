__version__ = "0.1.0"

# Domain chain traversed by every slice, in order.
DOMAINS = ("RAN", "TN", "CN", "EDGE")


from .env import (  # noqa
    DomainSpec,
    TrafficModel,
    SliceSpec,
    ScenarioConfig,
    NetworkState,
    AllocationAction,
    StepOutcome,
    SliceEnv,
    reward_fn,
    cost_fn,
    baseline_policy,
)
from .errors import (  # noqa
    SliceOrchError,
    ConfigurationError,
    ValidationError,
    FeasibilityError,
    DimensionError,
    NonFiniteError,
    CheckpointError,
    SchemaMismatchError,
    UpdateRejectedError,
    TrainingError,
)
