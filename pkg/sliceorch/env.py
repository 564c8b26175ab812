"""
Discrete-time simulator of an end-to-end sliced network.

Every slice traverses the domain chain RAN -> TN -> CN -> EDGE (or the subset
declared by the scenario). Each (slice, domain) pair is an M/M/1 server whose
service rate is service_rate * capacity * share. Observation vectors are laid
out slice-major, domain-minor: all rates first, then all backlogs.
"""
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from sliceorch import DOMAINS
from sliceorch.errors import ConfigurationError, DimensionError, FeasibilityError

logger = logging.getLogger(__name__)

# Tolerance on per-domain share sums; projections rescale by 1/sum and may land one ulp above 1.
FEASIBILITY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class DomainSpec:
    id: str
    capacity: float
    service_rate: float

    @property
    def full_rate(self) -> float:
        """Jobs/sec served when the whole domain is allocated to one slice."""
        return self.capacity * self.service_rate


@dataclass(frozen=True)
class TrafficModel:
    base_rate: float
    amplitude: float = 0.0
    period: float = 24.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class SliceSpec:
    id: int
    latency_bound: float
    traffic: TrafficModel
    min_throughput: float = 0.0
    name: str = ""


@dataclass(frozen=True)
class ScenarioConfig:
    domains: Tuple[DomainSpec, ...]
    slices: Tuple[SliceSpec, ...]
    l_max: float = 10.0
    headroom: float = 1.2
    weights: Optional[Tuple[float, ...]] = None
    slot_duration: float = 1.0
    episode_length: int = 50
    throughput_epsilon: float = 1e-6
    decomposition_weights: Optional[Tuple[float, ...]] = None
    agents: Tuple[dict, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "slices", tuple(self.slices))
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.weights is None:
            object.__setattr__(self, "weights", tuple(1.0 for _ in self.domains))
        if self.decomposition_weights is None:
            object.__setattr__(self, "decomposition_weights", tuple(1.0 for _ in self.domains))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(
            self, "decomposition_weights", tuple(float(w) for w in self.decomposition_weights)
        )
        self.validate()

    def validate(self):
        errors = []
        if len(self.slices) == 0:
            errors.append("scenario must declare at least one slice")
        if len(self.domains) == 0:
            errors.append("scenario must declare at least one domain")
        ids = [d.id for d in self.domains]
        if len(set(ids)) != len(ids):
            errors.append(f"duplicate domain ids: {ids}")
        elif ids != [d for d in DOMAINS if d in ids]:
            errors.append(f"domains must follow the chain order {list(DOMAINS)}, got {ids}")
        for d in self.domains:
            if d.id not in DOMAINS:
                errors.append(f"unknown domain {d.id}")
            if not d.capacity > 0:
                errors.append(f"domain {d.id}: capacity must be > 0, got {d.capacity}")
            if not d.service_rate > 0:
                errors.append(f"domain {d.id}: service_rate must be > 0, got {d.service_rate}")
        slice_ids = [s.id for s in self.slices]
        if slice_ids != list(range(len(self.slices))):
            errors.append(f"slice ids must be 0..K-1 in order, got {slice_ids}")
        for s in self.slices:
            if not s.latency_bound > 0:
                errors.append(f"slice {s.id}: latency_bound must be > 0")
            if s.min_throughput < 0:
                errors.append(f"slice {s.id}: min_throughput must be >= 0")
            if s.traffic.period <= 0:
                errors.append(f"slice {s.id}: traffic period must be > 0")
        if len(self.weights) != len(self.domains) or min(self.weights, default=1) <= 0:
            errors.append("weights must hold one positive entry per domain")
        if len(self.decomposition_weights) != len(self.domains) or min(
            self.decomposition_weights, default=1
        ) <= 0:
            errors.append("decomposition_weights must hold one positive entry per domain")
        if not self.headroom > 1:
            errors.append(f"headroom must be > 1, got {self.headroom}")
        if not self.l_max > 0:
            errors.append("l_max must be > 0")
        if errors:
            raise ConfigurationError(errors)

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def domain_ids(self) -> Tuple[str, ...]:
        return tuple(d.id for d in self.domains)

    @property
    def full_rates(self) -> np.ndarray:
        return np.array([d.full_rate for d in self.domains], dtype=np.float64)

    @property
    def weight_vector(self) -> np.ndarray:
        return np.array(self.weights, dtype=np.float64)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["agents"] = [dict(a) for a in self.agents]
        doc["weights"] = list(self.weights)
        doc["decomposition_weights"] = list(self.decomposition_weights)
        return doc

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def sample_arrivals(self, t: int, rng: np.random.Generator) -> np.ndarray:
        """
        Fresh arrival rate of every slice at timeslot t:
        base + amplitude * sin(2 pi t / period) + noise, clamped to >= 0.
        One standard normal is drawn per slice per slot, whatever its noise_std.
        """
        z = rng.standard_normal(self.n_slices)
        rates = np.array(
            [
                s.traffic.base_rate
                + s.traffic.amplitude * math.sin(2.0 * math.pi * t / s.traffic.period)
                + s.traffic.noise_std * z[k]
                for k, s in enumerate(self.slices)
            ],
            dtype=np.float64,
        )
        return np.maximum(rates, 0.0)


@dataclass(frozen=True)
class NetworkState:
    t: int
    # effective arrival rates (fresh arrivals + carried backlog), [slice x domain]
    rates: np.ndarray
    backlogs: np.ndarray
    # fresh per-slice arrival rates of this slot
    arrivals: np.ndarray

    def __post_init__(self):
        for name in ("rates", "backlogs", "arrivals"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rates.ravel(), self.backlogs.ravel()])


@dataclass(frozen=True)
class AllocationAction:
    shares: np.ndarray
    # set by the baseline when aggregate demand exceeded a domain's capacity
    saturated: bool = False

    def __post_init__(self):
        arr = np.array(self.shares, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"allocation must be a [slice x domain] matrix, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "shares", arr)

    def violations(self) -> list:
        errors = []
        if not np.all(np.isfinite(self.shares)):
            errors.append("allocation contains non-finite shares")
            return errors
        if np.any(self.shares < 0) or np.any(self.shares > 1):
            errors.append("every share must lie within [0, 1]")
        sums = self.shares.sum(axis=0)
        for m, total in enumerate(sums):
            if total > 1 + FEASIBILITY_TOLERANCE:
                errors.append(f"domain {m}: shares sum to {total:.6f} > 1")
        return errors

    @property
    def feasible(self) -> bool:
        return not self.violations()

    def flat(self) -> np.ndarray:
        return self.shares.ravel().copy()


@dataclass(frozen=True)
class StepOutcome:
    next_state: NetworkState
    reward: float
    cost: float
    per_slice_latency: np.ndarray
    per_slice_throughput: np.ndarray
    sla_violated: bool
    per_domain_latency: np.ndarray = field(default=None)
    per_domain_throughput: np.ndarray = field(default=None)


def _shares(action: Union[AllocationAction, np.ndarray]) -> np.ndarray:
    if isinstance(action, AllocationAction):
        return action.shares
    return np.asarray(action, dtype=np.float64)


def reward_fn(action: Union[AllocationAction, np.ndarray], weights: Sequence[float]) -> float:
    """r = -sum_m weights[m] * sum_k a[k, m]."""
    shares = _shares(action)
    weights = np.asarray(weights, dtype=np.float64)
    return -float(np.dot(weights, shares.sum(axis=0)))


def sla_margins(latencies, throughputs, specs: Sequence[SliceSpec], eps_tp: float = 1e-6) -> np.ndarray:
    """
    Per-slice normalized SLA margin, the worse of (l - L) / L and
    (tp_min - tp) / max(tp_min, eps). The last axis indexes slices; leading axes broadcast.
    """
    latencies = np.asarray(latencies, dtype=np.float64)
    throughputs = np.asarray(throughputs, dtype=np.float64)
    bounds = np.array([s.latency_bound for s in specs], dtype=np.float64)
    floors = np.array([s.min_throughput for s in specs], dtype=np.float64)
    latency_margin = (latencies - bounds) / bounds
    throughput_margin = (floors - throughputs) / np.maximum(floors, eps_tp)
    return np.maximum(latency_margin, throughput_margin)


def cost_fn(
    latencies: Sequence[float],
    throughputs: Sequence[float],
    specs: Sequence[SliceSpec],
    eps_tp: float = 1e-6,
) -> float:
    """
    Worst normalized SLA margin over slices and SLA dimensions.
    c <= 0 iff every latency bound and throughput floor is met.
    """
    latencies = np.asarray(latencies, dtype=np.float64)
    throughputs = np.asarray(throughputs, dtype=np.float64)
    if latencies.shape != (len(specs),) or throughputs.shape != (len(specs),):
        raise DimensionError(
            f"expected one latency and throughput per slice ({len(specs)}), "
            f"got {latencies.shape} and {throughputs.shape}"
        )
    return float(np.max(sla_margins(latencies, throughputs, specs, eps_tp)))


def domain_latency(rates: np.ndarray, service: np.ndarray, l_max: float) -> np.ndarray:
    """M/M/1 sojourn time 1/(mu - lambda), L_MAX when the queue is unstable or slower than L_MAX."""
    slack = service - rates
    with np.errstate(divide="ignore"):
        latency = np.where(slack > 0, 1.0 / np.where(slack > 0, slack, 1.0), l_max)
    return np.minimum(latency, l_max)


def baseline_policy(
    state: NetworkState,
    specs: Sequence[SliceSpec],
    domains: Sequence[DomainSpec],
    headroom: float,
) -> AllocationAction:
    """
    Rule-based over-provisioning. Each slice gets, in every domain, the share whose
    M/M/1 latency equals bound/|chain|, inflated by `headroom`. Domains whose demand
    exceeds capacity are renormalized to 1 and the action is flagged as saturated.
    """
    full = np.array([d.full_rate for d in domains], dtype=np.float64)
    budgets = np.array([s.latency_bound for s in specs], dtype=np.float64) / len(domains)
    shares = headroom * (1.0 / budgets[:, None] + state.rates) / full[None, :]

    saturated = bool(np.any(shares > 1.0))
    shares = np.minimum(shares, 1.0)
    sums = shares.sum(axis=0)
    over = sums > 1.0
    if np.any(over):
        saturated = True
        shares[:, over] = shares[:, over] / sums[over]
    if saturated:
        logger.warning(f"baseline saturated at t={state.t}: aggregate demand exceeds capacity")
    return AllocationAction(shares, saturated=saturated)


class SliceEnv:
    """
    Single-threaded simulator instance. Two instances never share mutable state;
    an instance may move between threads between calls to step().
    """

    def __init__(self, scenario: ScenarioConfig):
        self.scenario = scenario
        self._rng: Optional[np.random.Generator] = None
        self._full = scenario.full_rates
        self._bounds = np.array([s.latency_bound for s in scenario.slices], dtype=np.float64)

    @property
    def obs_dim(self) -> int:
        return 2 * self.scenario.n_slices * self.scenario.n_domains

    @property
    def action_shape(self) -> Tuple[int, int]:
        return (self.scenario.n_slices, self.scenario.n_domains)

    def reset(self, seed: int) -> NetworkState:
        self._rng = np.random.default_rng(seed)
        arrivals = self.scenario.sample_arrivals(0, self._rng)
        rates = self._effective_rates(arrivals, np.zeros(self.action_shape))
        return NetworkState(t=0, rates=rates, backlogs=np.zeros(self.action_shape), arrivals=arrivals)

    def _effective_rates(self, arrivals: np.ndarray, backlogs: np.ndarray) -> np.ndarray:
        carried = arrivals[:, None] + backlogs / self.scenario.slot_duration
        return np.minimum(carried, self._full[None, :])

    def step(self, state: NetworkState, action: AllocationAction) -> StepOutcome:
        if self._rng is None:
            raise ConfigurationError("step() called before reset()")
        shares = _shares(action)
        if shares.shape != self.action_shape:
            raise DimensionError(f"expected allocation of shape {self.action_shape}, got {shares.shape}")
        problems = AllocationAction(shares).violations()
        if problems:
            raise FeasibilityError(f"infeasible allocation at t={state.t}: {'; '.join(problems)}")

        dt = self.scenario.slot_duration
        service = shares * self._full[None, :]
        latency = domain_latency(state.rates, service, self.scenario.l_max)
        served = np.minimum(state.rates, service)

        e2e_latency = latency.sum(axis=1)
        throughput = served.min(axis=1)
        backlogs = np.maximum(0.0, state.backlogs + (state.arrivals[:, None] - served) * dt)

        arrivals = self.scenario.sample_arrivals(state.t + 1, self._rng)
        next_state = NetworkState(
            t=state.t + 1,
            rates=self._effective_rates(arrivals, backlogs),
            backlogs=backlogs,
            arrivals=arrivals,
        )
        reward = reward_fn(shares, self.scenario.weights)
        cost = cost_fn(e2e_latency, throughput, self.scenario.slices, self.scenario.throughput_epsilon)
        return StepOutcome(
            next_state=next_state,
            reward=reward,
            cost=cost,
            per_slice_latency=e2e_latency,
            per_slice_throughput=throughput,
            sla_violated=cost >= 0,
            per_domain_latency=latency,
            per_domain_throughput=served,
        )

    def observation(self, state: NetworkState) -> np.ndarray:
        """Rates then backlogs, each scaled by the domain's full service rate."""
        scale = self._full[None, :]
        return np.concatenate(
            [(state.rates / scale).ravel(), (state.backlogs / (scale * self.scenario.slot_duration)).ravel()]
        )

    def baseline(self, state: NetworkState) -> AllocationAction:
        return baseline_policy(state, self.scenario.slices, self.scenario.domains, self.scenario.headroom)
