"""
Fully-connected networks with analytic gradients.

Parameter layout of a ParamFunction: for each layer in order, the weight matrix
W (fan_in x fan_out, row-major) followed by the bias vector b (fan_out).
Hidden layers use tanh, the output layer is linear.
"""
import math
import struct
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from sliceorch.config import ExplorationConfig
from sliceorch.env import AllocationAction
from sliceorch.errors import CheckpointError, ConfigurationError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"SLCKPT"
CHECKPOINT_VERSION = 1


def n_params(layer_sizes: Sequence[int]) -> int:
    return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass
class ParamFunction:
    layer_sizes: Tuple[int, ...]
    params: np.ndarray

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise DimensionError("a ParamFunction needs at least an input and an output size")
        self.params = np.asarray(self.params, dtype=np.float64)
        expected = n_params(self.layer_sizes)
        if self.params.shape != (expected,):
            raise DimensionError(
                f"layer sizes {self.layer_sizes} need {expected} parameters, got {self.params.shape}"
            )

    @classmethod
    def init(
        cls, layer_sizes: Sequence[int], rng: np.random.Generator, output_scale: float = 1.0, output_bias: float = 0.0
    ):
        """Weights uniform in +-sqrt(6 / (fan_in + fan_out)), hidden biases zero."""
        chunks = []
        sizes = list(layer_sizes)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if i == len(sizes) - 2:
                w = w * output_scale
                b = b + output_bias
            chunks.extend([w.ravel(), b])
        return cls(tuple(sizes), np.concatenate(chunks))

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def layers(self):
        """(W, b) views into params, in layer order."""
        views, offset = [], 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = self.params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.params[offset:offset + fan_out]
            offset += fan_out
            views.append((w, b))
        return views

    def with_params(self, params: np.ndarray) -> "ParamFunction":
        return ParamFunction(self.layer_sizes, np.array(params, dtype=np.float64))

    def __call__(self, x):
        return forward(self, x)


def _as_batch(f: ParamFunction, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != f.n_inputs:
        raise DimensionError(f"expected input of size {f.n_inputs}, got shape {x.shape}")
    return batch, single


def _activations(f: ParamFunction, batch: np.ndarray):
    acts = [batch]
    h = batch
    layers = f.layers()
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        acts.append(h)
    return acts


def forward(f: ParamFunction, x) -> np.ndarray:
    batch, single = _as_batch(f, x)
    out = _activations(f, batch)[-1]
    return out[0] if single else out


def backward(f: ParamFunction, x, upstream_grad) -> np.ndarray:
    """
    Gradient over the flat parameters of sum(upstream_grad * forward(f, x)),
    summed over the batch when x is 2-D.
    """
    batch, single = _as_batch(f, x)
    delta = np.asarray(upstream_grad, dtype=np.float64)
    delta = delta[None, :] if delta.ndim == 1 else delta
    if delta.shape != (batch.shape[0], f.n_outputs):
        raise DimensionError(
            f"upstream gradient of shape {np.shape(upstream_grad)} does not match output "
            f"({batch.shape[0]}, {f.n_outputs})"
        )
    acts = _activations(f, batch)
    layers = f.layers()
    grads = [None] * len(layers)
    for i in reversed(range(len(layers))):
        w, _ = layers[i]
        grads[i] = ((acts[i].T @ delta).ravel(), delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w.T) * (1.0 - acts[i] ** 2)
    return np.concatenate([part for pair in grads for part in pair])


@dataclass
class GaussianPolicy:
    mean_net: ParamFunction
    log_std: np.ndarray

    def __post_init__(self):
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.log_std.shape != (self.mean_net.n_outputs,):
            raise DimensionError("log_std needs one entry per action dimension")

    @classmethod
    def init(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator,
        log_std: float = math.log(0.3),
        initial_share: float = 0.5,
    ):
        """Near-constant mean whose logistic outputs start close to initial_share."""
        if not 0.0 < initial_share < 1.0:
            raise ConfigurationError(f"initial share must lie in (0, 1), got {initial_share}")
        mean_net = ParamFunction.init(layer_sizes, rng, output_scale=0.01, output_bias=float(logit(initial_share)))
        return cls(mean_net, np.full(layer_sizes[-1], float(log_std)))

    @property
    def n_actions(self) -> int:
        return self.mean_net.n_outputs

    @property
    def clamped_log_std(self) -> np.ndarray:
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.clamped_log_std)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.mean_net.params, self.log_std])

    def with_params(self, params: np.ndarray) -> "GaussianPolicy":
        n = self.mean_net.params.size
        return GaussianPolicy(self.mean_net.with_params(params[:n]), np.array(params[n:]))

    def mean(self, state_vec) -> np.ndarray:
        return forward(self.mean_net, state_vec)

    def log_prob(self, state_vec, raw_action) -> np.ndarray:
        return gaussian_log_prob(raw_action, self.mean(state_vec), self.clamped_log_std)


def gaussian_log_prob(raw, mean, log_std) -> np.ndarray:
    """Diagonal Gaussian log-density, summed over the last axis."""
    raw = np.asarray(raw, dtype=np.float64)
    z = (raw - mean) / np.exp(log_std)
    return np.sum(-0.5 * z ** 2 - log_std - HALF_LOG_2PI, axis=-1)


def sample_action(policy: GaussianPolicy, state_vec, rng: np.random.Generator):
    """raw = mean + std * z with z ~ N(0, I); returns (raw, logp)."""
    mean = policy.mean(state_vec)
    z = rng.standard_normal(mean.shape)
    raw = mean + policy.std * z
    return raw, float(gaussian_log_prob(raw, mean, policy.clamped_log_std))


def clip_exploration(base_action, noise, config: ExplorationConfig) -> np.ndarray:
    """base + clip(noise, -H, H), elementwise."""
    base = np.asarray(base_action, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if base.shape != noise.shape:
        raise DimensionError(f"exploration noise {noise.shape} does not match action {base.shape}")
    h = config.max_deviation
    return base + np.clip(noise, -h, h)


def logistic(x) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def project_shares(raw_action, shape: Tuple[int, int]) -> np.ndarray:
    """
    Squash raw outputs into [0, 1] with the logistic map, then rescale every
    domain column whose shares sum above 1. Accepts a leading batch axis:
    (..., K*D) -> (..., K, D).
    """
    raw = np.asarray(raw_action, dtype=np.float64)
    size = shape[0] * shape[1]
    if raw.shape[-1:] != (size,):
        raise DimensionError(f"raw action of size {raw.shape[-1:]} cannot fill a {shape} allocation")
    shares = logistic(raw).reshape(raw.shape[:-1] + tuple(shape))
    sums = shares.sum(axis=-2, keepdims=True)
    return shares / np.maximum(sums, 1.0)


def project_action(raw_action, shape: Tuple[int, int]) -> AllocationAction:
    """Feasible allocation from one raw policy output."""
    raw = np.asarray(raw_action, dtype=np.float64)
    if raw.size != shape[0] * shape[1]:
        raise DimensionError(f"raw action of size {raw.size} cannot fill a {shape} allocation")
    return AllocationAction(project_shares(raw.ravel(), shape))


def project_backward(raw_action, shape: Tuple[int, int], upstream) -> np.ndarray:
    """
    Vector-Jacobian product of project_shares with respect to the raw action.
    Batched inputs (..., K*D) give batched gradients of the same shape.
    """
    raw = np.asarray(raw_action, dtype=np.float64)
    batch_shape = raw.shape[:-1]
    squashed = logistic(raw).reshape(batch_shape + tuple(shape))
    g = np.asarray(upstream, dtype=np.float64).reshape(squashed.shape)
    sums = squashed.sum(axis=-2, keepdims=True)
    over = sums > 1.0
    scale = np.maximum(sums, 1.0)
    p = squashed / scale
    # over-full columns: d(x_i / S) = (g_i - sum_j g_j p_j) / S
    g_squashed = np.where(over, (g - np.sum(g * p, axis=-2, keepdims=True)) / scale, g)
    return (g_squashed * squashed * (1.0 - squashed)).reshape(raw.shape)


@dataclass
class OptimizerState:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise DimensionError(f"unknown optimizer {self.kind}")


def grad_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState, lr: float) -> np.ndarray:
    """
    Descent step. Returns the new parameters and advances `state`.
    Non-finite gradients are rejected before the state is touched.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise DimensionError(f"gradient shape {grads.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("non-finite gradient, update rejected")

    if state.kind == "sgd":
        state.t += 1
        return params - lr * grads

    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def save_checkpoint(path: str, f: ParamFunction, extra: Optional[np.ndarray] = None):
    """
    Binary layout, little-endian:
      magic "SLCKPT" | uint16 version | uint32 n_layers | uint32 sizes[n_layers]
      | uint32 n_extra | float64 params[...] | float64 extra[n_extra]
    """
    extra = np.zeros(0) if extra is None else np.asarray(extra, dtype=np.float64)
    with open(path, "wb") as out:
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<HI", CHECKPOINT_VERSION, len(f.layer_sizes)))
        out.write(np.asarray(f.layer_sizes, dtype="<u4").tobytes())
        out.write(struct.pack("<I", extra.size))
        out.write(f.params.astype("<f8").tobytes())
        out.write(extra.astype("<f8").tobytes())
    logger.info(f"checkpoint written to {path} ({f.params.size + extra.size} parameters)")


def load_checkpoint(path: str, expected_sizes: Optional[Sequence[int]] = None):
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a sliceorch checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    try:
        version, n_layers = struct.unpack_from("<HI", blob, offset)
        offset += 6
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        sizes = tuple(int(s) for s in np.frombuffer(blob, dtype="<u4", count=n_layers, offset=offset))
        offset += 4 * n_layers
        (n_extra,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        count = n_params(sizes)
        params = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset += 8 * count
        extra = np.frombuffer(blob, dtype="<f8", count=n_extra, offset=offset).astype(np.float64)
        offset += 8 * n_extra
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path} is truncated: {e}")
    if offset != len(blob):
        raise CheckpointError(f"{path} has {len(blob) - offset} trailing bytes")
    if expected_sizes is not None and tuple(expected_sizes) != sizes:
        raise CheckpointError(f"{path} holds layer sizes {sizes}, expected {tuple(expected_sizes)}")
    return ParamFunction(sizes, params), extra


def save_policy(path: str, policy: GaussianPolicy):
    save_checkpoint(path, policy.mean_net, extra=policy.log_std)


def load_policy(path: str, expected_sizes: Optional[Sequence[int]] = None) -> GaussianPolicy:
    mean_net, log_std = load_checkpoint(path, expected_sizes)
    if log_std.size != mean_net.n_outputs:
        raise CheckpointError(f"{path} does not hold a policy (log_std of size {log_std.size})")
    return GaussianPolicy(mean_net, log_std)
