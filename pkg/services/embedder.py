"""Attribute embedder P = V . S . H with manual forward/backward passes and optimizers.

Body layers compute X @ W + b (weights stored fan-in x fan-out), with ReLU
between hidden layers and identity at the body output. S is class-wise
standardization over the K class rows (or dynamic normalization, or nothing),
and V is a bias-free d_h x d_z projection.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from config import ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON
from errors import ConfigurationError, DimensionError, InsufficientDataError, StateError
from models import EmbedderSpec, LayerSpec
from services.core_math import Rng, as_matrix, constant_columns
from services.norm_toolkit import _dynamic_normalizer, sample_init

logger = logging.getLogger(__name__)

OUTPUT = "output"


def _weight(i: int) -> str:
    return f"body.{i}.weight"


def _bias(i: int) -> str:
    return f"body.{i}.bias"


class GradientTape:
    """Gradients keyed by parameter name, mirroring the embedder's parameters."""

    def __init__(self, grads: Dict[str, np.ndarray]):
        self.grads = grads

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.grads)

    def items(self):
        return self.grads.items()

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def clip_(self, max_norm: float) -> float:
        """Rescale in place so the global L2 norm is at most max_norm; returns the norm before clipping."""
        norm = self.global_norm()
        if max_norm > 0 and norm > max_norm:
            factor = max_norm / norm
            for g in self.grads.values():
                g *= factor
        return norm

    def check_against(self, params: Dict[str, np.ndarray]) -> None:
        if set(params) != set(self.grads):
            raise DimensionError(f"Gradient names {sorted(self.grads)} do not match parameters {sorted(params)}")
        for name, value in params.items():
            if self.grads[name].shape != value.shape:
                raise DimensionError(f"Gradient of '{name}' has shape {self.grads[name].shape}, expected {value.shape}")

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "GradientTape":
        return cls({name: np.zeros_like(value) for name, value in params.items()})


@dataclass
class ForwardCache:
    owner: int
    generation: int
    mode: str
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    hidden: np.ndarray
    normalized: np.ndarray
    inv_std: Optional[np.ndarray] = None
    divisor: Optional[float] = None


class Embedder:
    """The attribute embedder with running class statistics."""

    def __init__(self, spec: EmbedderSpec, params: Dict[str, np.ndarray]):
        self.spec = spec
        self.layers: List[LayerSpec] = spec.layer_specs()
        self.params = params
        d_h = spec.body_out_dim
        self.running_mean = np.zeros(d_h)
        self.running_var = np.ones(d_h)
        self.mode = "train"
        self._generation = 0
        self._check_shapes()

    @classmethod
    def initialize(cls, spec: EmbedderSpec, rng: Rng) -> "Embedder":
        params: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(spec.layer_specs()):
            params[_weight(i)] = sample_init(layer.init, layer.in_dim, layer.out_dim, rng)
            params[_bias(i)] = np.zeros(layer.out_dim)
        scheme = spec.output_scheme()
        d_extra = spec.body_out_dim if scheme.kind == "cn_output" else spec.attr_dim
        params[OUTPUT] = sample_init(scheme, spec.body_out_dim, spec.feat_dim, rng, d_extra=d_extra)
        logger.debug(f"Initialized embedder with {sum(p.size for p in params.values())} parameters")
        return cls(spec, params)

    def _check_shapes(self) -> None:
        expected = {OUTPUT: (self.spec.body_out_dim, self.spec.feat_dim)}
        for i, layer in enumerate(self.layers):
            expected[_weight(i)] = (layer.in_dim, layer.out_dim)
            expected[_bias(i)] = (layer.out_dim,)
        if set(expected) != set(self.params):
            raise DimensionError(f"Parameters {sorted(self.params)} do not match architecture {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"Parameter '{name}' has shape {self.params[name].shape}, expected {shape}")

    @property
    def class_norm_enabled(self) -> bool:
        return self.spec.class_norm

    @property
    def hidden_dim(self) -> int:
        return self.spec.body_out_dim

    @property
    def output_matrix(self) -> np.ndarray:
        return self.params[OUTPUT]

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def train(self) -> "Embedder":
        self.mode = "train"
        return self

    def eval(self) -> "Embedder":
        self.mode = "eval"
        return self

    def mark_updated(self) -> None:
        """Invalidate caches produced before a parameter change."""
        self._generation += 1

    def apply_update(self, optimizer, tape: GradientTape) -> None:
        optimizer.apply(self.params, tape)
        self.mark_updated()

    def forward(self, A: np.ndarray, update_running: bool = True) -> Tuple[np.ndarray, ForwardCache]:
        """Embed the K x d_a attribute matrix into K x d_z prototypes."""
        A = as_matrix(A, "attributes")
        if A.shape[1] != self.spec.attr_dim:
            raise DimensionError(f"Attributes have {A.shape[1]} columns, embedder expects {self.spec.attr_dim}")
        inputs, pre_activations = [], []
        X = A
        for i, layer in enumerate(self.layers):
            inputs.append(X)
            Z = X @ self.params[_weight(i)] + self.params[_bias(i)]
            pre_activations.append(Z)
            X = np.maximum(Z, 0.0) if layer.activation == "relu" else Z
        H = X

        inv_std, divisor = None, None
        if self.spec.class_norm:
            S, inv_std = _standardize(H, self, update_running)
        elif self.spec.dynamic_norm:
            S, divisor = _dynamic_normalizer(H, self.spec.dynamic_norm_sqrt)
        else:
            S = H
        W = S @ self.params[OUTPUT]
        cache = ForwardCache(
            owner=id(self),
            generation=self._generation,
            mode=self.mode,
            inputs=inputs,
            pre_activations=pre_activations,
            hidden=H,
            normalized=S,
            inv_std=inv_std,
            divisor=divisor,
        )
        return W, cache

    def backward(self, cache: Optional[ForwardCache], dW: np.ndarray) -> GradientTape:
        """Exact parameter gradients for the upstream gradient dW (K x d_z)."""
        if cache is None:
            raise StateError("backward called without a forward cache")
        if cache.owner != id(self) or cache.generation != self._generation:
            raise StateError("Forward cache is stale: parameters changed since the forward pass")
        dW = as_matrix(dW, "upstream gradient")
        if dW.shape != (cache.normalized.shape[0], self.spec.feat_dim):
            raise DimensionError(f"Upstream gradient has shape {dW.shape}, expected {(cache.normalized.shape[0], self.spec.feat_dim)}")

        grads: Dict[str, np.ndarray] = {}
        S = cache.normalized
        grads[OUTPUT] = S.T @ dW
        dS = dW @ self.params[OUTPUT].T

        if self.spec.class_norm:
            if cache.mode == "train":
                K = S.shape[0]
                dH = cache.inv_std / K * (K * dS - dS.sum(axis=0) - S * np.sum(dS * S, axis=0))
            else:
                dH = dS * cache.inv_std
        elif self.spec.dynamic_norm:
            H, K, r = cache.hidden, S.shape[0], cache.divisor
            inner = float(np.sum(dS * H))
            if self.spec.dynamic_norm_sqrt:
                dH = dS / r - H * inner / (K * r ** 3)
            else:
                dH = dS / r - 2.0 * H * inner / (K * r ** 2)
        else:
            dH = dS

        dX = dH
        for i in reversed(range(len(self.layers))):
            dZ = dX * (cache.pre_activations[i] > 0) if self.layers[i].activation == "relu" else dX
            grads[_weight(i)] = cache.inputs[i].T @ dZ
            grads[_bias(i)] = dZ.sum(axis=0)
            dX = dZ @ self.params[_weight(i)].T
        return GradientTape(grads)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: value.copy() for name, value in self.params.items()}
        state["running_mean"] = self.running_mean.copy()
        state["running_var"] = self.running_var.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in state.items() if k not in ("running_mean", "running_var")}
        previous = self.params
        self.params = params
        try:
            self._check_shapes()
        except DimensionError:
            self.params = previous
            raise
        for name in ("running_mean", "running_var"):
            if name in state:
                value = np.asarray(state[name], dtype=np.float64)
                if value.shape != (self.hidden_dim,):
                    raise DimensionError(f"'{name}' has shape {value.shape}, expected {(self.hidden_dim,)}")
                setattr(self, name, value.copy())
        self.mark_updated()


def _standardize(H: np.ndarray, embedder: Embedder, update_running: bool) -> Tuple[np.ndarray, np.ndarray]:
    eps = embedder.spec.eps
    if embedder.mode == "eval":
        inv_std = 1.0 / np.sqrt(embedder.running_var + eps)
        return (H - embedder.running_mean) * inv_std, inv_std

    K = H.shape[0]
    if K < 2:
        raise InsufficientDataError(f"Class standardization in train mode needs at least 2 classes, got {K}")
    mean = H.mean(axis=0)
    var = H.var(axis=0)
    degenerate = np.flatnonzero(constant_columns(H))
    if degenerate.size:
        logger.warning(f"Class standardization: {degenerate.size} degenerate hidden dimension(s) with zero spread")
    if update_running:
        m = embedder.spec.momentum
        embedder.running_mean = (1.0 - m) * embedder.running_mean + m * mean
        embedder.running_var = (1.0 - m) * embedder.running_var + m * var
    inv_std = 1.0 / np.sqrt(var + eps)
    return (H - mean) * inv_std, inv_std


def class_standardize(H: np.ndarray, embedder: Embedder, update_running: bool = True) -> np.ndarray:
    """Class-wise standardization of a K x d_h hidden matrix in the embedder's mode."""
    H = as_matrix(H, "hidden representations")
    if H.shape[1] != embedder.hidden_dim:
        raise DimensionError(f"Hidden matrix has {H.shape[1]} columns, embedder has d_h={embedder.hidden_dim}")
    return _standardize(H, embedder, update_running)[0]


def forward(embedder: Embedder, A: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    return embedder.forward(A)


def backward(embedder: Embedder, cache: Optional[ForwardCache], dW: np.ndarray) -> GradientTape:
    return embedder.backward(cache, dW)


@dataclass
class AdamState:
    """Adam with bias correction; moment buffers are created on first use."""

    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0 or self.lr <= 0:
            raise ConfigurationError(f"Adam needs positive lr and epsilon, got {self.lr}, {self.epsilon}")

    def apply(self, params: Dict[str, np.ndarray], grads: GradientTape) -> None:
        adam_step(self, params, grads)


def adam_step(state: AdamState, params: Dict[str, np.ndarray], grads: GradientTape) -> Tuple[Dict[str, np.ndarray], AdamState]:
    grads.check_against(params)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        g = grads[name]
        m = state.first.setdefault(name, np.zeros_like(param))
        v = state.second.setdefault(name, np.zeros_like(param))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        param -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params, state


@dataclass
class SgdState:
    """Classical momentum SGD: v = momentum * v + g; p -= lr * v."""

    lr: float
    momentum: float = 0.0
    step: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError(f"SGD needs lr > 0 and momentum in [0, 1), got {self.lr}, {self.momentum}")

    def apply(self, params: Dict[str, np.ndarray], grads: GradientTape) -> None:
        sgd_step(self, params, grads)


def sgd_step(state: SgdState, params: Dict[str, np.ndarray], grads: GradientTape) -> Dict[str, np.ndarray]:
    grads.check_against(params)
    state.step += 1
    for name, param in params.items():
        velocity = state.velocity.setdefault(name, np.zeros_like(param))
        velocity *= state.momentum
        velocity += grads[name]
        param -= state.lr * velocity
    return params
