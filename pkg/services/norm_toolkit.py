"""Initialization schemes, attribute normalization, logits and variance predictors."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import ConfigurationError, DegenerateError, DimensionError, DomainError, InsufficientDataError
from models import InitScheme, LogitConfig
from services.core_math import CONSTANT_REL_TOL, Rng, as_matrix, constant_columns

logger = logging.getLogger(__name__)


def init_variance(scheme: InitScheme, d_in: int, d_out: int, d_extra: Optional[int] = None) -> float:
    """Target weight variance of an initialization scheme.

    For `cn_output`, `d_extra` is the hidden dimension d_h and `d_out` is d_z;
    for `linear_corrected`, `d_extra` is the attribute dimension d_a.
    """
    if d_in < 1 or d_out < 1:
        raise DimensionError(f"Layer dims must be >= 1, got {d_in}x{d_out}")
    kind = scheme.kind
    if kind == "xavier_fan_in":
        return 1.0 / d_in
    if kind == "xavier_fan_out":
        return 1.0 / d_out
    if kind == "kaiming_fan_in":
        return 2.0 / d_in
    if kind == "kaiming_fan_out":
        return 2.0 / d_out
    if d_extra is None:
        raise ConfigurationError(f"Init scheme '{kind}' needs the extra dimension")
    if d_extra < 1:
        raise DimensionError(f"Extra dimension must be >= 1, got {d_extra}")
    # cn_output: 1/(d_z*d_h); linear_corrected: 1/(d_z*d_a)
    return 1.0 / (d_out * d_extra)


def sample_init(scheme: InitScheme, rows: int, cols: int, rng: Rng, d_extra: Optional[int] = None) -> np.ndarray:
    """Draw a rows x cols weight matrix (rows = fan-in, cols = fan-out) with the scheme's variance."""
    variance = init_variance(scheme, rows, cols, d_extra)
    if scheme.distribution == "uniform":
        bound = np.sqrt(3.0 * variance)
        return rng.uniform(-bound, bound, (rows, cols))
    return rng.normal((rows, cols), scale=np.sqrt(variance))


def attribute_normalize(A: np.ndarray) -> np.ndarray:
    """Scale every attribute row to unit L2 norm."""
    A = as_matrix(A, "attributes")
    norms = np.linalg.norm(A, axis=1)
    zero_rows = np.flatnonzero(norms == 0)
    if zero_rows.size:
        raise DegenerateError(f"Attribute row of class {zero_rows[0]} has zero norm", index=int(zero_rows[0]))
    return A / norms[:, None]


def attribute_standardize(A: np.ndarray, rel_tol: float = CONSTANT_REL_TOL) -> np.ndarray:
    """Standardize every attribute column to zero mean and unit population variance.

    Columns whose std is at most `rel_tol` times their largest magnitude are
    only centered (they become zeros for constant columns); other columns are
    divided by their exact std, which keeps the operation idempotent.
    """
    A = as_matrix(A, "attributes")
    if A.shape[0] < 2:
        raise InsufficientDataError(f"Standardization needs at least 2 classes, got {A.shape[0]}")
    mean = A.mean(axis=0)
    variance = A.var(axis=0)
    degenerate = constant_columns(A, rel_tol)
    if np.any(degenerate):
        logger.warning(f"Attribute columns {np.flatnonzero(degenerate).tolist()} are degenerate; only centered")
    std = np.where(degenerate, 1.0, np.sqrt(variance))
    return (A - mean) / std


def preprocess_attributes(A: np.ndarray, mode: str) -> np.ndarray:
    if mode == "an":
        return attribute_normalize(A)
    if mode == "standardize":
        return attribute_standardize(A)
    if mode == "none":
        return as_matrix(A, "attributes")
    raise ConfigurationError(f"Unknown attribute preprocessing '{mode}'")


@dataclass
class LogitCache:
    cfg: LogitConfig
    Z: np.ndarray
    W: np.ndarray
    z_unit: Optional[np.ndarray] = None
    w_unit: Optional[np.ndarray] = None
    z_norm: Optional[np.ndarray] = None
    w_norm: Optional[np.ndarray] = None


def _unit_rows(X: np.ndarray, name: str) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateError(f"Row {zero[0]} of {name} has zero norm", index=int(zero[0]))
    return X / norms[:, None], norms


def logits_forward(Z: np.ndarray, W: np.ndarray, cfg: LogitConfig) -> Tuple[np.ndarray, LogitCache]:
    Z, W = as_matrix(Z, "features"), as_matrix(W, "prototypes")
    if Z.shape[1] != W.shape[1]:
        raise DimensionError(f"Feature dim {Z.shape[1]} does not match prototype dim {W.shape[1]}")
    if cfg.mode == "dot":
        return Z @ W.T, LogitCache(cfg, Z, W)
    z_unit, z_norm = _unit_rows(Z, "features")
    w_unit, w_norm = _unit_rows(W, "prototypes")
    logits = cfg.gamma ** 2 * (z_unit @ w_unit.T)
    return logits, LogitCache(cfg, Z, W, z_unit, w_unit, z_norm, w_norm)


def logits_backward(cache: LogitCache, dlogits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of the loss w.r.t. features and prototypes."""
    if cache.cfg.mode == "dot":
        return dlogits @ cache.W, dlogits.T @ cache.Z
    scale = cache.cfg.gamma ** 2
    d_zu = scale * dlogits @ cache.w_unit
    d_wu = scale * dlogits.T @ cache.z_unit
    dZ = (d_zu - cache.z_unit * np.sum(d_zu * cache.z_unit, axis=1, keepdims=True)) / cache.z_norm[:, None]
    dW = (d_wu - cache.w_unit * np.sum(d_wu * cache.w_unit, axis=1, keepdims=True)) / cache.w_norm[:, None]
    return dZ, dW


def compute_logits(Z: np.ndarray, W: np.ndarray, cfg: LogitConfig) -> np.ndarray:
    """Dot-product or normalize+scale logits (gamma^2 times cosine similarity)."""
    return logits_forward(Z, W, cfg)[0]


def apply_seen_scale(logits: np.ndarray, seen_class_mask: np.ndarray, s: float) -> np.ndarray:
    """Multiply seen-class logit columns by s (evaluation only)."""
    if not 0.0 < s <= 1.0:
        raise ConfigurationError(f"Seen scale must be in (0, 1], got {s}")
    scaled = np.array(logits, dtype=np.float64, copy=True)
    scaled[:, np.asarray(seen_class_mask, dtype=bool)] *= s
    return scaled


def apply_seen_bias(logits: np.ndarray, seen_class_mask: np.ndarray, bias: float) -> np.ndarray:
    """Subtract a calibration constant from seen-class logit columns."""
    shifted = np.array(logits, dtype=np.float64, copy=True)
    shifted[:, np.asarray(seen_class_mask, dtype=bool)] -= bias
    return shifted


def predicted_ns_variance(gamma: float, d_z: int) -> float:
    """Variance of normalize+scale logits: gamma^4 * d_z / (d_z - 2)^2."""
    if d_z < 3:
        raise DomainError(f"d_z must be >= 3, got {d_z}")
    if gamma <= 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    return gamma ** 4 * d_z / (d_z - 2) ** 2


def optimal_gamma(nu: float, d_z: int) -> float:
    """Scale giving normalize+scale logits the target variance nu."""
    if nu <= 0:
        raise DomainError(f"Target variance must be positive, got {nu}")
    if d_z < 3:
        raise DomainError(f"d_z must be >= 3, got {d_z}")
    return (nu * (d_z - 2) ** 2 / d_z) ** 0.25


def predicted_prelogit_variance(d_z: int, var_z: float, var_V: float, mean_sq_norm: float) -> float:
    """Pre-logit variance d_z * var(z) * var(V) * E||a||^2 (or E||h||^2 for deep embedders)."""
    for name, value in (("d_z", d_z), ("var_z", var_z), ("var_V", var_V), ("mean_sq_norm", mean_sq_norm)):
        if not value > 0:
            raise DomainError(f"{name} must be positive, got {value}")
    return d_z * var_z * var_V * mean_sq_norm


def dynamic_normalize(H: np.ndarray, sqrt: bool = False) -> np.ndarray:
    """Divide every row by the batch mean of ||h||^2 (or its square root when `sqrt`)."""
    return _dynamic_normalizer(as_matrix(H, "hidden representations"), sqrt)[0]


def _dynamic_normalizer(H: np.ndarray, sqrt: bool) -> Tuple[np.ndarray, float]:
    if H.shape[0] < 1:
        raise InsufficientDataError("Dynamic normalization needs at least one row")
    mean_sq_norm = float(np.mean(np.sum(H * H, axis=1)))
    if mean_sq_norm == 0:
        raise DegenerateError("Batch mean squared norm is zero")
    divisor = np.sqrt(mean_sq_norm) if sqrt else mean_sq_norm
    return H / divisor, divisor
