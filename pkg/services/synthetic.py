"""Synthetic ZSL data: attribute-driven class centers plus Gaussian feature noise."""

import logging
from typing import Tuple

import numpy as np

from errors import ConfigurationError
from models import ClassPool, ZslDataset
from services.core_math import Rng

logger = logging.getLogger(__name__)

ATTR_MODELS = ("gaussian", "lognormal")
CENTER_SCALE = 2.0


def _check_counts(**counts: int) -> None:
    for name, value in counts.items():
        if value < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {value}")


def generate_class_pool(
    n_classes: int,
    attr_dim: int,
    feat_dim: int,
    n_per_class: int,
    attr_model: str,
    noise: float,
    rng: Rng,
    test_fraction: float = 0.2,
) -> ClassPool:
    """Draw class attributes, map them to feature-space centers and sample examples around them.

    Centers are CENTER_SCALE * tanh(a_c M) for a fixed Gaussian map M; every
    class keeps round(test_fraction * n_per_class) examples (at least one) for
    testing.
    """
    _check_counts(n_classes=n_classes, attr_dim=attr_dim, feat_dim=feat_dim)
    if n_per_class < 2:
        raise ConfigurationError(f"n_per_class must be >= 2 so every class has train and test examples, got {n_per_class}")
    if attr_model not in ATTR_MODELS:
        raise ConfigurationError(f"Unknown attribute model '{attr_model}'; expected one of {', '.join(ATTR_MODELS)}")
    if noise < 0:
        raise ConfigurationError(f"noise must be >= 0, got {noise}")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must be in [0, 1), got {test_fraction}")

    attr_rng, map_rng, feature_rng = rng.spawn(3)
    attributes = attr_rng.normal((n_classes, attr_dim))
    if attr_model == "lognormal":
        attributes = np.exp(attributes)
    mapping = map_rng.normal((attr_dim, feat_dim), scale=1.0 / np.sqrt(attr_dim))
    centers = CENTER_SCALE * np.tanh(attributes @ mapping)

    n_test = min(n_per_class - 1, max(1, int(round(test_fraction * n_per_class))))
    n_train = n_per_class - n_test
    samples = centers[:, None, :] + noise * feature_rng.normal((n_classes, n_per_class, feat_dim))
    labels = np.arange(n_classes, dtype=np.int64)

    pool = ClassPool(
        train_features=samples[:, :n_train].reshape(-1, feat_dim),
        train_labels=np.repeat(labels, n_train),
        test_features=samples[:, n_train:].reshape(-1, feat_dim),
        test_labels=np.repeat(labels, n_test),
        attributes=attributes,
    )
    logger.info(f"Generated {n_classes} classes ({attr_model} attributes): {n_train} train / {n_test} test examples each")
    return pool


def random_split(n_classes: int, n_seen: int, rng: Rng) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    """Random seen/unseen class ids, each sorted."""
    order = rng.permutation(n_classes)
    return tuple(sorted(int(c) for c in order[:n_seen])), tuple(sorted(int(c) for c in order[n_seen:]))


def generate_synthetic_split(
    n_seen: int,
    n_unseen: int,
    attr_dim: int,
    feat_dim: int,
    n_per_class: int,
    attr_model: str,
    noise: float,
    rng: Rng,
    test_fraction: float = 0.2,
) -> Tuple[ClassPool, Tuple[int, ...], Tuple[int, ...]]:
    """Class pool plus a random seen/unseen split, as stored in a dataset directory."""
    if n_seen < 2:
        raise ConfigurationError(f"Need at least 2 seen classes, got {n_seen}")
    _check_counts(n_unseen=n_unseen)
    pool_rng, split_rng = rng.spawn(2)
    pool = generate_class_pool(n_seen + n_unseen, attr_dim, feat_dim, n_per_class, attr_model, noise, pool_rng, test_fraction)
    seen, unseen = random_split(pool.n_classes, n_seen, split_rng)
    return pool, seen, unseen


def generate_synthetic_zsl(
    n_seen: int,
    n_unseen: int,
    attr_dim: int,
    feat_dim: int,
    n_per_class: int,
    attr_model: str,
    noise: float,
    rng: Rng,
    test_fraction: float = 0.2,
) -> ZslDataset:
    """A seeded synthetic ZSL problem with a random seen/unseen class split."""
    pool, seen, unseen = generate_synthetic_split(
        n_seen, n_unseen, attr_dim, feat_dim, n_per_class, attr_model, noise, rng, test_fraction
    )
    return ZslDataset.from_pool(pool, seen, unseen)
