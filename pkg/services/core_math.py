"""Dense linear algebra, seeded sampling and descriptive statistics.

Every sampling routine draws from `Rng`, a thin wrapper over numpy's PCG64
bit generator. Normal variates come from numpy's Ziggurat sampler, which is
stable across platforms for a given seed.

The normality statistic is scipy's D'Agostino-Pearson omnibus test: the
skewness transformation of D'Agostino (1970) and the kurtosis transformation
of Anscombe & Glynn (1983), combined as K^2 = Z_skew^2 + Z_kurt^2 with a
chi-square(2) tail.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from errors import DegenerateError, DimensionError, InsufficientDataError
from models import MonteCarloEstimate, StatSummary

logger = logging.getLogger(__name__)

GENERATOR_NAME = "PCG64"
NORMALITY_MIN_LENGTH = 20
# a column is constant when its std is at most this fraction of its largest magnitude
CONSTANT_REL_TOL = 1e-10


class Rng:
    """Named, seed-deterministic random stream."""

    algorithm = GENERATOR_NAME

    def __init__(self, seed: int, _seed_sequence: Optional[np.random.SeedSequence] = None):
        self.seed = int(seed)
        self._seed_sequence = _seed_sequence or np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seed_sequence))

    def spawn(self, n: int) -> List["Rng"]:
        """Independent child streams; the i-th child is the same for the same seed and spawn order."""
        return [Rng(self.seed, child) for child in self._seed_sequence.spawn(n)]

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=size)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self.generator.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"Rng(algorithm='{self.algorithm}', seed={self.seed})"


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {matrix.shape}")
    return matrix


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shape-checked matrix product."""
    a, b = as_matrix(a, "left operand"), as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"Cannot multiply {a.shape} by {b.shape}")
    return a @ b


def standard_normal_matrix(rows: int, cols: int, rng: Rng) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise DimensionError(f"Matrix dimensions must be >= 1, got {rows}x{cols}")
    return rng.generator.standard_normal((rows, cols))


def _as_vector(v, min_length: int) -> np.ndarray:
    vector = np.asarray(v, dtype=np.float64).ravel()
    if vector.size < min_length:
        raise InsufficientDataError(f"Need at least {min_length} values, got {vector.size}")
    if not np.all(np.isfinite(vector)):
        raise DegenerateError("Input contains non-finite values")
    return vector


def _is_constant(vector: np.ndarray, variance: float) -> bool:
    scale = max(1.0, float(np.max(np.abs(vector))))
    return variance <= (np.finfo(np.float64).eps * scale) ** 2


def constant_columns(m: np.ndarray, rel_tol: float = CONSTANT_REL_TOL) -> np.ndarray:
    """Boolean mask of the columns of `m` with no spread beyond rounding, judged relative to their scale."""
    matrix = as_matrix(m)
    scale = np.max(np.abs(matrix), axis=0)
    return np.var(matrix, axis=0) <= (rel_tol * scale) ** 2


def descriptive_stats(v: Sequence[float]) -> StatSummary:
    """Population mean, variance, skewness and excess kurtosis."""
    vector = _as_vector(v, 2)
    mean = float(np.mean(vector))
    variance = float(np.var(vector))
    if _is_constant(vector, variance):
        return StatSummary(mean, variance, 0.0, 0.0, vector.size, degenerate=True)
    return StatSummary(
        mean=mean,
        variance=variance,
        skewness=float(stats.skew(vector, bias=True)),
        excess_kurtosis=float(stats.kurtosis(vector, fisher=True, bias=True)),
        n=vector.size,
    )


def normality_statistic(v: Sequence[float]) -> Tuple[float, float]:
    """D'Agostino-Pearson K^2 statistic and its chi-square(2) p-value."""
    vector = _as_vector(v, NORMALITY_MIN_LENGTH)
    if _is_constant(vector, float(np.var(vector))):
        raise DegenerateError("Normality statistic is undefined for a constant vector")
    k2, p_value = stats.normaltest(vector)
    return float(k2), float(p_value)


def abs_correlation_matrix(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Absolute Pearson correlations between the non-constant columns of `m`.

    Returns the |corr| matrix (diagonal zeroed) and the indices of the columns it covers.
    """
    matrix = as_matrix(m)
    if matrix.shape[0] < 2 or matrix.shape[1] < 2:
        raise InsufficientDataError(f"Need at least 2 rows and 2 columns, got {matrix.shape}")
    variances = np.var(matrix, axis=0)
    usable = np.flatnonzero(
        [not _is_constant(matrix[:, j], variances[j]) for j in range(matrix.shape[1])]
    )
    excluded = matrix.shape[1] - usable.size
    if excluded:
        logger.warning(f"Excluded {excluded} zero-variance column(s) from correlation")
    if usable.size < 2:
        raise InsufficientDataError(f"Only {usable.size} column(s) with non-zero variance")
    corr = np.abs(np.corrcoef(matrix[:, usable], rowvar=False))
    np.fill_diagonal(corr, 0.0)
    return np.clip(corr, 0.0, 1.0), usable


def pairwise_abs_correlation(m: np.ndarray) -> np.ndarray:
    """For each usable column, the mean |corr| with every other usable column."""
    corr, usable = abs_correlation_matrix(m)
    return corr.sum(axis=1) / (usable.size - 1)


def summarize_samples(samples: np.ndarray) -> MonteCarloEstimate:
    """Mean, population variance and the standard error of that variance."""
    values = np.asarray(samples, dtype=np.float64).ravel()
    if values.size < 2:
        raise InsufficientDataError(f"Need at least 2 trials, got {values.size}")
    mean = float(np.mean(values))
    centered = values - mean
    m2 = float(np.mean(centered ** 2))
    m4 = float(np.mean(centered ** 4))
    stderr = float(np.sqrt(max(m4 - m2 * m2, 0.0) / values.size))
    return MonteCarloEstimate(mean, m2, stderr, values.size)


def mc_estimate(
    sampler: Callable[[Rng], float],
    trials: int,
    rng: Rng,
    workers: int = 1,
) -> MonteCarloEstimate:
    """Monte-Carlo estimate of a scalar's mean and variance.

    With workers > 1 each worker draws from its own spawned substream and the
    samples are concatenated in worker order.
    """
    if trials < 2:
        raise InsufficientDataError(f"Need at least 2 trials, got {trials}")
    if workers <= 1:
        samples = np.fromiter((sampler(rng) for _ in range(trials)), dtype=np.float64, count=trials)
        return summarize_samples(samples)

    counts = [trials // workers + (1 if i < trials % workers else 0) for i in range(workers)]
    streams = rng.spawn(workers)

    def run(index: int) -> np.ndarray:
        stream = streams[index]
        return np.fromiter((sampler(stream) for _ in range(counts[index])), dtype=np.float64, count=counts[index])

    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(run, range(workers)))
    return summarize_samples(np.concatenate(chunks))
