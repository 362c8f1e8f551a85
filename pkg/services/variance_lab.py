"""Monte-Carlo checks of the logit-variance formulas, training probes and attribute diagnostics."""

import logging
import math
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from errors import ConfigurationError, InsufficientDataError, StateError
from models import EmbedderSpec, ProbeTrace, TrainConfig, VarianceReport, ZslDataset
from services.core_math import (
    Rng,
    abs_correlation_matrix,
    as_matrix,
    descriptive_stats,
    mc_estimate,
    normality_statistic,
    pairwise_abs_correlation,
    summarize_samples,
)
from services.embedder import Embedder, GradientTape
from services.norm_toolkit import (
    attribute_normalize,
    attribute_standardize,
    init_variance,
    predicted_ns_variance,
    predicted_prelogit_variance,
)
from services.zsl_service import ZslTrainer, batch_indices, local_labels, loss, make_optimizer

logger = logging.getLogger(__name__)

MIN_COSINE_TRIALS = 1000
# floats per sampling chunk of the cosine experiment
COSINE_CHUNK_BUDGET = 2_000_000
ATTRIBUTE_SOURCES = ("unit_norm", "raw", "standardized")
DIAGNOSTICS_MIN_CLASSES = 20


def synthetic_cosine_experiment(d_list: Sequence[int], gamma: float, trials: int, rng: Rng) -> List[VarianceReport]:
    """Variance of gamma^2 * cos(x, y) for independent standard normal x, y, per dimension."""
    if trials < MIN_COSINE_TRIALS:
        raise ConfigurationError(f"Cosine experiment needs at least {MIN_COSINE_TRIALS} trials, got {trials}")
    reports = []
    for d in d_list:
        predicted = predicted_ns_variance(gamma, d)
        chunk = max(1, COSINE_CHUNK_BUDGET // d)
        values = []
        for start in range(0, trials, chunk):
            size = min(chunk, trials - start)
            x = rng.normal((size, d))
            y = rng.normal((size, d))
            cos = np.sum(x * y, axis=1) / (np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1))
            values.append(gamma ** 2 * cos)
        estimate = summarize_samples(np.concatenate(values))
        report = VarianceReport(
            setting="cosine",
            predicted=predicted,
            empirical_mean=estimate.variance,
            empirical_std=estimate.stderr_of_variance,
            trials=trials,
            params={"d": int(d), "gamma": float(gamma)},
        )
        logger.info(f"cosine d={d} gamma={gamma}: predicted={predicted:.6g} empirical={estimate.variance:.6g}")
        reports.append(report)
    return reports


def lab_attributes(n_classes: int, attr_dim: int, source: str, rng: Rng) -> np.ndarray:
    """Uniform(0, 1) attributes, optionally unit-normalized or standardized."""
    if source not in ATTRIBUTE_SOURCES:
        raise ConfigurationError(f"Unknown attribute source '{source}'; expected one of {', '.join(ATTRIBUTE_SOURCES)}")
    raw = rng.uniform(0.0, 1.0, (n_classes, attr_dim))
    if source == "unit_norm":
        return attribute_normalize(raw)
    if source == "standardized":
        return attribute_standardize(raw)
    return raw


def predicted_for(spec: EmbedderSpec, attributes: np.ndarray, feature_variance: float) -> float:
    """Closed-form pre-logit variance for an embedder at initialization.

    Linear embedders scale with E||a||^2, class-standardized ones with d_h;
    deep embedders without standardization have no closed form and are
    compared against the feature variance they should preserve.
    """
    scheme = spec.output_scheme()
    d_extra = spec.body_out_dim if scheme.kind == "cn_output" else spec.attr_dim
    var_v = init_variance(scheme, spec.body_out_dim, spec.feat_dim, d_extra)
    if spec.n_hidden_layers == 0 and not spec.class_norm:
        mean_sq_norm = float(np.mean(np.sum(attributes ** 2, axis=1)))
        return predicted_prelogit_variance(spec.feat_dim, feature_variance, var_v, mean_sq_norm)
    if spec.class_norm:
        return predicted_prelogit_variance(spec.feat_dim, feature_variance, var_v, spec.body_out_dim)
    return feature_variance


def prelogit_variance_experiment(
    spec: EmbedderSpec,
    attribute_source: str,
    trials: int,
    rng: Rng,
    n_classes: int = 20,
    feature_variance: float = 1.0,
    workers: int = 1,
) -> VarianceReport:
    """Variance of z^T p_c over fresh embedder weights and features.

    The attribute matrix is drawn once; every trial resamples all weights,
    draws z ~ N(0, s^z I) and picks a random class.
    """
    if feature_variance <= 0:
        raise ConfigurationError(f"Feature variance must be positive, got {feature_variance}")
    attr_rng, trial_rng = rng.spawn(2)
    attributes = lab_attributes(n_classes, spec.attr_dim, attribute_source, attr_rng)
    predicted = predicted_for(spec, attributes, feature_variance)
    z_scale = math.sqrt(feature_variance)

    def sampler(stream: Rng) -> float:
        embedder = Embedder.initialize(spec, stream)
        W, _ = embedder.forward(attributes, update_running=False)
        z = stream.normal(spec.feat_dim, scale=z_scale)
        c = int(stream.integers(0, n_classes))
        return float(W[c] @ z)

    estimate = mc_estimate(sampler, trials, trial_rng, workers=workers)
    setting = f"prelogit:{attribute_source}:{'cn' if spec.class_norm else 'plain'}:{spec.n_hidden_layers}"
    logger.info(f"{setting}: predicted={predicted:.4g} empirical={estimate.variance:.4g}")
    return VarianceReport(
        setting=setting,
        predicted=predicted,
        empirical_mean=estimate.variance,
        empirical_std=estimate.stderr_of_variance,
        trials=trials,
        params={
            "d": spec.feat_dim,
            "attr_dim": spec.attr_dim,
            "hidden_dim": spec.hidden_dim,
            "n_hidden_layers": spec.n_hidden_layers,
            "class_norm": spec.class_norm,
            "output_init": spec.output_scheme().kind,
            "source": attribute_source,
            "mean_sq_norm": float(np.mean(np.sum(attributes ** 2, axis=1))),
        },
    )


class LogitVarianceProbe:
    """Records the variance of the training logits every `every_n` steps."""

    def __init__(self, every_n: int = 1):
        if every_n < 1:
            raise ConfigurationError(f"every_n must be >= 1, got {every_n}")
        self.every_n = every_n
        self.trace = ProbeTrace(kind="logit_variance", config={"every_n": every_n})
        self._trainer = None

    @property
    def attached(self) -> bool:
        return self._trainer is not None

    def attach(self, trainer) -> "LogitVarianceProbe":
        if self._trainer is not None:
            raise StateError("Probe is already attached to a training run")
        trainer.probes.append(self)
        self._trainer = trainer
        self.trace.config["train_config"] = trainer.cfg.to_dict()
        return self

    def detach(self) -> None:
        if self._trainer is None:
            raise StateError("Probe is not attached")
        self._trainer.probes.remove(self)
        self._trainer = None

    def observe(self, step: int, logits: np.ndarray) -> None:
        if self._trainer is None:
            raise StateError("Detached probe cannot observe a training step")
        if step % self.every_n == 0:
            self.trace.append(step, float(np.var(logits)))


def logit_variance_probe(training_run: ZslTrainer, every_n: int = 1) -> ProbeTrace:
    """Attach a variance probe to a trainer; the returned trace fills as training proceeds."""
    return LogitVarianceProbe(every_n).attach(training_run).trace


class PlainClassifier:
    """Feature classifier built from the same MLP machinery: d_z -> d_h -> ... -> K with dot logits."""

    def __init__(self, embedder: Embedder):
        self.embedder = embedder

    @classmethod
    def initialize(cls, feat_dim: int, n_classes: int, cfg: TrainConfig, rng: Rng) -> "PlainClassifier":
        spec = EmbedderSpec(
            attr_dim=feat_dim,
            feat_dim=n_classes,
            hidden_dim=cfg.hidden_dim,
            n_hidden_layers=cfg.n_hidden_layers,
            class_norm=False,
            body_init=cfg.body_init,
            output_init="xavier_fan_out",
            distribution=cfg.init_distribution,
        )
        return cls(Embedder.initialize(spec, rng))

    @property
    def n_params(self) -> int:
        return self.embedder.n_params

    def batch_gradient(self, features, labels, attributes, class_ids, entropy_weight: float = 0.0) -> GradientTape:
        logits, cache = self.embedder.forward(features)
        _, dlogits = loss(logits, local_labels(labels, class_ids), entropy_weight)
        return self.embedder.backward(cache, dlogits)

    def fit(self, data: ZslDataset, cfg: TrainConfig, n_steps: int, rng: Rng) -> None:
        optimizer = make_optimizer(cfg)
        batches = batch_indices(data.seen_features.shape[0], cfg.batch_size, rng)
        for _ in range(n_steps):
            idx = next(batches)
            tape = self.batch_gradient(data.seen_features[idx], data.seen_labels[idx], None, data.seen_class_ids)
            if cfg.clip_norm > 0:
                tape.clip_(cfg.clip_norm)
            self.embedder.apply_update(optimizer, tape)


def smoothness_probe(
    model,
    dataset: ZslDataset,
    n_batches: int = 10,
    batch_size: int = 256,
    rng: Optional[Rng] = None,
    perturb_attributes: bool = False,
) -> float:
    """Mean over noisy batches of the loss-gradient L2 norm divided by the parameter count.

    Batches are sampled with replacement from the seen training data and
    perturbed with N(0, I) noise on the features (and attributes when asked).
    """
    if rng is None:
        raise ConfigurationError("smoothness_probe needs an explicit random stream")
    n = dataset.seen_features.shape[0]
    if n == 0:
        raise InsufficientDataError("Smoothness probe needs training examples")
    if n_batches < 1 or batch_size < 1:
        raise ConfigurationError(f"n_batches and batch_size must be >= 1, got {n_batches}, {batch_size}")
    values = []
    for _ in range(n_batches):
        idx = rng.integers(0, n, batch_size)
        features = dataset.seen_features[idx] + rng.normal((batch_size, dataset.feat_dim))
        attributes = dataset.attributes
        if perturb_attributes:
            attributes = attributes + rng.normal(attributes.shape)
        tape = model.batch_gradient(features, dataset.seen_labels[idx], attributes, dataset.seen_class_ids)
        values.append(tape.global_norm() / model.n_params)
    return float(np.mean(values))


def compare_smoothness(
    cfg: TrainConfig,
    data: ZslDataset,
    n_steps: int,
    n_batches: int = 10,
    batch_size: int = 256,
    perturb_attributes: bool = False,
) -> Dict[str, Any]:
    """Train a plain classifier, a ZSL embedder and a class-normalized ZSL embedder, then probe each.

    All three share depth, widths and optimizer settings and minimize plain
    cross-entropy. The ZSL arms use dot-product logits whatever `cfg.logit_mode`
    says. Every probe sees the same batches and noise.
    """
    cfg = replace(cfg, entropy_weight=0.0)
    results: Dict[str, Any] = {"n_steps": n_steps, "n_batches": n_batches, "batch_size": batch_size}
    steps_per_epoch = max(1, math.ceil(data.seen_features.shape[0] / cfg.batch_size))

    def probe_rng() -> Rng:
        return Rng(cfg.seed).spawn(3)[2]

    plain = PlainClassifier.initialize(data.feat_dim, len(data.seen_class_ids), cfg, Rng(cfg.seed).spawn(3)[0])
    plain.fit(data, cfg, n_steps, Rng(cfg.seed).spawn(3)[1])
    results["plain"] = smoothness_probe(plain, data, n_batches, batch_size, probe_rng())

    for name, class_norm in (("zsl", False), ("zsl_cn", True)):
        trainer = ZslTrainer(replace(cfg, class_norm=class_norm, logit_mode="dot"), data.attributes, data.feat_dim)
        trainer.fit(data.seen_features, data.seen_labels, data.seen_class_ids, n_steps, steps_per_epoch)
        results[name] = smoothness_probe(trainer.model(), data, n_batches, batch_size, probe_rng(), perturb_attributes)
    logger.info(f"Smoothness: plain={results['plain']:.3e} zsl={results['zsl']:.3e} zsl_cn={results['zsl_cn']:.3e}")
    return results


def attribute_diagnostics(A: np.ndarray, bins: int = 10) -> Dict[str, Any]:
    """Normality of standardized columns, the |corr| distribution and squared-norm summary."""
    A = as_matrix(A, "attributes")
    if A.shape[0] < DIAGNOSTICS_MIN_CLASSES:
        raise InsufficientDataError(f"Attribute diagnostics need at least {DIAGNOSTICS_MIN_CLASSES} classes, got {A.shape[0]}")
    standardized = attribute_standardize(A)

    columns, k2_values, p_values = [], [], []
    for j in range(standardized.shape[1]):
        if descriptive_stats(standardized[:, j]).degenerate:
            logger.warning(f"Skipping constant attribute column {j} in normality diagnostics")
            continue
        k2, p = normality_statistic(standardized[:, j])
        columns.append(j)
        k2_values.append(k2)
        p_values.append(p)

    corr, usable = abs_correlation_matrix(A)
    upper = corr[np.triu_indices(usable.size, k=1)]
    corr_hist, corr_edges = np.histogram(upper, bins=bins, range=(0.0, 1.0))

    sq_norms = np.sum(A ** 2, axis=1)
    norm_hist, norm_edges = np.histogram(sq_norms, bins=bins)
    return {
        "n_classes": int(A.shape[0]),
        "attr_dim": int(A.shape[1]),
        "normality": {
            "columns": columns,
            "statistics": k2_values,
            "p_values": p_values,
            "median_p_value": float(np.median(p_values)) if p_values else None,
        },
        "correlation": {
            "columns": usable.tolist(),
            "median": float(np.median(upper)),
            "mean": float(np.mean(upper)),
            "max": float(np.max(upper)),
            "quantiles": {str(q): float(np.quantile(upper, q)) for q in (0.05, 0.25, 0.5, 0.75, 0.95)},
            "per_column_mean": pairwise_abs_correlation(A).tolist(),
            "histogram": {"counts": corr_hist.tolist(), "edges": corr_edges.tolist()},
        },
        "squared_norms": {
            **descriptive_stats(sq_norms).to_dict(),
            "histogram": {"counts": norm_hist.tolist(), "edges": norm_edges.tolist()},
        },
    }
