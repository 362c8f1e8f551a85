"""ZSL training (cross-entropy + entropy regularizer) and generalized ZSL evaluation."""

import itertools
import logging
import math
from dataclasses import dataclass, fields, replace
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, special, stats

from config import SEEN_SCALE_GRID
from errors import ConfigurationError, DataError, DimensionError, LabelError
from models import EvalReport, LogitConfig, TrainConfig, TrainingLog, ZslDataset
from services.core_math import Rng, as_matrix
from services.embedder import AdamState, Embedder, GradientTape, SgdState
from services.norm_toolkit import (
    apply_seen_bias,
    apply_seen_scale,
    compute_logits,
    logits_backward,
    logits_forward,
    preprocess_attributes,
)

logger = logging.getLogger(__name__)

MIN_GRID_POINTS = 5


def local_labels(labels: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    """Map class ids to their positions in `class_ids`."""
    position = {int(c): i for i, c in enumerate(class_ids)}
    try:
        return np.array([position[int(y)] for y in np.asarray(labels).ravel()], dtype=np.int64)
    except KeyError as e:
        raise LabelError(f"Label {e.args[0]} is not one of the classes {list(position)}")


def loss(logits: np.ndarray, labels: np.ndarray, entropy_weight: float) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy plus entropy_weight times the mean of sum_c p_c log p_c.

    Returns the loss value and its exact gradient with respect to the logits.
    """
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"Expected {n} labels, got {labels.shape[0]}")
    if n == 0:
        raise DataError("Loss of an empty batch is undefined")
    if labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"Labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")

    log_p = special.log_softmax(logits, axis=1)
    p = np.exp(log_p)
    neg_entropy = np.sum(p * log_p, axis=1)
    rows = np.arange(n)
    value = float(-np.mean(log_p[rows, labels]) + entropy_weight * np.mean(neg_entropy))

    dlogits = p.copy()
    dlogits[rows, labels] -= 1.0
    dlogits += entropy_weight * p * (log_p - neg_entropy[:, None])
    return value, dlogits / n


@dataclass
class ZslModel:
    """A trained embedder together with how its attributes and logits are computed."""

    embedder: Embedder
    logit_config: LogitConfig
    attribute_preproc: str = "an"

    def prototypes(self, attributes: np.ndarray) -> np.ndarray:
        """Eval-mode prototypes for every attribute row; running statistics are untouched."""
        A = preprocess_attributes(attributes, self.attribute_preproc)
        previous = self.embedder.mode
        self.embedder.eval()
        try:
            W, _ = self.embedder.forward(A, update_running=False)
        finally:
            self.embedder.mode = previous
        return W

    def class_logits(self, features: np.ndarray, attributes: np.ndarray, cfg: Optional[LogitConfig] = None) -> np.ndarray:
        """Unscaled logits of every feature row against every class."""
        return compute_logits(features, self.prototypes(attributes), cfg or self.logit_config)

    def batch_gradient(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        attributes: np.ndarray,
        class_ids: Sequence[int],
        entropy_weight: float = 0.0,
    ) -> GradientTape:
        """Train-mode loss gradient on one batch without touching parameters or running statistics."""
        class_ids = np.asarray(class_ids, dtype=np.int64)
        local = local_labels(labels, class_ids)
        A = preprocess_attributes(attributes, self.attribute_preproc)[class_ids]
        previous = self.embedder.mode
        self.embedder.train()
        try:
            W, cache = self.embedder.forward(A, update_running=False)
            logits, logit_cache = logits_forward(features, W, self.logit_config)
            _, dlogits = loss(logits, local, entropy_weight)
            _, dW = logits_backward(logit_cache, dlogits)
            return self.embedder.backward(cache, dW)
        finally:
            self.embedder.mode = previous

    @property
    def n_params(self) -> int:
        return self.embedder.n_params


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SgdState(lr=cfg.lr, momentum=cfg.momentum)
    return AdamState(lr=cfg.lr)


def batch_indices(n: int, batch_size: int, rng: Rng) -> Iterator[np.ndarray]:
    """Endless minibatch index arrays; each pass over the data is a fresh permutation."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def steps_for(n_examples: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n_examples / batch_size)


class ZslTrainer:
    """Owns the embedder, optimizer and shuffling stream of one training run.

    Standalone ZSL training and each task of a continual sequence go through
    `fit`, so they consume random streams in the same order.
    """

    def __init__(self, cfg: TrainConfig, attributes: np.ndarray, feat_dim: int, probes: Sequence[Any] = ()):
        self.cfg = cfg
        self.attributes = preprocess_attributes(attributes, cfg.attribute_preproc)
        init_rng, self.shuffle_rng = Rng(cfg.seed).spawn(2)
        spec = cfg.embedder_spec(self.attributes.shape[1], feat_dim)
        self.embedder = Embedder.initialize(spec, init_rng)
        self.logit_config = cfg.logit_config()
        self.optimizer = make_optimizer(cfg)
        self.probes: List[Any] = []
        for probe in probes:
            probe.attach(self)
        self.log = TrainingLog()
        self.step = 0
        self.task = 0

    def model(self) -> ZslModel:
        return ZslModel(self.embedder, self.logit_config, self.cfg.attribute_preproc)

    def fit(self, features: np.ndarray, labels: np.ndarray, class_ids: Sequence[int], n_steps: int, steps_per_epoch: int) -> None:
        """Train on features whose labels are all in `class_ids` for `n_steps` minibatch updates."""
        features = as_matrix(features, "features")
        labels = np.asarray(labels, dtype=np.int64)
        if features.shape[1] != self.embedder.spec.feat_dim:
            raise DimensionError(f"Features have dim {features.shape[1]}, model expects {self.embedder.spec.feat_dim}")
        class_ids = np.asarray(class_ids, dtype=np.int64)
        local = local_labels(labels, class_ids)
        if n_steps > 0 and features.shape[0] == 0:
            raise DataError("No training examples")
        A_task = self.attributes[class_ids]

        batches = batch_indices(features.shape[0], self.cfg.batch_size, self.shuffle_rng)
        epoch_losses: List[float] = []
        for i in range(n_steps):
            idx = next(batches)
            epoch_losses.append(self._step(features[idx], local[idx], A_task))
            if (i + 1) % steps_per_epoch == 0 or i + 1 == n_steps:
                entry = {
                    "task": self.task,
                    "epoch": i // steps_per_epoch,
                    "step": self.step,
                    "loss": float(np.mean(epoch_losses)),
                }
                for probe in self.probes:
                    if probe.trace.values:
                        entry[f"probe_{probe.trace.kind}"] = probe.trace.values[-1]
                self.log.record(**entry)
                logger.debug(f"task {self.task} epoch {entry['epoch']}: loss={entry['loss']:.5f}")
                epoch_losses = []
        self.optimizer.lr *= self.cfg.lr_decay
        self.task += 1

    def _step(self, Z: np.ndarray, y: np.ndarray, A: np.ndarray) -> float:
        self.embedder.train()
        W, cache = self.embedder.forward(A)
        logits, logit_cache = logits_forward(Z, W, self.logit_config)
        for probe in self.probes:
            probe.observe(self.step, logits)
        value, dlogits = loss(logits, y, self.cfg.entropy_weight)
        if not np.isfinite(value):
            raise DataError(f"Non-finite training loss at step {self.step}")
        _, dW = logits_backward(logit_cache, dlogits)
        tape = self.embedder.backward(cache, dW)
        if self.cfg.clip_norm > 0:
            tape.clip_(self.cfg.clip_norm)
        self.embedder.apply_update(self.optimizer, tape)
        self.step += 1
        return value


def train(cfg: TrainConfig, data: ZslDataset, probes: Sequence[Any] = ()) -> Tuple[ZslModel, TrainingLog]:
    """Train on the seen classes only; every step embeds the full seen attribute matrix."""
    trainer = ZslTrainer(cfg, data.attributes, data.feat_dim, probes)
    n = data.seen_features.shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    logger.info(f"Training on {n} examples of {len(data.seen_class_ids)} seen classes for {cfg.epochs} epoch(s)")
    trainer.fit(data.seen_features, data.seen_labels, data.seen_class_ids, steps_for(n, cfg.batch_size, cfg.epochs), steps_per_epoch)
    return trainer.model(), trainer.log


def train_accuracy(model: ZslModel, data: ZslDataset) -> float:
    """Per-sample accuracy on the training data with prediction restricted to seen classes."""
    seen = np.asarray(data.seen_class_ids)
    logits = model.class_logits(data.seen_features, data.attributes)[:, seen]
    return float(np.mean(seen[np.argmax(logits, axis=1)] == data.seen_labels))


def per_class_accuracy(predictions: np.ndarray, labels: np.ndarray) -> Dict[int, float]:
    """Top-1 accuracy of every class present in `labels`."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    return {int(c): float(np.mean(predictions[labels == c] == c)) for c in np.unique(labels)}


def mean_per_class_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    accuracies = per_class_accuracy(predictions, labels)
    if not accuracies:
        raise DataError("Accuracy of an empty test set is undefined")
    return float(np.mean(list(accuracies.values())))


def harmonic_mean(u: float, s: float) -> float:
    return 2.0 * u * s / (u + s) if u + s > 0 else 0.0


def calibrate(logits: np.ndarray, seen_mask: np.ndarray, s: float, additive: bool = False, span: Optional[float] = None) -> np.ndarray:
    """Apply a seen-class calibration; s == 0 suppresses seen classes entirely."""
    mask = np.asarray(seen_mask, dtype=bool)
    if s == 0.0:
        suppressed = np.array(logits, dtype=np.float64, copy=True)
        suppressed[:, mask] = -np.inf
        return suppressed
    if additive:
        if span is None:
            span = float(np.max(logits) - np.min(logits)) if np.size(logits) else 0.0
        return apply_seen_bias(logits, mask, (1.0 - s) * span)
    return apply_seen_scale(logits, mask, s)


def gzsl_accuracies(
    seen_logits: np.ndarray,
    seen_labels: np.ndarray,
    unseen_logits: np.ndarray,
    unseen_labels: np.ndarray,
    seen_mask: np.ndarray,
    s: float = 1.0,
    additive: bool = False,
) -> Tuple[float, Optional[float], Dict[int, float]]:
    """GZSL-S, GZSL-U (None without unseen data) and per-class accuracies at one calibration."""
    span = None
    if additive:
        joined = np.concatenate([seen_logits, unseen_logits]) if np.size(unseen_logits) else seen_logits
        span = float(np.max(joined) - np.min(joined))
    seen_pred = np.argmax(calibrate(seen_logits, seen_mask, s, additive, span), axis=1)
    per_class = per_class_accuracy(seen_pred, seen_labels)
    seen_acc = mean_per_class_accuracy(seen_pred, seen_labels)
    unseen_acc = None
    if np.size(unseen_labels):
        unseen_pred = np.argmax(calibrate(unseen_logits, seen_mask, s, additive, span), axis=1)
        per_class.update(per_class_accuracy(unseen_pred, unseen_labels))
        unseen_acc = mean_per_class_accuracy(unseen_pred, unseen_labels)
    return seen_acc, unseen_acc, per_class


def _check_grid(scale_grid: Sequence[float]) -> List[float]:
    grid = sorted({float(s) for s in scale_grid} | {1.0}, reverse=True)
    if len(set(float(s) for s in scale_grid)) < MIN_GRID_POINTS:
        raise ConfigurationError(f"Seen-scale grid needs at least {MIN_GRID_POINTS} distinct points, got {list(scale_grid)}")
    if any(not 0.0 < s <= 1.0 for s in grid):
        raise ConfigurationError(f"Seen-scale grid values must lie in (0, 1], got {list(scale_grid)}")
    return grid


def ausuc_area(points: Sequence[Tuple[float, float]]) -> float:
    """Trapezoidal area under (S, U) points sorted by S."""
    ordered = sorted((float(s), float(u)) for s, u in points)
    if len(ordered) < 2:
        return 0.0
    s_values, u_values = zip(*ordered)
    return float(integrate.trapezoid(u_values, s_values))


def seen_unseen_curve(
    seen_logits: np.ndarray,
    seen_labels: np.ndarray,
    unseen_logits: np.ndarray,
    unseen_labels: np.ndarray,
    seen_mask: np.ndarray,
    scale_grid: Sequence[float] = SEEN_SCALE_GRID,
    additive: bool = False,
) -> List[Tuple[float, float, float]]:
    """(s, GZSL-S, GZSL-U) over the grid plus s = 1 and the seen-suppression point s = 0."""
    curve = []
    for s in _check_grid(scale_grid) + [0.0]:
        seen_acc, unseen_acc, _ = gzsl_accuracies(seen_logits, seen_labels, unseen_logits, unseen_labels, seen_mask, s, additive)
        curve.append((s, seen_acc, unseen_acc))
    return curve


def ausuc_from_logits(seen_logits, seen_labels, unseen_logits, unseen_labels, seen_mask, scale_grid=SEEN_SCALE_GRID, additive=False) -> float:
    curve = seen_unseen_curve(seen_logits, seen_labels, unseen_logits, unseen_labels, seen_mask, scale_grid, additive)
    return ausuc_area([(s_acc, u_acc) for _, s_acc, u_acc in curve])


def _test_logits(model, data: ZslDataset, cfg: Optional[LogitConfig]):
    if data.attributes.shape[0] <= max(data.seen_class_ids + data.unseen_class_ids):
        raise DataError("Attribute rows are missing for some classes")
    seen_x, seen_y = data.seen_test()
    seen_logits = model.class_logits(seen_x, data.attributes, cfg)
    if data.unseen_features.shape[0]:
        unseen_logits = model.class_logits(data.unseen_features, data.attributes, cfg)
    else:
        unseen_logits = np.zeros((0, data.n_classes))
    return seen_logits, seen_y, unseen_logits, data.unseen_labels


def gzsl_eval(
    model,
    data: ZslDataset,
    cfg: Optional[LogitConfig] = None,
    scale_grid: Sequence[float] = SEEN_SCALE_GRID,
    additive: bool = False,
) -> EvalReport:
    """Evaluate over the joint seen + unseen label space with the configured seen scale.

    `model` only needs a `class_logits(features, attributes, cfg)` method.
    """
    cfg = cfg or model.logit_config
    seen_logits, seen_y, unseen_logits, unseen_y = _test_logits(model, data, cfg)
    mask = data.seen_mask()
    seen_acc, unseen_acc, per_class = gzsl_accuracies(seen_logits, seen_y, unseen_logits, unseen_y, mask, cfg.seen_scale, additive)

    all_pred = np.argmax(calibrate(np.concatenate([seen_logits, unseen_logits]), mask, cfg.seen_scale, additive), axis=1)
    joint = mean_per_class_accuracy(all_pred, np.concatenate([seen_y, unseen_y]))

    harmonic, area = None, None
    if unseen_acc is not None:
        harmonic = harmonic_mean(unseen_acc, seen_acc)
        area = ausuc_from_logits(seen_logits, seen_y, unseen_logits, unseen_y, mask, scale_grid, additive)
    return EvalReport(
        gzsl_u=unseen_acc,
        gzsl_s=seen_acc,
        gzsl_h=harmonic,
        ausuc=area,
        per_class_accuracy=per_class,
        seen_scale_used=cfg.seen_scale,
        joint_accuracy=joint,
    )


def ausuc(model, data: ZslDataset, gamma: float, scale_grid: Sequence[float] = SEEN_SCALE_GRID, additive: bool = False) -> float:
    cfg = replace(model.logit_config, gamma=gamma, seen_scale=1.0)
    seen_logits, seen_y, unseen_logits, unseen_y = _test_logits(model, data, cfg)
    if not np.size(unseen_y):
        raise DataError("AUSUC needs unseen test data")
    return ausuc_from_logits(seen_logits, seen_y, unseen_logits, unseen_y, data.seen_mask(), scale_grid, additive)


def sweep_seen_scale(model, data: ZslDataset, scale_grid: Sequence[float] = SEEN_SCALE_GRID) -> List[EvalReport]:
    """One report per seen scale of the grid (AUSUC left empty)."""
    reports = []
    for s in sorted({float(v) for v in scale_grid}, reverse=True):
        report = gzsl_eval(model, data, replace(model.logit_config, seen_scale=s), scale_grid=SEEN_SCALE_GRID)
        report.ausuc = None
        reports.append(report)
    return reports


def validation_split(data: ZslDataset, holdout_fractions: Tuple[float, float], rng: Rng) -> ZslDataset:
    """Carve validation-unseen classes and validation-seen examples out of the seen training data.

    Class ids of the returned dataset are positions in `data.seen_class_ids`.
    """
    unseen_fraction, seen_fraction = holdout_fractions
    for fraction in holdout_fractions:
        if not 0.0 < fraction < 1.0:
            raise ConfigurationError(f"Holdout fractions must lie in (0, 1), got {holdout_fractions}")
    n_seen = len(data.seen_class_ids)
    n_val_unseen = max(1, int(round(unseen_fraction * n_seen)))
    if n_seen - n_val_unseen < 2:
        raise DataError(f"Cannot carve {n_val_unseen} validation-unseen class(es) out of {n_seen} seen classes")

    order = rng.permutation(n_seen)
    val_unseen = np.sort(order[:n_val_unseen])
    val_seen = np.sort(order[n_val_unseen:])
    local = local_labels(data.seen_labels, data.seen_class_ids)

    unseen_rows = np.isin(local, val_unseen)
    remaining = np.flatnonzero(~unseen_rows)
    n_holdout = int(math.ceil(seen_fraction * remaining.size))
    if remaining.size - n_holdout < 1 or n_holdout < 1:
        raise DataError(f"Cannot hold out {seen_fraction:.0%} of {remaining.size} seen examples")
    shuffled = remaining[rng.permutation(remaining.size)]
    holdout, kept = np.sort(shuffled[:n_holdout]), np.sort(shuffled[n_holdout:])

    return ZslDataset(
        seen_features=data.seen_features[kept],
        seen_labels=local[kept],
        unseen_features=data.seen_features[unseen_rows],
        unseen_labels=local[unseen_rows],
        attributes=data.attributes[list(data.seen_class_ids)],
        seen_class_ids=tuple(int(c) for c in val_seen),
        unseen_class_ids=tuple(int(c) for c in val_unseen),
        test_seen_features=data.seen_features[holdout],
        test_seen_labels=local[holdout],
    )


def expand_grid(base: TrainConfig, grid: Dict[str, Sequence[Any]]) -> List[TrainConfig]:
    """Cartesian product of the grid's values applied to a base config, in key order."""
    names = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(grid) - names)
    if unknown:
        raise ConfigurationError(f"Unknown grid keys: {', '.join(unknown)}")
    keys = list(grid)
    if any(len(grid[k]) == 0 for k in keys):
        raise ConfigurationError("Grid values must be non-empty")
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]


def _fit_model(cfg: TrainConfig, data: ZslDataset):
    return train(cfg, data)[0]


def cross_validate(
    cfg_grid: Sequence[TrainConfig],
    data: ZslDataset,
    holdout_fractions: Tuple[float, float] = (0.1, 0.1),
    seed: int = 0,
    fit: Callable[[TrainConfig, ZslDataset], Any] = _fit_model,
    evaluate: Callable[..., EvalReport] = gzsl_eval,
) -> Tuple[TrainConfig, List[Dict[str, Any]]]:
    """Pick the config with the best validation GZSL-H.

    Ties are broken by lower gamma, then lower lr, then grid order.
    """
    if not cfg_grid:
        raise ConfigurationError("Empty config grid")
    val_data = validation_split(data, holdout_fractions, Rng(seed))
    table = []
    for index, cfg in enumerate(cfg_grid):
        model = fit(cfg, val_data)
        report = evaluate(model, val_data, cfg.logit_config())
        table.append({"index": index, "config": cfg.to_dict(), **report.csv_row()})
        logger.info(f"Config {index}: validation H={report.gzsl_h}")

    def rank(row):
        cfg = cfg_grid[row["index"]]
        return (-(row["gzsl_h"] or 0.0), cfg.gamma, cfg.lr, row["index"])

    best = min(table, key=rank)
    return cfg_grid[best["index"]], table


ABLATION_VARIANTS = ("ns_an_cn", "ns_an", "dot_standardized")
ABLATION_COMPARISONS = (("ns_an_cn", "ns_an"), ("ns_an", "dot_standardized"), ("ns_an_cn", "dot_standardized"))


def ablation_variant(base: TrainConfig, name: str, seed: int) -> TrainConfig:
    if name == "ns_an_cn":
        return replace(base, seed=seed, logit_mode="normalize_scale", attribute_preproc="an", class_norm=True)
    if name == "ns_an":
        return replace(base, seed=seed, logit_mode="normalize_scale", attribute_preproc="an", class_norm=False)
    if name == "dot_standardized":
        return replace(base, seed=seed, logit_mode="dot", attribute_preproc="standardize", class_norm=False)
    raise ConfigurationError(f"Unknown ablation variant '{name}'")


def paired_sign_test(better: Sequence[float], worse: Sequence[float]) -> Dict[str, Any]:
    """One-sided sign test that `better` exceeds `worse` on paired runs; ties are dropped."""
    diffs = np.asarray(better) - np.asarray(worse)
    wins, losses = int(np.sum(diffs > 0)), int(np.sum(diffs < 0))
    p_value = stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return {"wins": wins, "losses": losses, "ties": int(diffs.size - wins - losses), "p_value": float(p_value)}


def ablation_study(
    seeds: Sequence[int],
    base_cfg: TrainConfig,
    data_factory: Callable[[int], ZslDataset],
) -> Dict[str, Any]:
    """Seed-paired GZSL-H of the normalization variants with sign tests between them."""
    per_seed: Dict[str, List[float]] = {name: [] for name in ABLATION_VARIANTS}
    for seed in seeds:
        data = data_factory(seed)
        for name in ABLATION_VARIANTS:
            cfg = ablation_variant(base_cfg, name, seed)
            model, _ = train(cfg, data)
            per_seed[name].append(gzsl_eval(model, data).gzsl_h or 0.0)
        logger.info(f"Ablation seed {seed}: " + ", ".join(f"{n}={per_seed[n][-1]:.4f}" for n in ABLATION_VARIANTS))
    return {
        "seeds": list(seeds),
        "variants": {name: {"gzsl_h": values, "mean": float(np.mean(values))} for name, values in per_seed.items()},
        "comparisons": [
            {"better": a, "worse": b, **paired_sign_test(per_seed[a], per_seed[b])} for a, b in ABLATION_COMPARISONS
        ],
    }
