"""Data models shared by the services, tools and entry points."""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from config import CLASS_NORM_EPS, CLASS_NORM_MOMENTUM, INIT_KINDS
from errors import ConfigurationError, DataError, DimensionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StatSummary:
    """Population moments of a vector.

    When the variance is zero, skewness and excess kurtosis are reported as 0
    and `degenerate` is set.
    """

    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    n: int
    degenerate: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class MonteCarloEstimate(NamedTuple):
    mean: float
    variance: float
    stderr_of_variance: float
    trials: int


@dataclass(frozen=True)
class InitScheme:
    """Weight initialization scheme: target variance rule plus sampling distribution."""

    kind: str
    distribution: str = "uniform"

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ConfigurationError(f"Unknown init scheme '{self.kind}'")
        if self.distribution not in ("uniform", "normal"):
            raise ConfigurationError(f"Unknown init distribution '{self.distribution}'")

    @property
    def needs_extra_dim(self) -> bool:
        return self.kind in ("cn_output", "linear_corrected")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str
    init: InitScheme

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise DimensionError(f"Layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ("relu", "identity"):
            raise ConfigurationError(f"Unknown activation '{self.activation}'")


@dataclass(frozen=True)
class EmbedderSpec:
    """Architecture of the attribute embedder P = V . S . H."""

    attr_dim: int
    feat_dim: int
    hidden_dim: int = 2048
    n_hidden_layers: int = 2
    class_norm: bool = True
    dynamic_norm: bool = False
    dynamic_norm_sqrt: bool = False
    body_init: str = "kaiming_fan_in"
    output_init: str = "auto"
    distribution: str = "uniform"
    momentum: float = CLASS_NORM_MOMENTUM
    eps: float = CLASS_NORM_EPS

    def __post_init__(self):
        if min(self.attr_dim, self.feat_dim, self.hidden_dim) < 1 or self.n_hidden_layers < 0:
            raise DimensionError(
                f"Invalid embedder dims: attr={self.attr_dim}, feat={self.feat_dim}, "
                f"hidden={self.hidden_dim}, layers={self.n_hidden_layers}"
            )
        if self.class_norm and self.dynamic_norm:
            raise ConfigurationError("class_norm and dynamic_norm are mutually exclusive")
        if not 0.0 < self.momentum <= 1.0:
            raise ConfigurationError(f"Running-statistics momentum must be in (0, 1], got {self.momentum}")
        if self.eps <= 0:
            raise ConfigurationError(f"Stability epsilon must be positive, got {self.eps}")

    @property
    def body_out_dim(self) -> int:
        return self.hidden_dim if self.n_hidden_layers > 0 else self.attr_dim

    def layer_specs(self) -> List[LayerSpec]:
        dims = [self.attr_dim] + [self.hidden_dim] * self.n_hidden_layers
        scheme = InitScheme(self.body_init, self.distribution)
        specs = []
        for i in range(self.n_hidden_layers):
            activation = "relu" if i < self.n_hidden_layers - 1 else "identity"
            specs.append(LayerSpec(dims[i], dims[i + 1], activation, scheme))
        return specs

    def output_scheme(self) -> InitScheme:
        kind = self.output_init
        if kind == "auto":
            kind = "cn_output" if self.class_norm else "xavier_fan_out"
        return InitScheme(kind, self.distribution)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EmbedderSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass(frozen=True)
class LogitConfig:
    mode: str = "normalize_scale"
    gamma: float = 5.0
    seen_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("dot", "normalize_scale"):
            raise ConfigurationError(f"Unknown logit mode '{self.mode}'")
        if self.mode == "normalize_scale" and not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ConfigurationError(f"gamma must be finite and positive, got {self.gamma}")
        if not 0.0 < self.seen_scale <= 1.0:
            raise ConfigurationError(f"seen_scale must be in (0, 1], got {self.seen_scale}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run (ZSL or a continual sequence)."""

    batch_size: int = 128
    epochs: int = 50
    lr: float = 0.0005
    hidden_dim: int = 2048
    n_hidden_layers: int = 2
    gamma: float = 5.0
    entropy_weight: float = 0.001
    attribute_preproc: str = "an"
    class_norm: bool = True
    body_init: str = "kaiming_fan_in"
    output_init: str = "auto"
    init_distribution: str = "uniform"
    seed: int = 0
    logit_mode: str = "normalize_scale"
    dynamic_norm: bool = False
    dynamic_norm_sqrt: bool = False
    optimizer: str = "adam"
    momentum: float = 0.9
    clip_norm: float = 0.0
    lr_decay: float = 1.0
    cn_momentum: float = CLASS_NORM_MOMENTUM
    cn_eps: float = CLASS_NORM_EPS

    def __post_init__(self):
        if self.batch_size < 1 or self.hidden_dim < 1 or self.epochs < 0 or self.n_hidden_layers < 0:
            raise ConfigurationError(
                f"Counts must be positive: batch_size={self.batch_size}, epochs={self.epochs}, "
                f"hidden_dim={self.hidden_dim}, n_hidden_layers={self.n_hidden_layers}"
            )
        if self.entropy_weight < 0:
            raise ConfigurationError(f"entropy_weight must be >= 0, got {self.entropy_weight}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.attribute_preproc not in ("an", "standardize", "none"):
            raise ConfigurationError(f"Unknown attribute preprocessing '{self.attribute_preproc}'")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"Unknown optimizer '{self.optimizer}'")
        if self.clip_norm < 0:
            raise ConfigurationError(f"clip_norm must be >= 0, got {self.clip_norm}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigurationError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        self.logit_config()

    def embedder_spec(self, attr_dim: int, feat_dim: int) -> EmbedderSpec:
        return EmbedderSpec(
            attr_dim=attr_dim,
            feat_dim=feat_dim,
            hidden_dim=self.hidden_dim,
            n_hidden_layers=self.n_hidden_layers,
            class_norm=self.class_norm,
            dynamic_norm=self.dynamic_norm,
            dynamic_norm_sqrt=self.dynamic_norm_sqrt,
            body_init=self.body_init,
            output_init=self.output_init,
            distribution=self.init_distribution,
            momentum=self.cn_momentum,
            eps=self.cn_eps,
        )

    def logit_config(self, seen_scale: float = 1.0) -> LogitConfig:
        return LogitConfig(mode=self.logit_mode, gamma=self.gamma, seen_scale=seen_scale)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> "TrainConfig":
        """Build a config from a settings dict keyed by the config schema."""
        names = {f.name for f in fields(cls)}
        values = {k: v for k, v in settings.items() if k in names and v is not None}
        return cls(**values)


@dataclass
class ClassPool:
    """Train/test features of every class plus the class-attribute matrix.

    Labels are row indices into `attributes`.
    """

    train_features: np.ndarray
    train_labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    attributes: np.ndarray

    def __post_init__(self):
        n_classes = self.attributes.shape[0]
        for name, features, labels in (
            ("train", self.train_features, self.train_labels),
            ("test", self.test_features, self.test_labels),
        ):
            if features.ndim != 2 or labels.shape != (features.shape[0],):
                raise DataError(f"{name} features {features.shape} do not match labels {labels.shape}")
            if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
                raise DataError(f"{name} labels reference classes outside the {n_classes} attribute rows")
        if self.train_features.shape[1] != self.test_features.shape[1]:
            raise DataError("train and test feature dimensions differ")

    @property
    def n_classes(self) -> int:
        return self.attributes.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.train_features.shape[1]


def _take(features: np.ndarray, labels: np.ndarray, class_ids: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    mask = np.isin(labels, np.asarray(class_ids, dtype=np.int64))
    return features[mask], labels[mask]


@dataclass
class ZslDataset:
    """Seen/unseen split of a ZSL problem.

    `seen_features` is training data; GZSL-S is measured on the held-out
    `test_seen_*` arrays when present, otherwise on `seen_features`.
    """

    seen_features: np.ndarray
    seen_labels: np.ndarray
    unseen_features: np.ndarray
    unseen_labels: np.ndarray
    attributes: np.ndarray
    seen_class_ids: Tuple[int, ...]
    unseen_class_ids: Tuple[int, ...]
    test_seen_features: Optional[np.ndarray] = None
    test_seen_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.seen_class_ids = tuple(int(c) for c in self.seen_class_ids)
        self.unseen_class_ids = tuple(int(c) for c in self.unseen_class_ids)
        self.validate()

    def validate(self) -> None:
        seen, unseen = set(self.seen_class_ids), set(self.unseen_class_ids)
        if seen & unseen:
            raise DataError(f"Seen and unseen class ids overlap: {sorted(seen & unseen)}")
        if len(seen) != len(self.seen_class_ids) or len(unseen) != len(self.unseen_class_ids):
            raise DataError("Duplicate class ids in split")
        if seen | unseen != set(range(self.attributes.shape[0])):
            raise DataError(
                f"Split covers {len(seen | unseen)} classes but there are {self.attributes.shape[0]} attribute rows"
            )
        checks = [
            ("seen", self.seen_features, self.seen_labels, seen),
            ("unseen", self.unseen_features, self.unseen_labels, unseen),
        ]
        if self.test_seen_features is not None:
            checks.append(("test-seen", self.test_seen_features, self.test_seen_labels, seen))
        for name, features, labels, allowed in checks:
            if features.ndim != 2 or labels is None or labels.shape != (features.shape[0],):
                raise DataError(f"{name} features and labels have inconsistent shapes")
            stray = set(np.unique(labels).tolist()) - allowed
            if stray:
                raise DataError(f"{name} labels {sorted(stray)} are not {name.split('-')[-1]} class ids")

    @property
    def n_classes(self) -> int:
        return self.attributes.shape[0]

    @property
    def attr_dim(self) -> int:
        return self.attributes.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.seen_features.shape[1]

    def seen_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_classes, dtype=bool)
        mask[list(self.seen_class_ids)] = True
        return mask

    def seen_test(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.test_seen_features is not None:
            return self.test_seen_features, self.test_seen_labels
        return self.seen_features, self.seen_labels

    @classmethod
    def from_pool(cls, pool: ClassPool, seen_ids: Sequence[int], unseen_ids: Sequence[int]) -> "ZslDataset":
        """Seen train data from the pool's train split; seen and unseen test data from its test split."""
        seen_x, seen_y = _take(pool.train_features, pool.train_labels, seen_ids)
        test_x, test_y = _take(pool.test_features, pool.test_labels, seen_ids)
        unseen_x, unseen_y = _take(pool.test_features, pool.test_labels, unseen_ids)
        return cls(
            seen_features=seen_x,
            seen_labels=seen_y,
            unseen_features=unseen_x,
            unseen_labels=unseen_y,
            attributes=pool.attributes,
            seen_class_ids=tuple(seen_ids),
            unseen_class_ids=tuple(unseen_ids),
            test_seen_features=test_x,
            test_seen_labels=test_y,
        )


@dataclass
class EvalReport:
    """Generalized ZSL evaluation at one seen scale.

    `gzsl_u`, `gzsl_h` and `ausuc` are None when there is no unseen test data.
    """

    gzsl_u: Optional[float]
    gzsl_s: float
    gzsl_h: Optional[float]
    ausuc: Optional[float]
    per_class_accuracy: Dict[int, float]
    seen_scale_used: float
    joint_accuracy: float

    def to_dict(self) -> Dict[str, Any]:
        result = asdict(self)
        result["per_class_accuracy"] = {str(k): v for k, v in sorted(self.per_class_accuracy.items())}
        return result

    def csv_row(self) -> Dict[str, Any]:
        return {
            "gzsl_u": self.gzsl_u,
            "gzsl_s": self.gzsl_s,
            "gzsl_h": self.gzsl_h,
            "ausuc": self.ausuc,
            "joint_accuracy": self.joint_accuracy,
            "seen_scale": self.seen_scale_used,
        }


@dataclass
class VarianceReport:
    """Closed-form prediction versus Monte-Carlo estimate of a variance."""

    setting: str
    predicted: float
    empirical_mean: float
    empirical_std: float
    trials: int
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.empirical_std < 0 or self.trials < 2:
            raise DataError(f"Invalid variance report: std={self.empirical_std}, trials={self.trials}")

    def within_tolerance(self, relative: float = 0.1, n_stderr: float = 4.0) -> bool:
        gap = abs(self.empirical_mean - self.predicted)
        return gap <= max(relative * self.predicted, n_stderr * self.empirical_std)

    def to_dict(self) -> Dict[str, Any]:
        result = asdict(self)
        result["within_tolerance"] = self.within_tolerance()
        return result

    def csv_row(self) -> Dict[str, Any]:
        return {
            "setting": self.setting,
            "d": self.params.get("d"),
            "gamma": self.params.get("gamma"),
            "predicted": self.predicted,
            "empirical": self.empirical_mean,
            "stderr": self.empirical_std,
            "trials": self.trials,
        }


@dataclass
class ProbeTrace:
    kind: str
    iterations: List[int] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    def append(self, iteration: int, value: float) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise DataError(f"Probe iterations must increase: {iteration} after {self.iterations[-1]}")
        if not np.isfinite(value):
            raise DataError(f"Non-finite probe value at iteration {iteration}")
        self.iterations.append(int(iteration))
        self.values.append(float(value))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainingLog:
    entries: List[Dict[str, Any]] = field(default_factory=list)

    def record(self, **entry: Any) -> None:
        self.entries.append(entry)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in self.entries)


@dataclass
class AccuracyMatrix:
    """Per-timestep GZSL records of a continual run plus per-task test accuracies.

    `task_accuracy[t][tau]` is the accuracy on task tau's test data after
    training on task t (lower triangle filled, zero-based).
    """

    method: str
    records: List[EvalReport]
    task_accuracy: np.ndarray

    @property
    def n_tasks(self) -> int:
        return len(self.records)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "records": [r.to_dict() for r in self.records],
            "task_accuracy": [
                [float(v) for v in row[: t + 1]] for t, row in enumerate(self.task_accuracy)
            ],
        }

    def long_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for t, record in enumerate(self.records, start=1):
            for metric in ("gzsl_s", "gzsl_u", "gzsl_h", "ausuc", "joint_accuracy"):
                value = getattr(record, metric)
                if value is not None:
                    rows.append({"method": self.method, "timestep": t, "metric": metric, "value": value})
        return rows


@dataclass(frozen=True)
class CzslMetrics:
    mSA: float
    mJA: float
    mUA: Optional[float] = None
    mH: Optional[float] = None
    mAUC: Optional[float] = None
    forgetting: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        result = asdict(self)
        result["forgetting_definition"] = "mean over tasks of (historical max accuracy - final accuracy)"
        return result
