"""Configuration settings and the experiment-config schema."""

import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Optional, Tuple

from errors import ConfigurationError

# Process configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
DEFAULT_OUTPUT_FORMAT = os.getenv("ZSL_OUTPUT_FORMAT", "json")

# Server Configuration
DEFAULT_PORT = int(os.getenv("PORT", "8080"))
DEFAULT_HOST = os.getenv("HOST", "0.0.0.0")

# Numerical constants
CLASS_NORM_EPS = 1e-5
CLASS_NORM_MOMENTUM = 0.1
SEEN_SCALE_GRID = (1.0, 0.95, 0.9, 0.85, 0.8)
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

INIT_KINDS = (
    "xavier_fan_in",
    "xavier_fan_out",
    "kaiming_fan_in",
    "kaiming_fan_out",
    "cn_output",
    "linear_corrected",
)


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("true", "1", "yes", "on"):
        return True
    if value in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{raw}'")


def _parse_optional_int(raw: str) -> Optional[int]:
    value = raw.strip()
    if value.lower() in ("", "none"):
        return None
    return int(value)


def _list_of(item: Callable[[str], Any]) -> Callable[[str], Tuple[Any, ...]]:
    def parse(raw: str) -> Tuple[Any, ...]:
        return tuple(item(part.strip()) for part in raw.split(",") if part.strip())

    return parse


@dataclass(frozen=True)
class ConfigKey:
    """One accepted experiment-config key."""

    name: str
    parser: Callable[[str], Any]
    default: Any
    help: str
    section: str
    choices: Optional[Tuple[str, ...]] = None

    def parse(self, raw: str) -> Any:
        try:
            value = self.parser(raw)
        except ValueError as e:
            raise ConfigurationError(f"Invalid value for '{self.name}': {e}")
        if self.choices is not None and value not in self.choices:
            raise ConfigurationError(
                f"Invalid value for '{self.name}': '{value}' is not one of {', '.join(self.choices)}"
            )
        return value

    def render_default(self) -> str:
        if self.default is None:
            return ""
        if isinstance(self.default, bool):
            return "true" if self.default else "false"
        if isinstance(self.default, tuple):
            return ",".join(str(v) for v in self.default)
        return str(self.default)


def _key(name, parser, default, help, section, choices=None) -> ConfigKey:
    return ConfigKey(name=name, parser=parser, default=default, help=help, section=section, choices=choices)


CONFIG_SCHEMA: Tuple[ConfigKey, ...] = (
    _key("seed", _parse_optional_int, None, "random seed; required by stochastic commands", "general"),
    # Attribute embedder
    _key("n_hidden_layers", int, 2, "number of body layers of the attribute embedder", "model"),
    _key("hidden_dim", int, 2048, "hidden dimension d_h of the embedder body", "model"),
    _key("class_norm", _parse_bool, True, "class-wise standardization before the output projection", "model"),
    _key("dynamic_norm", _parse_bool, False, "divide hidden representations by the batch mean squared norm", "model"),
    _key("dynamic_norm_sqrt", _parse_bool, False, "use the square root of the mean squared norm in dynamic normalization", "model"),
    _key("body_init", str, "kaiming_fan_in", "initialization of body layers", "model", INIT_KINDS[:4]),
    _key("output_init", str, "auto", "initialization of the output projection (auto: cn_output with class_norm, else xavier_fan_out)", "model", ("auto",) + INIT_KINDS),
    _key("init_distribution", str, "uniform", "distribution of initial weights", "model", ("uniform", "normal")),
    _key("cn_momentum", float, CLASS_NORM_MOMENTUM, "momentum of the class-standardization running statistics", "model"),
    _key("cn_eps", float, CLASS_NORM_EPS, "stability epsilon of class standardization", "model"),
    # Logits
    _key("logit_mode", str, "normalize_scale", "logit computation", "logits", ("normalize_scale", "dot")),
    _key("gamma", float, 5.0, "normalize+scale scaling factor", "logits"),
    _key("seen_scale", float, 1.0, "evaluation-time multiplier of seen-class logits", "logits"),
    _key("scale_grid", _list_of(float), SEEN_SCALE_GRID, "seen-scale grid for sweeps and AUSUC", "logits"),
    _key("additive_calibration", _parse_bool, False, "calibrate seen logits additively instead of multiplicatively in AUSUC", "logits"),
    # Training
    _key("attribute_preproc", str, "an", "attribute preprocessing", "training", ("an", "standardize", "none")),
    _key("batch_size", int, 128, "feature minibatch size", "training"),
    _key("epochs", int, 50, "training epochs", "training"),
    _key("lr", float, 0.0005, "learning rate", "training"),
    _key("entropy_weight", float, 0.001, "weight of the negative-entropy regularizer", "training"),
    _key("optimizer", str, "adam", "optimizer", "training", ("adam", "sgd")),
    _key("momentum", float, 0.9, "SGD momentum", "training"),
    _key("clip_norm", float, 0.0, "global gradient-norm clipping threshold (0 disables)", "training"),
    _key("lr_decay", float, 1.0, "learning-rate multiplier applied after each task", "training"),
    _key("holdout_unseen_fraction", float, 0.1, "fraction of seen classes used as validation-unseen classes", "training"),
    _key("holdout_seen_fraction", float, 0.1, "fraction of remaining seen examples used as validation-seen data", "training"),
    _key("zsl_cross_validate", _parse_bool, False, "select gamma and lr on a validation split before training", "training"),
    _key("cv_gamma", _list_of(float), (3.0, 5.0, 7.0), "gamma grid of ZSL cross-validation", "training"),
    # Synthetic data
    _key("n_seen", int, 20, "number of seen classes", "synthetic"),
    _key("n_unseen", int, 5, "number of unseen classes", "synthetic"),
    _key("attr_dim", int, 32, "attribute dimension d_a", "synthetic"),
    _key("feat_dim", int, 128, "feature dimension d_z", "synthetic"),
    _key("n_per_class", int, 50, "examples per class", "synthetic"),
    _key("attr_model", str, "gaussian", "attribute distribution", "synthetic", ("gaussian", "lognormal")),
    _key("noise", float, 0.5, "feature noise standard deviation", "synthetic"),
    _key("test_fraction", float, 0.2, "fraction of each class held out as test data", "synthetic"),
    # Variance lab
    _key("cosine_dims", _list_of(int), (32, 64, 128, 256, 512, 1024, 2048, 4096, 8192), "dimensions of the cosine experiment", "variance-lab"),
    _key("cosine_gammas", _list_of(float), (1.0, 5.0), "gamma values of the cosine experiment", "variance-lab"),
    _key("cosine_trials", int, 100000, "Monte-Carlo trials per cosine setting", "variance-lab"),
    _key("embedder_trials", int, 10000, "weight-resampling trials per embedder setting", "variance-lab"),
    _key("lab_classes", int, 20, "number of classes in embedder experiments", "variance-lab"),
    _key("lab_attr_dim", int, 64, "attribute dimension in embedder experiments", "variance-lab"),
    _key("lab_hidden_dim", int, 64, "hidden dimension in embedder experiments", "variance-lab"),
    _key("lab_feat_dim", int, 256, "feature dimension in embedder experiments", "variance-lab"),
    _key("feature_variance", float, 1.0, "per-coordinate feature variance s^z", "variance-lab"),
    _key("workers", int, 1, "parallel Monte-Carlo workers", "variance-lab"),
    # Smoothness probe
    _key("probe_batches", int, 10, "number of probe batches", "probe"),
    _key("probe_batch_size", int, 256, "probe batch size", "probe"),
    _key("probe_train_steps", int, 2500, "training steps before probing", "probe"),
    _key("probe_lr", float, 0.0001, "learning rate of the probed models", "probe"),
    _key("perturb_attributes", _parse_bool, False, "also perturb attributes when probing", "probe"),
    # Continual ZSL
    _key("n_tasks", int, 10, "number of tasks", "czsl"),
    _key("task_sizes", _list_of(int), (), "explicit classes per task (empty: even split)", "czsl"),
    _key("czsl_method", str, "both", "baseline to run", "czsl", ("sequential", "multi_task", "both")),
    _key("czsl_epochs", int, 5, "epochs per task", "czsl"),
    _key("czsl_optimizer", str, "sgd", "optimizer for continual runs", "czsl", ("adam", "sgd")),
    _key("czsl_lr_decay", float, 0.9, "learning-rate decay after each task", "czsl"),
    _key("czsl_cross_validate", _parse_bool, False, "grid-search on the first tasks, then train on the rest", "czsl"),
    _key("n_cv_tasks", int, 3, "tasks used for grid search", "czsl"),
    _key("cv_lr", _list_of(float), (0.001, 0.005), "learning-rate grid", "czsl"),
    _key("cv_momentum", _list_of(float), (0.9, 0.95), "momentum grid", "czsl"),
    _key("cv_clip", _list_of(float), (10.0, 100.0), "gradient clipping grid", "czsl"),
    _key("cv_distribution", _list_of(str), ("uniform", "normal"), "initial weight distribution grid", "czsl"),
    # Ablation
    _key("ablation_seeds", int, 20, "number of paired seeds in the ablation study", "ablation"),
    _key("ablation_hidden_dim", int, 256, "hidden dimension of the embedders trained in the ablation study", "ablation"),
)

_SCHEMA_BY_NAME: Dict[str, ConfigKey] = {key.name: key for key in CONFIG_SCHEMA}


def find_key(name: str) -> ConfigKey:
    """Look up a schema key, rejecting unknown names."""
    try:
        return _SCHEMA_BY_NAME[name]
    except KeyError:
        raise ConfigurationError(f"Unknown config key '{name}'")


def schema_defaults() -> Dict[str, Any]:
    """Return a fresh settings dict holding every schema default."""
    return {key.name: key.default for key in CONFIG_SCHEMA}


def merge_settings(base: Dict[str, Any], overrides: Iterable[Tuple[str, Any]]) -> Dict[str, Any]:
    """Apply overrides on top of base settings.

    String values are parsed through the schema; other values are taken as-is.
    """
    merged = dict(base)
    for name, value in overrides:
        key = find_key(name)
        merged[name] = key.parse(value) if isinstance(value, str) else value
    return merged


def render_config(settings: Dict[str, Any]) -> str:
    """Render settings as key=value text, grouped by section."""
    lines = []
    section = None
    for key in CONFIG_SCHEMA:
        if key.section != section:
            section = key.section
            if lines:
                lines.append("")
            lines.append(f"# {section}")
        rendered = ConfigKey(key.name, key.parser, settings.get(key.name), key.help, key.section).render_default()
        lines.append(f"{key.name}={rendered}")
    return "\n".join(lines) + "\n"


def require_seed(settings: Dict[str, Any]) -> int:
    """Stochastic commands have no wall-clock default seed."""
    seed = settings.get("seed")
    if seed is None:
        raise ConfigurationError("This command is stochastic and requires an explicit seed")
    return int(seed)
