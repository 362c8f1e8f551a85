"""Variance-analysis, attribute-diagnostics and smoothness tools."""

import logging
from dataclasses import replace
from typing import Any, Dict, List, Optional

from config import INIT_KINDS, require_seed
from errors import ConfigurationError
from models import EmbedderSpec, InitScheme, TrainConfig
from services.core_math import Rng
from services.data_io import load_attributes, load_dataset
from services.norm_toolkit import init_variance, optimal_gamma, predicted_ns_variance
from services.variance_lab import attribute_diagnostics, compare_smoothness, prelogit_variance_experiment, synthetic_cosine_experiment

logger = logging.getLogger(__name__)

EXPERIMENTS = ("cosine", "prelogit", "all")


def prelogit_settings(settings: Dict[str, Any]) -> List[Dict[str, Any]]:
    """Embedder/attribute combinations checked against the pre-logit variance formulas."""
    dims = dict(
        attr_dim=settings["lab_attr_dim"],
        feat_dim=settings["lab_feat_dim"],
        hidden_dim=settings["lab_hidden_dim"],
        distribution=settings["init_distribution"],
    )
    linear = EmbedderSpec(n_hidden_layers=0, class_norm=False, output_init="xavier_fan_out", **dims)
    return [
        {"name": "linear_unit_norm", "spec": linear, "source": "unit_norm"},
        {"name": "linear_raw", "spec": linear, "source": "raw"},
        {"name": "linear_standardized_corrected", "spec": replace(linear, output_init="linear_corrected"), "source": "standardized"},
        {"name": "deep_class_norm", "spec": EmbedderSpec(n_hidden_layers=2, class_norm=True, **dims), "source": "unit_norm"},
        {
            "name": "deep_xavier",
            "spec": EmbedderSpec(n_hidden_layers=2, class_norm=False, body_init="xavier_fan_in", output_init="xavier_fan_out", **dims),
            "source": "unit_norm",
        },
    ]


class LabTools:
    """Container class for variance-analysis tools."""

    @staticmethod
    def gamma(nu: float, d_z: int, hidden_dim: int = 2048, attr_dim: int = 32) -> Dict[str, Any]:
        """Scale giving normalize+scale logits a target variance, plus initialization variances.

        Args:
            nu: Target logit variance
            d_z: Feature dimension
            hidden_dim: Hidden dimension for the initialization table
            attr_dim: Attribute dimension for the linear-corrected scheme

        Returns:
            gamma, the variance it predicts, and the variance of every init scheme
        """
        logger.info(f">>> Tool: 'gamma' called with nu={nu}, d_z={d_z}")
        value = optimal_gamma(nu, d_z)
        extra = {"cn_output": hidden_dim, "linear_corrected": attr_dim}
        return {
            "nu": nu,
            "d_z": d_z,
            "gamma": value,
            "predicted_variance": predicted_ns_variance(value, d_z),
            "init_variance": {
                kind: init_variance(InitScheme(kind), hidden_dim, d_z, extra.get(kind)) for kind in INIT_KINDS
            },
        }

    @staticmethod
    def variance_lab(settings: Dict[str, Any], experiment: str = "all") -> Dict[str, Any]:
        """Monte-Carlo validation of the logit and pre-logit variance formulas.

        Args:
            settings: Merged experiment settings (variance-lab section and seed)
            experiment: 'cosine', 'prelogit' or 'all'

        Returns:
            Variance reports (predicted, empirical, stderr) per setting
        """
        seed = require_seed(settings)
        if experiment not in EXPERIMENTS:
            raise ConfigurationError(f"Unknown experiment '{experiment}'; expected one of {', '.join(EXPERIMENTS)}")
        logger.info(f">>> Tool: 'variance_lab' called with experiment='{experiment}', seed={seed}")
        cosine_rng, prelogit_rng = Rng(seed).spawn(2)
        reports = []
        if experiment in ("cosine", "all"):
            gammas = settings["cosine_gammas"]
            for gamma, stream in zip(gammas, cosine_rng.spawn(len(gammas))):
                reports.extend(synthetic_cosine_experiment(settings["cosine_dims"], gamma, settings["cosine_trials"], stream))
        if experiment in ("prelogit", "all"):
            combos = prelogit_settings(settings)
            for combo, stream in zip(combos, prelogit_rng.spawn(len(combos))):
                report = prelogit_variance_experiment(
                    combo["spec"],
                    combo["source"],
                    settings["embedder_trials"],
                    stream,
                    n_classes=settings["lab_classes"],
                    feature_variance=settings["feature_variance"],
                    workers=settings["workers"],
                )
                report.setting = combo["name"]
                reports.append(report)
        return {"reports": [r.to_dict() for r in reports], "rows": [r.csv_row() for r in reports]}

    @staticmethod
    def attr_stats(attributes_path: Optional[str] = None, data_dir: Optional[str] = None) -> Dict[str, Any]:
        """Normality, correlation and squared-norm diagnostics of an attribute matrix.

        Args:
            attributes_path: Attribute CSV file
            data_dir: Dataset directory (used when no CSV path is given)

        Returns:
            Structured diagnostics report
        """
        logger.info(f">>> Tool: 'attr_stats' called with attributes='{attributes_path}', data_dir='{data_dir}'")
        if attributes_path:
            attributes = load_attributes(attributes_path)
        elif data_dir:
            attributes = load_dataset(data_dir).attributes
        else:
            raise ConfigurationError("attr-stats needs an attribute file or a dataset directory")
        return attribute_diagnostics(attributes)

    @staticmethod
    def probe_smoothness(settings: Dict[str, Any], data_dir: str) -> Dict[str, Any]:
        """Scaled gradient norm of a plain classifier, a ZSL embedder and a class-normalized ZSL embedder.

        Args:
            settings: Merged experiment settings (probe section and seed)
            data_dir: Dataset directory

        Returns:
            Probe value per model
        """
        require_seed(settings)
        logger.info(f">>> Tool: 'probe_smoothness' called with data_dir='{data_dir}'")
        cfg = replace(TrainConfig.from_settings(settings), lr=settings["probe_lr"], batch_size=settings["probe_batch_size"])
        return compare_smoothness(
            cfg,
            load_dataset(data_dir),
            settings["probe_train_steps"],
            settings["probe_batches"],
            settings["probe_batch_size"],
            settings["perturb_attributes"],
        )
