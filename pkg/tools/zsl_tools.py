"""ZSL training and evaluation tools."""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Optional

from config import require_seed
from models import TrainConfig
from services.core_math import Rng
from services.data_io import load_checkpoint, load_dataset, save_checkpoint
from services.synthetic import generate_synthetic_zsl
from services.variance_lab import LogitVarianceProbe
from services.zsl_service import (
    ablation_study,
    cross_validate,
    expand_grid,
    gzsl_eval,
    sweep_seen_scale,
    train,
    train_accuracy,
)

logger = logging.getLogger(__name__)


def _logit_config(model, settings: Dict[str, Any]):
    return replace(model.logit_config, seen_scale=settings["seen_scale"])


class ZslTools:
    """Container class for ZSL training and evaluation tools."""

    @staticmethod
    def train(
        settings: Dict[str, Any],
        data_dir: str,
        checkpoint: Optional[str] = None,
        log_path: Optional[str] = None,
    ) -> Dict[str, Any]:
        """Train an attribute embedder on the seen classes and evaluate it.

        Args:
            settings: Merged experiment settings
            data_dir: Dataset directory
            checkpoint: Optional path for the trained model
            log_path: Optional JSON-lines training log path

        Returns:
            Training summary with the generalized evaluation report
        """
        require_seed(settings)
        logger.info(f">>> Tool: 'train' called with data_dir='{data_dir}', seed={settings['seed']}")
        cfg = TrainConfig.from_settings(settings)
        data = load_dataset(data_dir)
        cross_validation = None
        if settings["zsl_cross_validate"]:
            grid = expand_grid(cfg, {"gamma": settings["cv_gamma"], "lr": settings["cv_lr"]})
            fractions = (settings["holdout_unseen_fraction"], settings["holdout_seen_fraction"])
            cfg, table = cross_validate(grid, data, fractions, settings["seed"])
            cross_validation = {"table": table, "best": cfg.to_dict()}
        probe = LogitVarianceProbe()
        model, log = train(cfg, data, probes=[probe])
        report = gzsl_eval(model, data, _logit_config(model, settings), settings["scale_grid"], settings["additive_calibration"])
        if checkpoint:
            save_checkpoint(checkpoint, model)
        if log_path:
            Path(log_path).write_text(log.to_jsonl(), encoding="utf-8")
        values = probe.trace.values
        return {
            "train_config": cfg.to_dict(),
            "steps": len(values),
            "final_loss": log.entries[-1]["loss"] if log.entries else None,
            "train_accuracy": train_accuracy(model, data),
            "logit_variance": {"initial": values[0], "final": values[-1]} if values else None,
            "log": log.entries,
            "report": report.to_dict(),
            "checkpoint": checkpoint,
            "cross_validation": cross_validation,
        }

    @staticmethod
    def evaluate(settings: Dict[str, Any], data_dir: str, checkpoint: str) -> Dict[str, Any]:
        """Generalized ZSL evaluation of a saved model.

        Args:
            settings: Merged experiment settings (logits section)
            data_dir: Dataset directory
            checkpoint: Path written by 'train'

        Returns:
            The evaluation report
        """
        logger.info(f">>> Tool: 'eval' called with checkpoint='{checkpoint}'")
        model = load_checkpoint(checkpoint)
        data = load_dataset(data_dir)
        report = gzsl_eval(model, data, _logit_config(model, settings), settings["scale_grid"], settings["additive_calibration"])
        return report.to_dict()

    @staticmethod
    def sweep_seen_scale(settings: Dict[str, Any], data_dir: str, checkpoint: str) -> Dict[str, Any]:
        """GZSL-S/U/H of a saved model for every seen scale of the grid."""
        logger.info(f">>> Tool: 'sweep_seen_scale' called with grid={settings['scale_grid']}")
        model = load_checkpoint(checkpoint)
        data = load_dataset(data_dir)
        reports = sweep_seen_scale(model, data, settings["scale_grid"])
        return {"rows": [r.csv_row() for r in reports]}

    @staticmethod
    def ablate(settings: Dict[str, Any]) -> Dict[str, Any]:
        """Seed-paired normalization ablation on synthetic data.

        Args:
            settings: Merged experiment settings; seeds are seed .. seed + ablation_seeds - 1
                and every variant uses ablation_hidden_dim in place of hidden_dim

        Returns:
            Per-variant GZSL-H values and paired sign tests
        """
        first = require_seed(settings)
        seeds = list(range(first, first + settings["ablation_seeds"]))
        logger.info(f">>> Tool: 'ablate' called with {len(seeds)} seeds, hidden_dim={settings['ablation_hidden_dim']}")
        cfg = replace(TrainConfig.from_settings(settings), hidden_dim=settings["ablation_hidden_dim"])

        def data_factory(seed: int):
            return generate_synthetic_zsl(
                settings["n_seen"], settings["n_unseen"], settings["attr_dim"], settings["feat_dim"],
                settings["n_per_class"], settings["attr_model"], settings["noise"], Rng(seed),
                settings["test_fraction"],
            )

        return ablation_study(seeds, cfg, data_factory)
