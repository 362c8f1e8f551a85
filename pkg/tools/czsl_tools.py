"""Continual ZSL tools."""

import logging
from dataclasses import replace
from typing import Any, Dict

from config import require_seed
from models import TrainConfig
from services.core_math import Rng
from services.czsl_service import czsl_cross_validate, czsl_metrics, run_sequence, split_tasks
from services.data_io import load_pool
from services.zsl_service import expand_grid

logger = logging.getLogger(__name__)


def continual_config(settings: Dict[str, Any]) -> TrainConfig:
    """Training config of a continual run: per-task epochs, optimizer and lr decay."""
    return replace(
        TrainConfig.from_settings(settings),
        epochs=settings["czsl_epochs"],
        optimizer=settings["czsl_optimizer"],
        lr_decay=settings["czsl_lr_decay"],
    )


class CzslTools:
    """Container class for continual ZSL tools."""

    @staticmethod
    def czsl(settings: Dict[str, Any], data_dir: str) -> Dict[str, Any]:
        """Split a dataset into tasks and run the Sequential and/or Multi-Task baselines.

        Args:
            settings: Merged experiment settings (czsl section and seed)
            data_dir: Dataset directory; its seen/unseen split is ignored

        Returns:
            Task split, per-method accuracy matrices and CZSL metrics
        """
        seed = require_seed(settings)
        logger.info(f">>> Tool: 'czsl' called with n_tasks={settings['n_tasks']}, method='{settings['czsl_method']}'")
        pool, _, _ = load_pool(data_dir)
        seq = split_tasks(pool, settings["n_tasks"], settings["task_sizes"] or None, Rng(seed))
        methods = ("sequential", "multi_task") if settings["czsl_method"] == "both" else (settings["czsl_method"],)
        cfg = continual_config(settings)
        result: Dict[str, Any] = {"tasks": [list(task) for task in seq.tasks]}

        if settings["czsl_cross_validate"]:
            grid = expand_grid(cfg, {
                "lr": settings["cv_lr"],
                "momentum": settings["cv_momentum"],
                "clip_norm": settings["cv_clip"],
                "init_distribution": settings["cv_distribution"],
            })
            cfg, table, seq = czsl_cross_validate(grid, seq, settings["n_cv_tasks"], methods[0], settings["scale_grid"])
            result["cross_validation"] = {"table": table, "best": cfg.to_dict(), "remaining_tasks": seq.n_tasks}

        result["methods"] = {}
        result["rows"] = []
        for method in methods:
            matrix = run_sequence(method, seq, cfg, settings["scale_grid"])
            metrics = czsl_metrics(matrix, allow_partial=True)
            result["methods"][method] = {"matrix": matrix.to_dict(), "metrics": metrics.to_dict()}
            result["rows"].extend(matrix.long_rows())
        return result
