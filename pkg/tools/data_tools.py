"""Dataset generation tools."""

import logging
from typing import Any, Dict

from config import require_seed
from services.core_math import Rng
from services.data_io import save_dataset
from services.synthetic import generate_synthetic_split

logger = logging.getLogger(__name__)


class DataTools:
    """Container class for dataset tools."""

    @staticmethod
    def synth(settings: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
        """Generate a synthetic ZSL dataset directory.

        Args:
            settings: Merged experiment settings (synthetic section and seed)
            out_dir: Directory receiving train/test feature files, attributes and split

        Returns:
            Summary of the generated dataset
        """
        seed = require_seed(settings)
        logger.info(f">>> Tool: 'synth' called with seed={seed}, out_dir='{out_dir}'")
        pool, seen, unseen = generate_synthetic_split(
            n_seen=settings["n_seen"],
            n_unseen=settings["n_unseen"],
            attr_dim=settings["attr_dim"],
            feat_dim=settings["feat_dim"],
            n_per_class=settings["n_per_class"],
            attr_model=settings["attr_model"],
            noise=settings["noise"],
            rng=Rng(seed),
            test_fraction=settings["test_fraction"],
        )
        save_dataset(out_dir, pool, seen, unseen)
        return {
            "directory": str(out_dir),
            "n_classes": pool.n_classes,
            "attr_dim": int(pool.attributes.shape[1]),
            "feat_dim": pool.feat_dim,
            "n_train": int(pool.train_features.shape[0]),
            "n_test": int(pool.test_features.shape[0]),
            "seen_class_ids": list(seen),
            "unseen_class_ids": list(unseen),
        }
