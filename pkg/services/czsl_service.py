"""Continual ZSL: task sequences, the Sequential and Multi-Task baselines and their metrics."""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import SEEN_SCALE_GRID
from errors import ConfigurationError, DataError, UndefinedMetricError
from models import AccuracyMatrix, ClassPool, CzslMetrics, TrainConfig, ZslDataset
from services.core_math import Rng
from services.zsl_service import ZslTrainer, expand_grid, gzsl_eval, mean_per_class_accuracy, steps_for

logger = logging.getLogger(__name__)

METHODS = ("sequential", "multi_task")


def _select(features: np.ndarray, labels: np.ndarray, class_ids: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    mask = np.isin(labels, np.asarray(class_ids, dtype=np.int64))
    return features[mask], labels[mask]


@dataclass
class TaskSequence:
    """A class pool split into disjoint tasks; `tasks[t]` holds the class ids of task t (zero-based)."""

    pool: ClassPool
    tasks: List[Tuple[int, ...]]

    def __post_init__(self):
        self.tasks = [tuple(int(c) for c in task) for task in self.tasks]
        flat = [c for task in self.tasks for c in task]
        if not self.tasks or any(not task for task in self.tasks):
            raise ConfigurationError("Every task needs at least one class")
        if len(flat) != len(set(flat)) or set(flat) != set(range(self.pool.n_classes)):
            raise DataError("Tasks must partition the class set")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def classes_upto(self, t: int) -> Tuple[int, ...]:
        return tuple(c for task in self.tasks[: t + 1] for c in task)

    def classes_after(self, t: int) -> Tuple[int, ...]:
        return tuple(c for task in self.tasks[t + 1:] for c in task)

    def train_data(self, class_ids: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        return _select(self.pool.train_features, self.pool.train_labels, class_ids)

    def task_test(self, t: int) -> Tuple[np.ndarray, np.ndarray]:
        return _select(self.pool.test_features, self.pool.test_labels, self.tasks[t])

    def dataset_at(self, t: int) -> ZslDataset:
        """GZSL view after task t: tasks up to t are seen, later tasks unseen."""
        return ZslDataset.from_pool(self.pool, self.classes_upto(t), self.classes_after(t))

    def subsequence(self, task_indices: Sequence[int]) -> "TaskSequence":
        """The given tasks over a pool restricted to their classes, relabeled 0..K'-1."""
        kept = sorted(c for t in task_indices for c in self.tasks[t])
        remap = np.full(self.pool.n_classes, -1, dtype=np.int64)
        remap[kept] = np.arange(len(kept))
        train_x, train_y = _select(self.pool.train_features, self.pool.train_labels, kept)
        test_x, test_y = _select(self.pool.test_features, self.pool.test_labels, kept)
        pool = ClassPool(
            train_features=train_x,
            train_labels=remap[train_y],
            test_features=test_x,
            test_labels=remap[test_y],
            attributes=self.pool.attributes[kept],
        )
        return TaskSequence(pool, [tuple(int(remap[c]) for c in self.tasks[t]) for t in task_indices])


def task_sizes(n_classes: int, n_tasks: int, sizes: Optional[Sequence[int]] = None) -> List[int]:
    """Explicit sizes, or an even split with the remainder spread over the last tasks."""
    if n_tasks < 1:
        raise ConfigurationError(f"Need at least one task, got {n_tasks}")
    if sizes:
        sizes = [int(s) for s in sizes]
        if len(sizes) != n_tasks or sum(sizes) != n_classes or min(sizes) < 1:
            raise ConfigurationError(f"Task sizes {sizes} do not split {n_classes} classes into {n_tasks} tasks")
        return sizes
    if n_tasks > n_classes:
        raise ConfigurationError(f"Cannot split {n_classes} classes into {n_tasks} tasks")
    base, remainder = divmod(n_classes, n_tasks)
    return [base] * (n_tasks - remainder) + [base + 1] * remainder


def split_tasks(pool: ClassPool, n_tasks: int, sizes: Optional[Sequence[int]] = None, rng: Optional[Rng] = None) -> TaskSequence:
    """Randomly assign classes to tasks; deterministic for a given stream."""
    if rng is None:
        raise ConfigurationError("split_tasks needs an explicit random stream")
    counts = task_sizes(pool.n_classes, n_tasks, sizes)
    order = rng.permutation(pool.n_classes)
    bounds = np.cumsum([0] + counts)
    tasks = [tuple(sorted(int(c) for c in order[bounds[i]:bounds[i + 1]])) for i in range(n_tasks)]
    logger.info(f"Split {pool.n_classes} classes into {n_tasks} tasks of sizes {counts}")
    return TaskSequence(pool, tasks)


def run_sequence(method: str, seq: TaskSequence, cfg: TrainConfig, scale_grid: Sequence[float] = SEEN_SCALE_GRID) -> AccuracyMatrix:
    """Train task by task, evaluating over the full class set after each task.

    Both methods get epochs x ceil(|D^t| / batch_size) updates on task t;
    multi_task draws its batches from all data seen so far.
    """
    if method not in METHODS:
        raise ConfigurationError(f"Unknown CZSL method '{method}'; expected one of {', '.join(METHODS)}")
    pool = seq.pool
    trainer = ZslTrainer(cfg, pool.attributes, pool.feat_dim)
    T = seq.n_tasks
    task_accuracy = np.zeros((T, T))
    records = []
    for t in range(T):
        task_x, _ = seq.train_data(seq.tasks[t])
        n_steps = steps_for(task_x.shape[0], cfg.batch_size, cfg.epochs)
        steps_per_epoch = max(1, math.ceil(task_x.shape[0] / cfg.batch_size))
        classes = seq.tasks[t] if method == "sequential" else seq.classes_upto(t)
        features, labels = seq.train_data(classes)
        trainer.fit(features, labels, classes, n_steps, steps_per_epoch)

        model = trainer.model()
        report = gzsl_eval(model, seq.dataset_at(t), scale_grid=scale_grid)
        records.append(report)
        for tau in range(t + 1):
            test_x, test_y = seq.task_test(tau)
            if test_y.size:
                predictions = np.argmax(model.class_logits(test_x, pool.attributes), axis=1)
                task_accuracy[t, tau] = mean_per_class_accuracy(predictions, test_y)
        logger.info(f"{method} task {t + 1}/{T}: S={report.gzsl_s:.4f} U={report.gzsl_u} H={report.gzsl_h}")
    return AccuracyMatrix(method=method, records=records, task_accuracy=task_accuracy)


def forgetting(per_task_acc: np.ndarray) -> float:
    """Mean over all but the last task of (best earlier accuracy - final accuracy)."""
    acc = np.asarray(per_task_acc, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[0] != acc.shape[1]:
        raise DataError(f"Per-task accuracies must be a square matrix, got shape {acc.shape}")
    T = acc.shape[0]
    if T < 2:
        raise UndefinedMetricError("Forgetting needs at least 2 tasks")
    drops = [acc[tau:T - 1, tau].max() - acc[T - 1, tau] for tau in range(T - 1)]
    return float(np.mean(drops))


def czsl_metrics(acc: AccuracyMatrix, allow_partial: bool = False) -> CzslMetrics:
    """mSA and mJA over all timesteps; mUA, mH and mAUC over all but the last."""
    records = acc.records
    T = len(records)
    if T == 0:
        raise DataError("Empty accuracy matrix")
    mean_seen = float(np.mean([r.gzsl_s for r in records]))
    mean_joint = float(np.mean([r.joint_accuracy for r in records]))
    if T < 2:
        if allow_partial:
            return CzslMetrics(mSA=mean_seen, mJA=mean_joint)
        raise UndefinedMetricError("mUA, mH and mAUC need at least 2 tasks")
    early = records[:-1]
    return CzslMetrics(
        mSA=mean_seen,
        mJA=mean_joint,
        mUA=float(np.mean([r.gzsl_u for r in early])),
        mH=float(np.mean([r.gzsl_h for r in early])),
        mAUC=float(np.mean([r.ausuc for r in early])),
        forgetting=forgetting(acc.task_accuracy),
    )


def czsl_cross_validate(
    grid: Sequence[TrainConfig],
    seq: TaskSequence,
    n_cv_tasks: int = 3,
    method: str = "sequential",
    scale_grid: Sequence[float] = SEEN_SCALE_GRID,
) -> Tuple[TrainConfig, List[Dict[str, Any]], TaskSequence]:
    """Grid-search on the first tasks by mean H, then discard them.

    Returns the winning config, the validation table and the remaining
    sequence, on which the caller trains a fresh model.
    """
    if not grid:
        raise ConfigurationError("Empty config grid")
    if n_cv_tasks < 2:
        raise ConfigurationError(f"Cross-validation needs at least 2 tasks, got {n_cv_tasks}")
    if seq.n_tasks <= n_cv_tasks:
        raise ConfigurationError(f"Sequence of {seq.n_tasks} tasks leaves none after {n_cv_tasks} validation tasks")
    cv_seq = seq.subsequence(range(n_cv_tasks))
    table = []
    for index, cfg in enumerate(grid):
        metrics = czsl_metrics(run_sequence(method, cv_seq, cfg, scale_grid))
        table.append({"index": index, "config": cfg.to_dict(), **metrics.to_dict()})
        logger.info(f"CZSL config {index}: validation mH={metrics.mH:.4f}")
    best = min(table, key=lambda row: (-row["mH"], row["index"]))
    return grid[best["index"]], table, seq.subsequence(range(n_cv_tasks, seq.n_tasks))
