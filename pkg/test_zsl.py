import math
from dataclasses import dataclass, replace

import numpy as np
import pytest

from config import schema_defaults
from errors import ConfigurationError, DataError, LabelError
from models import EvalReport, LogitConfig, TrainConfig, ZslDataset
from services.core_math import Rng
from services.synthetic import generate_synthetic_zsl
from services.zsl_service import (
    ZslTrainer,
    ablation_study,
    ablation_variant,
    ausuc,
    ausuc_area,
    batch_indices,
    cross_validate,
    expand_grid,
    gzsl_accuracies,
    gzsl_eval,
    harmonic_mean,
    loss,
    paired_sign_test,
    sweep_seen_scale,
    train,
    train_accuracy,
    validation_split,
)
from tools.zsl_tools import ZslTools

TINY = TrainConfig(hidden_dim=16, epochs=3, batch_size=16, lr=0.001, seed=0)


def tiny_data(seed=0, n_seen=6, n_unseen=2):
    return generate_synthetic_zsl(n_seen, n_unseen, 8, 16, 20, "gaussian", 0.3, Rng(seed))


@dataclass
class LogitStub:
    """Model whose logits are the feature rows themselves."""

    logit_config: LogitConfig = LogitConfig()

    def class_logits(self, features, attributes, cfg=None):
        return np.array(features, dtype=np.float64)


def one_hot_rows(targets, n_classes):
    rows = np.zeros((len(targets), n_classes))
    rows[np.arange(len(targets)), np.asarray(targets, dtype=np.int64)] = 1.0
    return rows


def stub_dataset(seen_predictions, seen_labels, unseen_predictions, unseen_labels):
    """Two seen (0, 1) and two unseen (2, 3) classes with one-hot logits at the given predictions."""
    return ZslDataset(
        seen_features=one_hot_rows(seen_predictions, 4),
        seen_labels=np.array(seen_labels, dtype=np.int64),
        unseen_features=one_hot_rows(unseen_predictions, 4),
        unseen_labels=np.array(unseen_labels, dtype=np.int64),
        attributes=np.eye(4),
        seen_class_ids=(0, 1),
        unseen_class_ids=(2, 3),
    )


def test_loss_uniform_logits():
    logits = np.zeros((3, 5))
    labels = np.array([0, 2, 4])
    assert loss(logits, labels, 0.0)[0] == pytest.approx(math.log(5))
    assert loss(logits, labels, 0.2)[0] == pytest.approx(math.log(5) - 0.2 * math.log(5))


def test_loss_gradient_matches_finite_differences():
    rng = Rng(1)
    logits, labels = rng.normal((5, 7)), np.array([0, 3, 6, 2, 2])
    _, grad = loss(logits, labels, 0.1)
    h = 1e-6
    numeric = np.zeros_like(logits)
    for pos in np.ndindex(logits.shape):
        plus, minus = logits.copy(), logits.copy()
        plus[pos] += h
        minus[pos] -= h
        numeric[pos] = (loss(plus, labels, 0.1)[0] - loss(minus, labels, 0.1)[0]) / (2 * h)
    assert np.max(np.abs(grad - numeric) / np.maximum(np.abs(numeric), 1e-3)) < 1e-6


def test_loss_rejects_out_of_range_labels():
    with pytest.raises(LabelError):
        loss(np.zeros((2, 3)), np.array([0, 3]), 0.0)


def test_train_with_zero_epochs_returns_initial_model():
    data = tiny_data()
    cfg = replace(TINY, epochs=0)
    model, log = train(cfg, data)
    fresh = ZslTrainer(cfg, data.attributes, data.feat_dim)
    assert log.entries == []
    for name, value in fresh.embedder.params.items():
        assert np.array_equal(model.embedder.params[name], value)


def test_train_separates_linearly_separable_classes():
    rng = Rng(2)
    n = 40
    centers = 3.0 * np.eye(3, 8)
    labels = np.repeat(np.arange(3), n)
    features = centers[labels] + 0.1 * rng.normal((3 * n, 8))
    data = ZslDataset(
        seen_features=features,
        seen_labels=labels,
        unseen_features=np.zeros((0, 8)),
        unseen_labels=np.zeros(0, dtype=np.int64),
        attributes=rng.normal((3, 5)),
        seen_class_ids=(0, 1, 2),
        unseen_class_ids=(),
    )
    cfg = TrainConfig(hidden_dim=16, epochs=50, batch_size=32, lr=0.005, class_norm=False, seed=3)
    model, log = train(cfg, data)
    assert train_accuracy(model, data) >= 0.99
    assert len(log.entries) == 50


def test_training_is_deterministic():
    data = tiny_data()
    first, first_log = train(TINY, data)
    second, second_log = train(TINY, data)
    assert first_log.entries == second_log.entries
    for name, value in first.embedder.state_dict().items():
        assert value.tobytes() == second.embedder.state_dict()[name].tobytes()


@pytest.mark.parametrize("gamma", [1.0, 20.0])
def test_training_loss_is_finite_for_ns(gamma):
    _, log = train(replace(TINY, gamma=gamma), tiny_data())
    assert all(np.isfinite(entry["loss"]) for entry in log.entries)


def test_gzsl_eval_perfect_predictor():
    data = stub_dataset([0, 1, 1], [0, 1, 1], [2, 3], [2, 3])
    report = gzsl_eval(LogitStub(), data)
    assert (report.gzsl_u, report.gzsl_s, report.gzsl_h) == (1.0, 1.0, 1.0)
    assert report.ausuc == pytest.approx(1.0)
    assert report.joint_accuracy == 1.0
    assert gzsl_eval(LogitStub(), data, additive=True).ausuc == pytest.approx(1.0)


def test_gzsl_eval_hand_built_table():
    seen_labels = [0] * 5 + [1] * 5
    seen_predictions = [0, 0, 0, 1, 1] + [1, 1, 1, 3, 3]
    unseen_labels = [2] * 5 + [3] * 5
    unseen_predictions = [2, 2, 0, 0, 0] + [3, 3, 0, 0, 0]
    report = gzsl_eval(LogitStub(), stub_dataset(seen_predictions, seen_labels, unseen_predictions, unseen_labels))
    assert report.gzsl_s == pytest.approx(0.6, abs=1e-12)
    assert report.gzsl_u == pytest.approx(0.4, abs=1e-12)
    assert report.gzsl_h == pytest.approx(0.48, abs=1e-12)
    assert report.joint_accuracy == pytest.approx(0.5, abs=1e-12)
    assert report.per_class_accuracy == pytest.approx({0: 0.6, 1: 0.6, 2: 0.4, 3: 0.4})
    # suppressing seen classes sends every seen-predicted row to class 2: S = 0, U = (1.0 + 0.4) / 2
    assert report.ausuc == pytest.approx(0.6 * (0.7 + 0.4) / 2, abs=1e-12)


def test_ausuc_of_constant_unseen_predictor_is_zero():
    data = stub_dataset([2, 2], [0, 1], [2, 2], [2, 3])
    assert gzsl_eval(LogitStub(), data).ausuc == 0.0


def test_ausuc_area_three_points():
    assert ausuc_area([(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)]) == pytest.approx(0.5, abs=1e-12)


def test_harmonic_mean():
    assert harmonic_mean(0.4, 0.6) == pytest.approx(0.48)
    assert harmonic_mean(0.0, 0.0) == 0.0


def test_ausuc_rejects_degenerate_grids():
    data = stub_dataset([0, 1], [0, 1], [2, 3], [2, 3])
    model = LogitStub()
    with pytest.raises(ConfigurationError):
        ausuc(model, data, 5.0, scale_grid=(1.0, 0.9))
    with pytest.raises(ConfigurationError):
        ausuc(model, data, 5.0, scale_grid=(1.2, 1.0, 0.9, 0.8, 0.7))


def test_seen_scale_is_monotone_on_nonnegative_logits():
    mask = np.array([True, True, False, False])
    for stream in Rng(4).spawn(50):
        seen_logits, unseen_logits = stream.uniform(0, 1, (6, 4)), stream.uniform(0, 1, (6, 4))
        seen_labels = stream.integers(0, 2, 6)
        unseen_labels = stream.integers(2, 4, 6)
        base_s, base_u, _ = gzsl_accuracies(seen_logits, seen_labels, unseen_logits, unseen_labels, mask, 1.0)
        for s in (0.95, 0.9, 0.85, 0.8, 0.5):
            seen_acc, unseen_acc, _ = gzsl_accuracies(seen_logits, seen_labels, unseen_logits, unseen_labels, mask, s)
            assert seen_acc <= base_s
            assert unseen_acc >= base_u


def test_per_class_accuracy_ignores_class_imbalance():
    mask = np.array([True, True, False])
    rng = Rng(5)
    logits, labels = rng.normal((8, 3)), np.array([0, 0, 1, 1, 1, 0, 1, 0])
    unseen_logits, unseen_labels = rng.normal((4, 3)), np.array([2, 2, 2, 2])
    base = gzsl_accuracies(logits, labels, unseen_logits, unseen_labels, mask)
    rows = labels == 0
    duplicated = gzsl_accuracies(
        np.concatenate([logits, logits[rows]]), np.concatenate([labels, labels[rows]]),
        unseen_logits, unseen_labels, mask,
    )
    assert duplicated[:2] == base[:2]


def test_gzsl_eval_without_unseen_data():
    data = stub_dataset([0, 1], [0, 1], [], [])
    report = gzsl_eval(LogitStub(), data)
    assert report.gzsl_s == 1.0
    assert report.gzsl_u is None and report.gzsl_h is None and report.ausuc is None


def test_gzsl_eval_needs_attribute_rows():
    data = stub_dataset([0, 1], [0, 1], [2, 3], [2, 3])
    data.attributes = np.eye(3)
    with pytest.raises(DataError):
        gzsl_eval(LogitStub(), data)


def test_sweep_seen_scale_orders_grid():
    data = tiny_data()
    model, _ = train(TINY, data)
    reports = sweep_seen_scale(model, data, (0.8, 1.0, 0.9))
    assert [r.seen_scale_used for r in reports] == [1.0, 0.9, 0.8]
    assert all(r.ausuc is None for r in reports)


def test_validation_split_is_deterministic():
    data = tiny_data(n_seen=10)
    first = validation_split(data, (0.2, 0.1), Rng(6))
    second = validation_split(data, (0.2, 0.1), Rng(6))
    assert first.unseen_class_ids == second.unseen_class_ids
    assert len(first.unseen_class_ids) == 2
    assert set(first.seen_class_ids) | set(first.unseen_class_ids) == set(range(10))
    assert np.array_equal(first.test_seen_labels, second.test_seen_labels)


def test_validation_split_infeasible():
    with pytest.raises(DataError):
        validation_split(tiny_data(n_seen=2), (0.5, 0.1), Rng(0))
    with pytest.raises(ConfigurationError):
        validation_split(tiny_data(), (0.0, 0.1), Rng(0))


def _report(h):
    return EvalReport(gzsl_u=h, gzsl_s=h, gzsl_h=h, ausuc=h, per_class_accuracy={}, seen_scale_used=1.0, joint_accuracy=h)


def test_cross_validate_single_config():
    best, table = cross_validate([TINY], tiny_data(), seed=1)
    assert best == TINY
    assert len(table) == 1


def test_cross_validate_prefers_oracle_and_breaks_ties():
    grid = expand_grid(TINY, {"gamma": [3.0, 7.0], "lr": [0.01, 0.001]})
    oracle = {7.0: 1.0, 3.0: 0.5}

    def fit(cfg, data):
        return cfg

    def evaluate(cfg, data, logit_cfg):
        return _report(oracle[cfg.gamma])

    best, table = cross_validate(grid, tiny_data(n_seen=10), fit=fit, evaluate=evaluate)
    assert (best.gamma, best.lr) == (7.0, 0.001)
    assert [row["index"] for row in table] == [0, 1, 2, 3]

    oracle[3.0] = 1.0
    best, _ = cross_validate(grid, tiny_data(n_seen=10), fit=fit, evaluate=evaluate)
    assert (best.gamma, best.lr) == (3.0, 0.001)


def test_expand_grid():
    grid = expand_grid(TINY, {"lr": [0.1, 0.2], "momentum": [0.9, 0.95]})
    assert [(c.lr, c.momentum) for c in grid] == [(0.1, 0.9), (0.1, 0.95), (0.2, 0.9), (0.2, 0.95)]
    with pytest.raises(ConfigurationError):
        expand_grid(TINY, {"learning_rate": [0.1]})
    with pytest.raises(ConfigurationError):
        expand_grid(TINY, {"lr": []})


def test_ablation_variants():
    assert ablation_variant(TINY, "ns_an_cn", 4).class_norm
    dot = ablation_variant(TINY, "dot_standardized", 4)
    assert (dot.logit_mode, dot.attribute_preproc, dot.class_norm, dot.seed) == ("dot", "standardize", False, 4)
    with pytest.raises(ConfigurationError):
        ablation_variant(TINY, "unknown", 0)


def test_paired_sign_test():
    result = paired_sign_test([0.9] * 10, [0.5] * 10)
    assert (result["wins"], result["losses"], result["ties"]) == (10, 0, 0)
    assert result["p_value"] == pytest.approx(0.5 ** 10)
    assert paired_sign_test([0.5, 0.5], [0.5, 0.5])["p_value"] == 1.0


def test_ablation_study_structure():
    result = ablation_study([0, 1], TINY, lambda seed: tiny_data(seed))
    assert result["seeds"] == [0, 1]
    assert set(result["variants"]) == {"ns_an_cn", "ns_an", "dot_standardized"}
    assert all(len(v["gzsl_h"]) == 2 for v in result["variants"].values())
    assert len(result["comparisons"]) == 3


def test_batch_indices_visit_every_example_once_per_pass():
    batches = batch_indices(10, 4, Rng(3))
    first_pass = [next(batches) for _ in range(3)]
    assert [len(idx) for idx in first_pass] == [4, 4, 2]
    assert sorted(np.concatenate(first_pass).tolist()) == list(range(10))
    assert sorted(np.concatenate([next(batches) for _ in range(3)]).tolist()) == list(range(10))


def test_ablation_ranks_class_norm_first_at_default_settings():
    settings = schema_defaults()
    settings["seed"] = 0
    result = ZslTools.ablate(settings)
    means = {name: v["mean"] for name, v in result["variants"].items()}
    assert means["ns_an_cn"] >= means["ns_an"] >= means["dot_standardized"]
    for comparison in result["comparisons"]:
        assert comparison["wins"] > comparison["losses"]
        assert comparison["p_value"] < 0.05
