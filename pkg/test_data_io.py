from pathlib import Path

import numpy as np
import pytest

from config import render_config, schema_defaults
from errors import ConfigurationError, DataError, ParseError
from models import TrainConfig, ZslDataset
from services.core_math import Rng
from services.data_io import (
    load_attributes,
    load_checkpoint,
    load_config,
    load_dataset,
    load_features,
    parse_config_text,
    save_attributes,
    save_checkpoint,
    save_config,
    save_dataset,
    save_features,
)
from services.synthetic import generate_class_pool, generate_synthetic_split
from services.zsl_service import train

DEFAULTS = Path(__file__).parent / "defaults.cfg"


def test_feature_file_round_trip(tmp_path):
    features = Rng(0).normal((7, 5))
    labels = np.array([0, 1, 2, 3, 4, 5, 6])
    save_features(tmp_path / "f.zslf", features, labels)
    loaded, loaded_labels = load_features(tmp_path / "f.zslf")
    assert loaded.tobytes() == features.tobytes()
    assert loaded_labels.tolist() == labels.tolist()

    save_features(tmp_path / "nolabels.zslf", features)
    assert load_features(tmp_path / "nolabels.zslf")[1] is None


def test_truncated_feature_file(tmp_path):
    path = tmp_path / "f.zslf"
    save_features(path, np.ones((4, 3)))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ParseError, match="expected"):
        load_features(path)


def test_feature_file_bad_magic(tmp_path):
    path = tmp_path / "f.zslf"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ParseError) as excinfo:
        load_features(path)
    assert excinfo.value.offset == 0


def test_attribute_csv_round_trip(tmp_path):
    attributes = np.exp(Rng(1).normal((4, 3)))
    save_attributes(tmp_path / "a.csv", attributes)
    assert np.max(np.abs(load_attributes(tmp_path / "a.csv") - attributes)) <= 1e-12


def test_attribute_csv_any_row_order(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("class_id,a0,a1\n1,3.0,4.0\n0,1.0,2.0\n")
    assert load_attributes(path).tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_ragged_attribute_csv_reports_line(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("class_id,a0,a1\n0,1.0,2.0\n1,3.0\n")
    with pytest.raises(ParseError) as excinfo:
        load_attributes(path)
    assert excinfo.value.line == 3


def test_attribute_csv_needs_contiguous_ids(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("0,1.0\n2,3.0\n")
    with pytest.raises(DataError):
        load_attributes(path)
    path.write_text("0,1.0\n0,3.0\n")
    with pytest.raises(ParseError):
        load_attributes(path)
    path.write_text("0,abc\n")
    with pytest.raises(ParseError):
        load_attributes(path)


def test_checkpoint_round_trip(tmp_path):
    pool, seen, unseen = generate_synthetic_split(4, 2, 6, 8, 10, "gaussian", 0.3, Rng(2))
    data = ZslDataset.from_pool(pool, seen, unseen)
    model, _ = train(TrainConfig(hidden_dim=8, epochs=1, batch_size=8, gamma=6.0, seed=1), data)
    save_checkpoint(tmp_path / "model.ckpt", model)
    loaded = load_checkpoint(tmp_path / "model.ckpt")
    assert loaded.logit_config == model.logit_config
    assert loaded.embedder.spec == model.embedder.spec
    for name, value in model.embedder.state_dict().items():
        assert np.array_equal(loaded.embedder.state_dict()[name], value)
    assert np.array_equal(loaded.class_logits(data.unseen_features, data.attributes), model.class_logits(data.unseen_features, data.attributes))


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"ZSLC")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_parse_config_text():
    text = "# comment\n\ngamma = 7.5  # inline\nclass_norm=false\n"
    assert parse_config_text(text) == [("gamma", "7.5"), ("class_norm", "false")]
    with pytest.raises(ParseError) as excinfo:
        parse_config_text("gamma 7.5\n")
    assert excinfo.value.line == 1
    with pytest.raises(ConfigurationError, match="Unknown config key"):
        parse_config_text("gama=7.5\n")
    with pytest.raises(ConfigurationError, match="line 2"):
        parse_config_text("gamma=5\nepochs=many\n")
    with pytest.raises(ConfigurationError):
        parse_config_text("optimizer=rmsprop\n")


def test_defaults_file_matches_schema():
    assert load_config(DEFAULTS) == schema_defaults()
    assert render_config(schema_defaults()) == DEFAULTS.read_text(encoding="utf-8")


def test_config_round_trip(tmp_path):
    settings = load_config(DEFAULTS)
    settings.update(seed=11, gamma=7.0, task_sizes=(3, 4), class_norm=False)
    save_config(tmp_path / "run.cfg", settings)
    assert load_config(tmp_path / "run.cfg") == settings


def test_load_config_layers_over_base(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs=3\n")
    settings = load_config(path, base={"epochs": 50, "lr": 0.1})
    assert settings == {"epochs": 3, "lr": 0.1}
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.cfg")


def test_dataset_directory_round_trip(tmp_path):
    pool, seen, unseen = generate_synthetic_split(5, 2, 4, 6, 8, "lognormal", 0.2, Rng(3))
    save_dataset(tmp_path / "data", pool, seen, unseen)
    data = load_dataset(tmp_path / "data")
    assert data.seen_class_ids == seen and data.unseen_class_ids == unseen
    assert np.array_equal(data.test_seen_labels, pool.test_labels[np.isin(pool.test_labels, seen)])
    assert np.max(np.abs(data.attributes - pool.attributes)) <= 1e-12


def test_missing_dataset_directory(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nowhere")


def test_noise_free_synthetic_examples_sit_on_centers():
    pool = generate_class_pool(3, 4, 5, 6, "gaussian", 0.0, Rng(4))
    for c in range(3):
        rows = pool.train_features[pool.train_labels == c]
        assert np.all(rows == rows[0])
    assert generate_class_pool(3, 4, 5, 6, "gaussian", 0.0, Rng(4)).train_features.tobytes() == pool.train_features.tobytes()


def test_every_synthetic_class_has_train_and_test_examples():
    with pytest.raises(ConfigurationError):
        generate_class_pool(3, 4, 5, 1, "gaussian", 0.3, Rng(5))
    pool = generate_class_pool(3, 4, 5, 2, "gaussian", 0.3, Rng(5))
    assert np.array_equal(np.bincount(pool.train_labels), [1, 1, 1])
    assert np.array_equal(np.bincount(pool.test_labels), [1, 1, 1])
