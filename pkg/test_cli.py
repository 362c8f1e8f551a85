import json

import pytest

from cli import build_parser, main, resolve_settings

SYNTH = ["--n-seen", "4", "--n-unseen", "2", "--attr-dim", "4", "--feat-dim", "8", "--n-per-class", "10"]
SMALL = ["--hidden-dim", "8", "--epochs", "2", "--batch-size", "8"]


def run(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr().out


@pytest.fixture
def dataset(tmp_path, capsys):
    directory = tmp_path / "data"
    code, _ = run(["synth", "--out-dir", str(directory), "--seed", "3"] + SYNTH, capsys)
    assert code == 0
    return directory


def test_gamma_command(capsys):
    code, out = run(["gamma", "--nu", "1.0", "--d-z", "2048"], capsys)
    assert code == 0
    envelope = json.loads(out)
    assert envelope["command"] == "gamma"
    assert envelope["result"]["gamma"] == pytest.approx(6.724, abs=0.01)
    assert envelope["config"]["seed"] is None


def test_synth_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["synth", "--out-dir", str(tmp_path / name), "--seed", "5"] + SYNTH, capsys)[0] == 0
    for filename in ("train.zslf", "test.zslf", "attributes.csv", "split.json"):
        assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()


def test_train_and_eval(dataset, tmp_path, capsys):
    checkpoint = tmp_path / "model.ckpt"
    argv = ["train", "--data", str(dataset), "--seed", "1", "--checkpoint", str(checkpoint)] + SMALL
    code, first = run(argv, capsys)
    assert code == 0
    code, second = run(argv, capsys)
    first, second = json.loads(first), json.loads(second)
    first.pop("generated_at")
    second.pop("generated_at")
    assert first == second
    assert first["result"]["steps"] > 0

    code, out = run(["eval", "--data", str(dataset), "--checkpoint", str(checkpoint)], capsys)
    assert code == 0
    assert json.loads(out)["result"]["gzsl_s"] == first["result"]["report"]["gzsl_s"]


def test_sweep_csv_output(dataset, tmp_path, capsys):
    checkpoint = tmp_path / "model.ckpt"
    run(["train", "--data", str(dataset), "--seed", "1", "--checkpoint", str(checkpoint)] + SMALL, capsys)
    code, out = run(["sweep-seen-scale", "--data", str(dataset), "--checkpoint", str(checkpoint), "--format", "csv"], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "gzsl_u,gzsl_s,gzsl_h,ausuc,joint_accuracy,seen_scale"
    assert len(lines) == 6


def test_out_file(tmp_path, capsys):
    target = tmp_path / "gamma.json"
    code, out = run(["gamma", "--out", str(target)], capsys)
    assert code == 0 and out == ""
    assert json.loads(target.read_text())["command"] == "gamma"


def test_missing_seed_exits_with_configuration_code(tmp_path, capsys):
    assert run(["synth", "--out-dir", str(tmp_path / "data")], capsys)[0] == 2


def test_bad_setting_value_exits_with_configuration_code(capsys):
    assert run(["gamma", "--epochs", "many"], capsys)[0] == 2
    assert run(["gamma", "--optimizer", "rmsprop"], capsys)[0] == 2


def test_missing_dataset_exits_with_data_code(tmp_path, capsys):
    assert run(["train", "--data", str(tmp_path / "nowhere"), "--seed", "1"], capsys)[0] == 3


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    out = capsys.readouterr().out
    for option in ("--hidden-dim", "--seen-scale", "--entropy-weight", "--config"):
        assert option in out


def test_settings_precedence(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text("gamma=3.0\nepochs=7\n")
    args = build_parser().parse_args(["gamma", "--config", str(config), "--gamma", "9"])
    settings = resolve_settings(args)
    assert settings["gamma"] == 9.0
    assert settings["epochs"] == 7
    assert settings["lr"] == 0.0005
