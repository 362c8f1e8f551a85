import asyncio
import json

import pytest
from fastmcp import Client

from server import mcp


def call(tool, arguments):
    async def run():
        # in-memory transport; no HTTP server needed
        async with Client(mcp) as client:
            result = await client.call_tool(tool, arguments)
            return json.loads(result[0].text)

    return asyncio.run(run())


def test_tools_are_registered():
    async def names():
        async with Client(mcp) as client:
            return {tool.name for tool in await client.list_tools()}

    assert asyncio.run(names()) == {
        "optimal_gamma",
        "variance_lab",
        "attribute_statistics",
        "synthesize_dataset",
        "train_model",
        "evaluate_model",
        "run_czsl",
    }


def test_optimal_gamma_tool():
    result = call("optimal_gamma", {"nu": 1.0, "d_z": 2048})
    assert result["gamma"] == pytest.approx(6.724, abs=0.01)
    assert result["predicted_variance"] == pytest.approx(1.0)


def test_errors_come_back_as_json():
    result = call("optimal_gamma", {"nu": 1.0, "d_z": 2})
    assert result["error"].startswith("Failed to run optimal_gamma")


def test_synthesize_and_train(tmp_path):
    data_dir = str(tmp_path / "data")
    overrides = "seed=2\nn_seen=4\nn_unseen=2\nattr_dim=4\nfeat_dim=8\nn_per_class=10\n"
    summary = call("synthesize_dataset", {"out_dir": data_dir, "overrides": overrides})
    assert summary["n_classes"] == 6

    trained = call("train_model", {"data_dir": data_dir, "overrides": "seed=2\nhidden_dim=8\nepochs=2\nbatch_size=8\n"})
    assert 0.0 <= trained["report"]["gzsl_h"] <= 1.0


def test_missing_seed_is_reported():
    result = call("synthesize_dataset", {"out_dir": "unused", "overrides": ""})
    assert "seed" in result["error"]
