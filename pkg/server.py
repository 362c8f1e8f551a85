"""MCP server exposing the toolkit's experiments."""

import asyncio
import json
import logging
import traceback
from typing import Any, Callable, Dict, Optional

from fastmcp import FastMCP

from config import DEFAULT_HOST, DEFAULT_PORT, LOG_LEVEL, merge_settings, schema_defaults
from services.data_io import parse_config_text
from tools.czsl_tools import CzslTools
from tools.data_tools import DataTools
from tools.lab_tools import LabTools
from tools.zsl_tools import ZslTools

# Configure logging
logger = logging.getLogger(__name__)
logging.basicConfig(format="[%(levelname)s]: %(message)s", level=LOG_LEVEL)

# Initialize FastMCP server
mcp = FastMCP("Class-normalized ZSL toolkit")


def _settings(overrides: str) -> Dict[str, Any]:
    return merge_settings(schema_defaults(), parse_config_text(overrides, "<overrides>"))


def _respond(name: str, call: Callable[[], Dict[str, Any]]) -> str:
    try:
        return json.dumps(call(), sort_keys=True, default=float)
    except Exception as e:
        error_msg = f"Failed to run {name}: {str(e)}"
        logger.error(f"Error in {name}: {error_msg}")
        logger.error(f"Traceback: {traceback.format_exc()}")
        return json.dumps({"error": error_msg})


@mcp.tool()
def optimal_gamma(nu: float = 1.0, d_z: int = 2048) -> str:
    """Scale giving normalize+scale logits the target variance nu.

    Args:
        nu: Target logit variance
        d_z: Feature dimension (at least 3)

    Returns:
        JSON string with gamma, the variance it predicts and initialization variances
    """
    return _respond("optimal_gamma", lambda: LabTools.gamma(nu, d_z))


@mcp.tool()
def variance_lab(experiment: str = "all", overrides: str = "") -> str:
    """Monte-Carlo validation of the logit and pre-logit variance formulas.

    Args:
        experiment: 'cosine', 'prelogit' or 'all'
        overrides: key=value lines of experiment settings; must include seed

    Returns:
        JSON string with one variance report per setting
    """
    return _respond("variance_lab", lambda: LabTools.variance_lab(_settings(overrides), experiment))


@mcp.tool()
def attribute_statistics(attributes_path: str) -> str:
    """Normality, correlation and squared-norm diagnostics of an attribute CSV.

    Args:
        attributes_path: Path to the attribute CSV file

    Returns:
        JSON string with the diagnostics report
    """
    return _respond("attribute_statistics", lambda: LabTools.attr_stats(attributes_path))


@mcp.tool()
def synthesize_dataset(out_dir: str, overrides: str = "") -> str:
    """Generate a synthetic ZSL dataset directory.

    Args:
        out_dir: Directory to create
        overrides: key=value lines of experiment settings; must include seed

    Returns:
        JSON string summarizing the dataset
    """
    return _respond("synthesize_dataset", lambda: DataTools.synth(_settings(overrides), out_dir))


@mcp.tool()
def train_model(data_dir: str, checkpoint: Optional[str] = None, overrides: str = "") -> str:
    """Train an attribute embedder on a dataset directory and evaluate it.

    Args:
        data_dir: Dataset directory
        checkpoint: Optional path for the trained model
        overrides: key=value lines of experiment settings; must include seed

    Returns:
        JSON string with the training summary and evaluation report
    """
    return _respond("train_model", lambda: ZslTools.train(_settings(overrides), data_dir, checkpoint))


@mcp.tool()
def evaluate_model(data_dir: str, checkpoint: str, overrides: str = "") -> str:
    """Generalized ZSL evaluation of a saved model.

    Args:
        data_dir: Dataset directory
        checkpoint: Checkpoint written by train_model
        overrides: key=value lines of experiment settings (seen_scale, scale_grid, ...)

    Returns:
        JSON string with GZSL-U/S/H, AUSUC and per-class accuracies
    """
    return _respond("evaluate_model", lambda: ZslTools.evaluate(_settings(overrides), data_dir, checkpoint))


@mcp.tool()
def run_czsl(data_dir: str, overrides: str = "") -> str:
    """Run the continual ZSL baselines on a dataset directory.

    Args:
        data_dir: Dataset directory
        overrides: key=value lines of experiment settings; must include seed

    Returns:
        JSON string with accuracy matrices and CZSL metrics
    """
    return _respond("run_czsl", lambda: CzslTools.czsl(_settings(overrides), data_dir))


async def main(host: str = DEFAULT_HOST, port: int = DEFAULT_PORT):
    """Main server startup function."""
    logger.info(f"MCP server starting on {host}:{port}")
    try:
        await mcp.run_async(transport="streamable-http", host=host, port=port)
    except Exception as e:
        logger.error(f"Server startup failed: {e}")
        raise


if __name__ == "__main__":
    asyncio.run(main())
