"""Command-line entry point.

Every subcommand accepts one --<key> option per experiment-config key, an
optional --config file and --out/--format output options. Settings resolve as
schema default < config file < command-line flag.
"""

import argparse
import asyncio
import csv
import io
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from config import CONFIG_SCHEMA, DEFAULT_HOST, DEFAULT_OUTPUT_FORMAT, DEFAULT_PORT, LOG_LEVEL, merge_settings, schema_defaults
from errors import ZslError
from services.data_io import load_config
from tools.czsl_tools import CzslTools
from tools.data_tools import DataTools
from tools.lab_tools import EXPERIMENTS, LabTools
from tools.zsl_tools import ZslTools

logger = logging.getLogger(__name__)

COMMANDS = {
    "synth": "generate a synthetic ZSL dataset directory",
    "train": "train an attribute embedder and evaluate it",
    "eval": "generalized ZSL evaluation of a checkpoint",
    "gamma": "scale giving normalize+scale logits a target variance",
    "variance-lab": "Monte-Carlo validation of the variance formulas",
    "attr-stats": "normality and correlation diagnostics of attributes",
    "probe-smoothness": "scaled gradient-norm probe of trained models",
    "czsl": "continual ZSL task sequence runner",
    "sweep-seen-scale": "GZSL metrics over a seen-scale grid",
    "ablate": "seed-paired normalization ablation on synthetic data",
    "serve": "run the MCP server",
}


def _add_schema_options(parser: argparse.ArgumentParser) -> None:
    groups: Dict[str, Any] = {}
    for key in CONFIG_SCHEMA:
        if key.section not in groups:
            groups[key.section] = parser.add_argument_group(f"{key.section} settings")
        choices = f" [{'|'.join(key.choices)}]" if key.choices else ""
        groups[key.section].add_argument(
            f"--{key.name.replace('_', '-')}",
            dest=f"setting_{key.name}",
            metavar="VALUE",
            default=None,
            help=f"{key.help}{choices} (default: {key.render_default() or 'none'})",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="classnorm-zsl", description="Class-normalized zero-shot learning toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.add_argument("--config", help="key=value experiment config file")
        sub.add_argument("--out", help="write output to this path instead of stdout")
        sub.add_argument("--format", choices=("json", "csv"), default=DEFAULT_OUTPUT_FORMAT, help="output format")
        if name == "synth":
            sub.add_argument("--out-dir", required=True, help="dataset directory to create")
        if name in ("train", "eval", "probe-smoothness", "czsl", "sweep-seen-scale"):
            sub.add_argument("--data", required=True, help="dataset directory")
        if name == "attr-stats":
            sub.add_argument("--data", help="dataset directory")
            sub.add_argument("--attributes", help="attribute CSV file")
        if name in ("eval", "sweep-seen-scale"):
            sub.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
        if name == "train":
            sub.add_argument("--checkpoint", help="where to save the trained model")
            sub.add_argument("--log", help="JSON-lines training log path")
        if name == "gamma":
            sub.add_argument("--nu", type=float, default=1.0, help="target logit variance (default: 1.0)")
            sub.add_argument("--d-z", type=int, default=2048, help="feature dimension (default: 2048)")
        if name == "variance-lab":
            sub.add_argument("--experiment", choices=EXPERIMENTS, default="all", help="which experiments to run")
        if name == "serve":
            sub.add_argument("--host", default=DEFAULT_HOST)
            sub.add_argument("--port", type=int, default=DEFAULT_PORT)
        _add_schema_options(sub)
    return parser


def resolve_settings(args: argparse.Namespace) -> Dict[str, Any]:
    settings = schema_defaults()
    if args.config:
        settings = load_config(args.config, settings)
    flags = [
        (key.name, getattr(args, f"setting_{key.name}"))
        for key in CONFIG_SCHEMA
        if getattr(args, f"setting_{key.name}") is not None
    ]
    return merge_settings(settings, flags)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "item"):
        return value.item()
    return value


def _csv_rows(command: str, result: Dict[str, Any]) -> List[Dict[str, Any]]:
    if "rows" in result:
        return result["rows"]
    if command == "train":
        report = result["report"]
        return [{k: report[k] for k in ("gzsl_u", "gzsl_s", "gzsl_h", "ausuc", "joint_accuracy", "seen_scale_used")}]
    if command == "eval":
        return [{k: result[k] for k in ("gzsl_u", "gzsl_s", "gzsl_h", "ausuc", "joint_accuracy", "seen_scale_used")}]
    return [{k: v for k, v in result.items() if not isinstance(v, (dict, list))}]


def render_output(command: str, settings: Dict[str, Any], result: Dict[str, Any], output_format: str) -> str:
    if output_format == "csv":
        rows = _csv_rows(command, result)
        buffer = io.StringIO()
        if rows:
            writer = csv.DictWriter(buffer, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        return buffer.getvalue()
    envelope = {
        "command": command,
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "config": settings,
        "result": result,
    }
    return json.dumps(_jsonable(envelope), indent=2, sort_keys=True) + "\n"


def run_command(command: str, args: argparse.Namespace, settings: Dict[str, Any]) -> Dict[str, Any]:
    handlers: Dict[str, Callable[[], Dict[str, Any]]] = {
        "synth": lambda: DataTools.synth(settings, args.out_dir),
        "train": lambda: ZslTools.train(settings, args.data, args.checkpoint, args.log),
        "eval": lambda: ZslTools.evaluate(settings, args.data, args.checkpoint),
        "gamma": lambda: LabTools.gamma(args.nu, args.d_z, settings["hidden_dim"], settings["attr_dim"]),
        "variance-lab": lambda: LabTools.variance_lab(settings, args.experiment),
        "attr-stats": lambda: LabTools.attr_stats(args.attributes, args.data),
        "probe-smoothness": lambda: LabTools.probe_smoothness(settings, args.data),
        "czsl": lambda: CzslTools.czsl(settings, args.data),
        "sweep-seen-scale": lambda: ZslTools.sweep_seen_scale(settings, args.data, args.checkpoint),
        "ablate": lambda: ZslTools.ablate(settings),
    }
    return handlers[command]()


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(format="[%(levelname)s]: %(message)s", level=LOG_LEVEL)
    args = build_parser().parse_args(argv)
    try:
        settings = resolve_settings(args)
        if args.command == "serve":
            import server

            asyncio.run(server.main(args.host, args.port))
            return 0
        result = run_command(args.command, args, settings)
        output = render_output(args.command, settings, result, args.format)
    except ZslError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    if args.out:
        Path(args.out).write_text(output, encoding="utf-8")
    else:
        sys.stdout.write(output)
    return 0


if __name__ == "__main__":
    sys.exit(main())
