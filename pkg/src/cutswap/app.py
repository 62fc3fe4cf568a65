"""Command-line bootstrap for the CutSwap pipeline."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

if __package__ in (None, ""):
    project_root = Path(__file__).resolve().parents[1]
    if str(project_root) not in sys.path:
        sys.path.insert(0, str(project_root))

# pylint: disable=wrong-import-position
from cutswap import __version__
from cutswap.config import ABLATION_AXES, load_config
from cutswap.services.ablation import run_ablation
from cutswap.services.exceptions import (
    ConfigError,
    CutSwapError,
    MissingArtifactError,
    NumericFailureError,
)
from cutswap.services.pipeline_service import PipelineService, create_pipeline_service

LOGGER = logging.getLogger("cutswap")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_NUMERIC = 4

DEFAULT_OUT = Path("runs") / "default"
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"

COMMANDS: dict[str, Callable[[PipelineService, argparse.Namespace], object]] = {
    "synth": lambda service, _: service.synth(),
    "augment": lambda service, _: service.augment(),
    "train": lambda service, _: service.train(),
    "build-bank": lambda service, _: service.build_bank(),
    "score": lambda service, _: service.score(),
    "eval": lambda service, _: service.evaluate(),
    "ablate": lambda service, args: run_ablation(service, args.axis),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cutswap",
        description="Saliency-guided CutSwap augmentation and memory-bank anomaly detection.",
    )
    parser.add_argument("--config", type=Path, help="YAML run configuration")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a configuration key, e.g. train.epochs=8 (repeatable)",
    )
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT, help="run directory")
    parser.add_argument("--seed", type=int, help="root seed for every stochastic stage")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging verbosity",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name, help=f"run the {name} stage")
        if name == "ablate":
            sub.add_argument("--axis", required=True, choices=ABLATION_AXES)
    return parser


def _log_progress(message: str, percent_complete: float | None = None) -> None:
    if percent_complete is None:
        LOGGER.info(message)
    else:
        LOGGER.info("%s (%.0f%%)", message, percent_complete)


def main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand and map failures onto exit codes."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        config = load_config(args.config, args.overrides, args.seed)
        service = create_pipeline_service(config, args.out, progress=_log_progress)
        COMMANDS[args.command](service, args)
    except ConfigError as exc:
        LOGGER.error("Configuration error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        LOGGER.error("Missing artifact: %s", exc)
        return EXIT_MISSING_ARTIFACT
    except NumericFailureError as exc:
        LOGGER.error("Numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (CutSwapError, ValueError, OSError) as exc:
        LOGGER.error("%s failed: %s", args.command, exc)
        return EXIT_FAILURE
    return EXIT_OK


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
