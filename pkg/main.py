#!/usr/bin/env python3
"""
Main entry point for masked motion diffusion tasks.

    mmdm <task> --config <path> [--seed N] [--steps K] [--ddim N] [--out DIR] [--checkpoint PATH]

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

import sys
import logging
import argparse
from typing import Optional, Sequence

from cli_handler import MMDMCommandHandler
from config import TASKS, ConfigError, Settings, load_config
from data_manager import DataManager

# Load environment variables (optional in prod, vital in dev)
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Configure logging
logging.basicConfig(format=LOG_FORMAT, level=logging.INFO)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='mmdm', description='Masked motion diffusion tasks')
    parser.add_argument('task', choices=TASKS)
    parser.add_argument('--config', help='JSON file of dotted configuration keys')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--steps', type=int, help='diffusion steps K')
    parser.add_argument('--ddim', type=int, help='sample with DDIM jumps of N steps')
    parser.add_argument('--out', help='run directory')
    parser.add_argument('--checkpoint', help='trained model (.npz)')
    parser.add_argument('--input', help='input motion file')
    parser.add_argument('--gt', help='ground-truth motion file')
    parser.add_argument('--pred', help='predicted motion file (eval)')
    parser.add_argument('--metrics', help='comma-separated metric names')
    parser.add_argument('--label', help='action label for in-betweening')
    return parser


def setup_logging(settings: Settings):
    """Apply the configured level and optional log file."""
    root = logging.getLogger()
    root.setLevel(settings.LOG_LEVEL)
    if settings.LOG_FILE:
        handler = logging.FileHandler(settings.LOG_FILE)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run the task and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if not e.code else EXIT_CONFIG_ERROR

    overrides = {
        'task': args.task,
        'seed': args.seed,
        'schedule.K': args.steps,
        'ddim_stride': args.ddim,
        'output_dir': args.out,
        'checkpoint': args.checkpoint,
        'input': args.input,
        'gt': args.gt,
        'pred': args.pred,
        'metrics': args.metrics,
        'label': args.label,
    }
    try:
        settings = Settings()
        setup_logging(settings)
        cfg = load_config(args.config, overrides, settings)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR

    try:
        MMDMCommandHandler(cfg, DataManager(cfg.output_dir)).run()
        return EXIT_OK
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except Exception as e:
        logger.error(f"Task '{cfg.task}' failed: {e}", exc_info=True)
        return EXIT_RUNTIME_ERROR


if __name__ == '__main__':
    sys.exit(main())
