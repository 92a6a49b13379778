#!/usr/bin/env python3
"""
Evidence-transfer experiments from the command line.

    run_experiment.py run              baseline vs evidence transfer for one experiment
    run_experiment.py rotate           every (ground truth, evidence) pair of event types
    run_experiment.py sampling-compare oversample / undersample / combine, ground truth as evidence
    run_experiment.py synth            write the synthetic benchmark as feature file + catalog
    run_experiment.py screen           screen the configured evidence sources

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

import argparse
import logging
import os
import signal
import sys
from pathlib import Path
from typing import List, Optional

# Dynamic path resolution
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, SCRIPT_DIR)

from config import DEFAULT_CONFIG_PATH, ExperimentConfig, apply_overrides, load_config
from detectors import DetectorKind
from errors import EXIT_DATA, EXIT_OK, EviTransferError, exit_code_for
from generate_report import cleanup_partial_files
from pipeline import (run_pipeline, run_rotation_suite, run_sampling_comparison, run_screening,
                      write_synthetic)
from status_reporter import emit_final, start_status_reporter, stop_status_reporter

logger = logging.getLogger("evitransfer")

VERBS = ("run", "rotate", "sampling-compare", "synth", "screen")

# Global state for graceful shutdown
_shutdown_state = {
    "verb": None,
    "interrupted": False,
}


def _signal_handler(signum, frame):
    """Handle SIGTERM/SIGINT: drop half-written outputs, exit 128 + signum."""
    if _shutdown_state["interrupted"]:
        return
    _shutdown_state["interrupted"] = True
    sig_name = signal.Signals(signum).name
    logger.warning("received %s during '%s' - removing partial outputs", sig_name, _shutdown_state["verb"])
    for path in cleanup_partial_files():
        logger.warning("removed %s", path)
    stop_status_reporter()
    sys.exit(128 + signum)


def install_signal_handlers():
    signal.signal(signal.SIGTERM, _signal_handler)
    signal.signal(signal.SIGINT, _signal_handler)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help=f"experiment config JSON (default {DEFAULT_CONFIG_PATH})")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--detector", choices=[k.value for k in DetectorKind], default=None)
    common.add_argument("--lambda", dest="lam", type=float, default=None, help="evidence weight")
    common.add_argument("--skip-screening", action="store_true", help="transfer every evidence source unscreened")
    common.add_argument("--status-interval", type=int, default=60, help="seconds between status updates")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="run_experiment.py",
                                     description="Evidence transfer for unsupervised severe-event detection")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sub.add_parser(verb, parents=[common])
    return parser


def configure_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is None and args.verb == "synth" and not DEFAULT_CONFIG_PATH.exists():
        config = ExperimentConfig()
    else:
        config = load_config(args.config)
    return apply_overrides(config, seed=args.seed, output_dir=args.out, detector=args.detector,
                           lam=args.lam, skip_screening=args.skip_screening)


def dispatch(verb: str, config: ExperimentConfig) -> int:
    if verb == "run":
        result = run_pipeline(config)
        logger.info("report: %s", result.outputs[0] if result.outputs else "(not written)")
        return EXIT_OK
    if verb in ("rotate", "sampling-compare"):
        suite = run_rotation_suite(config) if verb == "rotate" else run_sampling_comparison(config)
        sys.stdout.write(suite.table)
        failed = [c for c in suite.cells if not c.success]
        if failed and len(failed) == len(suite.cells):
            return failed[0].exit_code
        return EXIT_OK
    if verb == "synth":
        for path in write_synthetic(config):
            logger.info("wrote %s", path)
        return EXIT_OK
    verdicts = run_screening(config)
    for v in verdicts:
        sys.stdout.write(f"{v.source}: entropy ratio {v.entropy_ratio:.3f} -> "
                         f"{'accepted' if v.accepted else 'rejected'}\n")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    install_signal_handlers()
    _shutdown_state["verb"] = args.verb

    start_status_reporter(update_interval=args.status_interval)
    try:
        config = resolve_config(args)
        code = dispatch(args.verb, config)
        emit_final()
        return code
    except EviTransferError as e:
        logger.error("%s", e)
        return exit_code_for(e)
    except OSError as e:
        logger.error("I/O failure: %s", e)
        return EXIT_DATA
    finally:
        stop_status_reporter()


if __name__ == "__main__":
    sys.exit(main())
