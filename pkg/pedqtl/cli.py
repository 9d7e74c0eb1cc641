"""
Command line front end: pedqtl {scan,batch,power,kinship} --control FILE

Each subcommand is registered by its own register_*_command function and
runs one pipeline entry point. PedQtlError subclasses map to their exit
codes; anything unexpected exits 1 with a traceback in the log.
"""

import sys
import logging
import argparse
from typing import Callable, List, Optional

from . import __version__
from .batch import run_batch
from .control import ControlFile, read_control_file
from .errors import PedQtlError
from .helper.system import log_system_info
from .helper.workers import disable_progress_bars
from .pipeline import run_kinship, run_power, run_scan

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--control", required=True, help="control file (key = value lines)")
    parser.add_argument("--threads", type=int, default=None, help="worker threads; overrides the control file")
    parser.add_argument("--seed", type=int, default=None, help="random seed; overrides the control file")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--no-progress", action="store_true", help="disable progress bars")


def _register(subparsers, name: str, help_text: str, runner: Callable[[ControlFile], int]) -> None:
    parser = subparsers.add_parser(name, help=help_text)
    _add_common_arguments(parser)
    parser.set_defaults(runner=runner)


def register_scan_command(subparsers) -> None:
    _register(subparsers, "scan", "QC, null fit and genome scan for the traits in the control file", run_scan)


def register_batch_command(subparsers) -> None:
    _register(subparsers, "batch", "univariate scans for every trait in batch_trait_list", run_batch)


def register_power_command(subparsers) -> None:
    _register(subparsers, "power", "simulation power/size study from the [simulation] section", run_power)


def register_kinship_command(subparsers) -> None:
    _register(subparsers, "kinship", "export the kinship and structure kernels", run_kinship)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pedqtl", description="Pedigree-aware multivariate QTL analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_scan_command(subparsers)
    register_batch_command(subparsers)
    register_power_command(subparsers)
    register_kinship_command(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    if args.no_progress:
        disable_progress_bars()

    try:
        control = read_control_file(args.control)
        control.override(threads=args.threads, seed=args.seed)
        logger.info(f"pedqtl {__version__} {args.command} with {control.source} ({control['threads']} threads)")
        log_system_info()
        return args.runner(control)
    except PedQtlError as e:
        stage = getattr(e, 'stage', None) or "setup"
        logger.error(f"[{stage}] {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
