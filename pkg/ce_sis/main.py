"""Main application entry point for CE-SIS experiments"""

import argparse
import logging
import sys
from typing import List, Optional

from .config import ExperimentSpec, update_config_value
from .errors import CeSisError, ConfigError
from .harness import ExperimentRunner, oracle_p

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def setup_logging(spec: ExperimentSpec):
    """Configure logging for the application"""
    handlers = [logging.StreamHandler(sys.stdout)]
    if spec.log_file:
        handlers.insert(0, logging.FileHandler(spec.log_file))
    logging.basicConfig(
        level=getattr(logging, spec.log_level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
    )


def create_argument_parser() -> argparse.ArgumentParser:
    """Create command line argument parser"""
    parser = argparse.ArgumentParser(
        prog="ce-sis",
        description="Cross-entropy importance sampling for stochastic simulation models",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s run --config configs/numerical_example.cfg           # CE-SIS repetitions
  %(prog)s run --reps 10 --jobs 4 --out results/quick            # Override the file
  %(prog)s baselines --config configs/numerical_example.cfg     # CMC and optimal SIS rows
  %(prog)s oracle-p                                              # Quadrature P(Y > l)
  %(prog)s calibrate-l --write                                   # Solve for l, update the file
  %(prog)s kl-diag --report results/reports/run_0.json           # KL to the optimal density
        """
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        '--config', '-c',
        type=str,
        default="configs/numerical_example.cfg",
        help='Path to the experiment file (default: %(default)s)'
    )
    common.add_argument('--seed', type=int, help='Master seed')
    common.add_argument('--reps', type=int, help='Number of repetitions')
    common.add_argument('--out', type=str, help='Output directory')
    common.add_argument('--jobs', type=int, help='Worker processes for repetitions')

    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser('run', parents=[common], help='Run repeated CE-SIS experiments')
    subparsers.add_parser('baselines', parents=[common], help='Run the CMC and optimal SIS baselines')
    subparsers.add_parser('oracle-p', parents=[common], help='Failure probability by quadrature')
    calibrate = subparsers.add_parser('calibrate-l', parents=[common], help='Find l for calibration.target_p')
    calibrate.add_argument(
        '--write',
        action='store_true',
        help='Store the calibrated threshold.l in the config file'
    )
    kl = subparsers.add_parser('kl-diag', parents=[common], help='KL divergence per iteration of a run report')
    kl.add_argument('--report', type=str, required=True, help='Path to a run_<rep>.json report')
    return parser


def load_spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.from_file(args.config)
    return spec.with_overrides(seed=args.seed, repetitions=args.reps, out=args.out, jobs=args.jobs)


def dispatch(args, runner: ExperimentRunner) -> int:
    if args.command == 'run':
        reports = runner.run()
        runner.write_run(reports)
        failed = [r.repetition for r in reports if not r.completed]
        if failed:
            logging.getLogger(__name__).error(f"{len(failed)} repetitions aborted: {failed}")
            return EXIT_RUNTIME
        return EXIT_OK

    if args.command == 'baselines':
        runner.write_baselines(runner.run_baselines())
        return EXIT_OK

    if args.command == 'oracle-p':
        config = runner.resolve_threshold().run
        p = oracle_p(config.build_model(), config.build_density(), config.threshold)
        print(f"l={config.threshold:.12g} p={p:.6g}")
        return EXIT_OK

    if args.command == 'calibrate-l':
        # a fixed threshold.l in the file is recalibrated too
        runner.spec = runner.spec.with_threshold(None)
        l = runner.resolve_threshold().run.threshold
        print(f"l={l:.12g}")
        if args.write:
            update_config_value(args.config, "threshold.l", f"{l:.12g}")
            logging.getLogger(__name__).info(f"Wrote threshold.l to {args.config}")
        return EXIT_OK

    if args.command == 'kl-diag':
        runner.kl_diag(args.report)
        return EXIT_OK

    raise ValueError(f"Unknown command {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    parser = create_argument_parser()
    args = parser.parse_args(argv)

    try:
        spec = load_spec(args)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    setup_logging(spec)
    logger = logging.getLogger(__name__)

    config_errors = spec.validate()
    if config_errors:
        logger.error("Configuration errors:")
        for error in config_errors:
            logger.error(f"  - {error}")
        return EXIT_CONFIG

    logger.info(f"Starting ce-sis {args.command} ({args.config})")
    runner = ExperimentRunner(spec)
    try:
        return dispatch(args, runner)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except KeyboardInterrupt:
        logger.info("Process interrupted by user")
        return EXIT_RUNTIME
    except CeSisError as e:
        logger.error(f"Run failed: {e}", exc_info=True)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"Unexpected error: {str(e)}", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
