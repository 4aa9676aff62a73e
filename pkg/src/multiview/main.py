#!/usr/bin/env python3
"""
Multiview CLI - generate instances, recover prototypes, run sweeps and self-tests.
"""

import sys
import math
import logging
import argparse
from typing import List, Optional
from pathlib import Path

from config_manager import ConfigManager
from core import nmse
from synthdata import build_instance, load_instance, save_instance
from bench import METHODS, emit_report, run_method, run_selftest, run_sweep

logger = logging.getLogger(__name__)


def setup_logging(level: str = "INFO", log_file: Optional[Path] = None) -> None:
    """Configure root logging: stderr always, plus a log file when requested."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
        handlers=handlers,
        force=True
    )


def _parse_snr(value: str) -> float:
    if value.lower() in ("inf", "noiseless"):
        return math.inf
    return float(value)


def cmd_gen(args: argparse.Namespace, config: ConfigManager) -> int:
    scene = config.scene_spec()
    perturb = config.perturb_spec()
    out_dir = Path(args.out or "build/instances")
    for offset in range(args.count):
        seed = args.seed + offset
        instance = build_instance(scene, perturb, args.views, args.rate, args.snr, seed)
        path = save_instance(instance, out_dir / f"instance_{scene.letter}_K{args.views}_seed{seed}.json")
        print(f"{path}  K={instance.K} rate={instance.rate} total_rate={instance.total_rate:.2f} snr={args.snr}")
    return 0


def cmd_recover(args: argparse.Namespace, config: ConfigManager) -> int:
    instance = load_instance(Path(args.instance))
    logger.info(f"Running {args.method} on {args.instance}")
    x_hat, iters = run_method(args.method, instance, config.recovery_config(), config.baseline_config(),
                              workers=args.workers)
    print(f"method={args.method} nmse={nmse(x_hat, instance.x_true):.6e} iters={iters}")
    return 0


def cmd_sweep(args: argparse.Namespace, config: ConfigManager) -> int:
    sweep = config.load_sweep_config(Path(args.config))
    update = {}
    if args.seed is not None:
        update["base_seed"] = args.seed
    if args.workers is not None:
        update["workers"] = args.workers
    if args.method:
        update["methods"] = args.method
    if args.no_timing:
        update["record_timing"] = False
    if update:
        sweep = type(sweep).model_validate({**sweep.model_dump(by_alias=True), **update})

    result = run_sweep(sweep)
    out_dir = Path(args.out or sweep.output)
    paths = emit_report(result, out_dir)

    print(f"\nSweep '{sweep.name}': {len(result.records)} records, {len(result.failures)} failures")
    rows = result.aggregates().itertuples(index=False) if result.records else []
    for row in rows:
        print(f"  {row.method:<9} rate={row.rate:<4} snr={row.snr_db:<5} K={row.views}  "
              f"nmse={row.nmse_mean:.4e} ± {row.nmse_std:.2e}  (n={row.count})")
    print(f"Records: {paths['records']}")
    print(f"Summary: {paths['summary']}")
    return 0 if not result.failures else 2


def cmd_selftest(args: argparse.Namespace, config: ConfigManager) -> int:
    outcomes = run_selftest(seed=args.seed, suites=args.suite)
    print("\nSelftest Summary:")
    for outcome in outcomes:
        mark = "✓" if outcome.passed else "✗"
        print(f"{mark} {outcome.name:<13} {outcome.detail} ({outcome.seconds:.2f}s)")
    return 0 if all(o.passed for o in outcomes) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="OT-regularized multiview recovery under unknown permutations",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py gen --seed 7 --views 2 --rate 0.8 --snr inf --out build/instances
  python main.py recover build/instances/instance_E_K2_seed7.json --method proposed
  python main.py sweep --config config/sweep_rate.yaml --workers 4 --out build/sweeps/rate
  python main.py selftest --seed 0
        """
    )
    parser.add_argument(
        '--settings',
        default=None,
        help='Default settings file (default: config/config.yaml)'
    )
    parser.add_argument(
        '--verbose', '-v',
        action='store_true',
        help='Enable verbose logging'
    )
    parser.add_argument(
        '--version',
        action='version',
        version="Multiview 1.0.0"
    )
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', help='Write synthetic instance files')
    gen.add_argument('--seed', type=int, default=0, help='Instance seed (default: 0)')
    gen.add_argument('--count', type=int, default=1, help='Number of consecutive seeds to generate')
    gen.add_argument('--views', '-K', type=int, default=2, help='Number of views (default: 2)')
    gen.add_argument('--rate', type=float, default=0.8, help='Per-view measurement rate (default: 0.8)')
    gen.add_argument('--snr', type=_parse_snr, default=math.inf, help='Input SNR in dB or "inf" (default: inf)')
    gen.add_argument('--out', '-o', default=None, help='Output directory (default: build/instances)')
    gen.set_defaults(handler=cmd_gen)

    rec = sub.add_parser('recover', help='Run one method on one instance and print NMSE')
    rec.add_argument('instance', help='Instance JSON file')
    rec.add_argument('--method', choices=METHODS, default='proposed')
    rec.add_argument('--workers', type=int, default=1, help='Threads for per-view updates')
    rec.set_defaults(handler=cmd_recover)

    sweep = sub.add_parser('sweep', help='Run a full sweep from a YAML config')
    sweep.add_argument('--config', required=True, help='Sweep YAML file')
    sweep.add_argument('--seed', type=int, default=None, help='Override the base seed')
    sweep.add_argument('--workers', type=int, default=None, help='Worker processes')
    sweep.add_argument('--out', '-o', default=None, help='Report directory (default: from config)')
    sweep.add_argument('--method', action='append', choices=METHODS,
                       help='Restrict to a method (repeatable)')
    sweep.add_argument('--no-timing', action='store_true', help='Write wall_time_s as 0.0')
    sweep.set_defaults(handler=cmd_sweep)

    test = sub.add_parser('selftest', help='Run the oracle and gradient acceptance suites')
    test.add_argument('--seed', type=int, default=0)
    test.add_argument('--suite', action='append', default=None,
                      help='Run only the named suite (repeatable)')
    test.set_defaults(handler=cmd_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main CLI entry point.
    """
    args = build_parser().parse_args(argv)
    config = ConfigManager(Path(args.settings) if args.settings else None)

    log_file = config.get_log_directory() / "multiview.log" if config.log_to_file() else None
    setup_logging("DEBUG" if args.verbose else config.get_log_level(), log_file)
    if args.verbose:
        logger.debug("Verbose logging enabled")

    try:
        return args.handler(args, config)
    except Exception as e:
        logger.error(f"Command {args.command} failed: {str(e)}")
        print(f"✗ Error: {str(e)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
