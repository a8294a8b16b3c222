"""
dualbranch: command line front end of the experiment harness.

Subcommands:
    gen      write a synthetic trajectory log (or --dump an existing one)
    run      execute one filter variant on a log and write results
    sweep    all variants x both scenarios over several seeds, with a comparison table
    convert  ingest an external CSV into the canonical log format

Every invocation prints one JSON status object on stdout, except ``gen``
and ``gen --dump`` without ``--out``, which print the CSV log itself.
Exit codes: 0 ok, 1 unexpected failure, 2 usage or configuration error,
3 file error.
"""

from __future__ import annotations

import argparse
from dataclasses import replace
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from colorama import Fore, Style, init
from halo import Halo

from DualBranchINS.constraint_branch import INIT_V_MAX
from DualBranchINS.eskf import INIT_GNSS_STD, INIT_NHC_STD
from DualBranchINS.fusion import WEIGHTING_MODES
from DualBranchINS.nav_core import PHI_MODES

from .experiment import (
    INIT_ACCEL_BIAS,
    INIT_ACCEL_DENSITY,
    INIT_GNSS_RATE,
    INIT_GYRO_BIAS,
    INIT_GYRO_DENSITY,
    INIT_INIT_S,
    INIT_N_SEEDS,
    INIT_OUTAGE_S,
    INIT_SEED,
    ExperimentSpec,
    Scenario,
    Variant,
    dumps_json,
    epoch_frame,
    format_table,
    results_document,
    run_sweep,
    run_variant,
    sweep_document,
    sweep_tasks,
)
from .log_io import convert_csv, dump_log, read_log, write_log
from .trajectory import (
    ALTITUDE_MODES,
    INIT_BOUNDS_SCALE,
    INIT_DURATION,
    INIT_RATE,
    PROFILES,
    ImuErrorSpec,
    gen_synthetic,
)

init()

logger = logging.getLogger(__name__)

LOG_DIR_ENV = "DUALBRANCH_LOG_DIR"
LOG_FILE_NAME = "dualbranch.log"
LOG_FORMAT = "dualbranch: %(name)s - %(levelname)s - %(message)s"
FILE_LOG_FORMAT = "%(asctime)s.%(msecs)03d - " + LOG_FORMAT
PACKAGE_LOGGERS = ("DualBranchINS", "DualBranchINS_harness")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as exceptions instead of exiting."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _status(status: str, **fields) -> None:
    print(json.dumps({"status": status, **fields}, sort_keys=True), flush=True)


def _say(color: str, text: str) -> None:
    print(f"{color}{text}{Style.RESET_ALL}", file=sys.stderr, flush=True)


def _setup_logging(debug: bool, log_dir: Optional[str], no_log_file: bool) -> None:
    level = logging.DEBUG if debug else logging.INFO
    log_dir = os.environ.get(LOG_DIR_ENV) or log_dir or "."

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handlers: List[logging.Handler] = [console_handler]

    if not no_log_file:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, LOG_FILE_NAME))
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(FILE_LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S'))
        handlers.append(file_handler)

    for name in PACKAGE_LOGGERS:
        package_logger = logging.getLogger(name)
        for handler in list(package_logger.handlers):
            package_logger.removeHandler(handler)
            handler.close()
        package_logger.setLevel(logging.DEBUG)
        package_logger.propagate = False
        for handler in handlers:
            package_logger.addHandler(handler)


def _column_pair(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected SRC=DST, got {text!r}")
    src, dst = text.split("=", 1)
    if not src or not dst:
        raise argparse.ArgumentTypeError(f"expected SRC=DST, got {text!r}")
    return src, dst


def _add_imu_error_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--accel_bias', type=float, default=INIT_ACCEL_BIAS,
                        help=f'Constant accelerometer bias on the body z axis (m/s^2). Default is {INIT_ACCEL_BIAS}.')
    parser.add_argument('--gyro_bias', type=float, default=INIT_GYRO_BIAS,
                        help=f'Constant gyro bias on every axis (rad/s). Default is {INIT_GYRO_BIAS}.')
    parser.add_argument('--accel_density', type=float, default=INIT_ACCEL_DENSITY,
                        help=f'Accelerometer white noise density (m/s^2/sqrt(Hz)). Default is {INIT_ACCEL_DENSITY}.')
    parser.add_argument('--gyro_density', type=float, default=INIT_GYRO_DENSITY,
                        help=f'Gyro white noise density (rad/s/sqrt(Hz)). Default is {INIT_GYRO_DENSITY}.')


def _add_trajectory_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--duration', type=float, default=INIT_DURATION,
                        help=f'Length of a synthetic log in seconds. Default is {INIT_DURATION}.')
    parser.add_argument('--rate', type=float, default=INIT_RATE,
                        help=f'IMU rate of a synthetic log in Hz. Default is {INIT_RATE}.')
    _add_imu_error_flags(parser)


def _add_spec_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--gnss_noise_std', type=float, default=INIT_GNSS_STD,
                        help=f'White noise added to truth positions for GNSS fixes (m). Default is {INIT_GNSS_STD}.')
    parser.add_argument('--gnss_rate', type=float, default=INIT_GNSS_RATE,
                        help=f'GNSS fix rate in Hz. Default is {INIT_GNSS_RATE}.')
    parser.add_argument('--init_s', type=float, default=INIT_INIT_S,
                        help=f'Initialization window with GNSS in the gnss-denied scenario (s). Default is {INIT_INIT_S}.')
    parser.add_argument('--outage_s', type=float, default=INIT_OUTAGE_S,
                        help=f'GNSS outage length in the gnss-denied scenario (s). Default is {INIT_OUTAGE_S}.')
    parser.add_argument('--bounds_scale', type=float, default=INIT_BOUNDS_SCALE,
                        help=f'Envelope bounds are this factor times the truth extrema. Default is {INIT_BOUNDS_SCALE}.')
    parser.add_argument('--v_max', type=float, default=INIT_V_MAX,
                        help=f'Forward speed cap in m/s. Default is {INIT_V_MAX}.')
    parser.add_argument('--altitude_bounds', choices=ALTITUDE_MODES, default="relative",
                        help='Altitude bounds about the start altitude (relative) or about zero (absolute). Default is relative.')
    parser.add_argument('--weighting', choices=WEIGHTING_MODES, default="normalized",
                        help='Fusion weight form. Default is normalized.')
    parser.add_argument('--phi_mode', choices=PHI_MODES, default="exact",
                        help='State transition matrix: series exponential or first order. Default is exact.')
    parser.add_argument('--nhc_std', type=float, default=INIT_NHC_STD,
                        help=f'Standard deviation of the NHC pseudo-measurement (m/s). Default is {INIT_NHC_STD}.')


def build_parser() -> JsonArgumentParser:
    parser = JsonArgumentParser(
        prog="dualbranch",
        description='Dual-branch INS/GNSS filter experiments: synthetic logs, variant runs and sweeps.')
    parser.add_argument('-D', '--debug', action='store_true', help='Enable debug logging.')
    parser.add_argument('--log_dir', type=str, default=None,
                        help=f'Directory of {LOG_FILE_NAME}. The {LOG_DIR_ENV} environment variable takes precedence. Default is the working directory.')
    parser.add_argument('--no_log_file', action='store_true', help=f'Do not write {LOG_FILE_NAME}.')
    sub = parser.add_subparsers(dest="command", parser_class=JsonArgumentParser)
    sub.required = True

    gen = sub.add_parser('gen', help='Write a synthetic trajectory log as canonical CSV.')
    gen.add_argument('--profile', choices=PROFILES, default="hilly", help='Trajectory profile. Default is hilly.')
    gen.add_argument('--seed', type=int, default=INIT_SEED, help=f'Seed of the IMU noise. Default is {INIT_SEED}.')
    gen.add_argument('--out', metavar='FILE', default=None, help='Output CSV. Default is stdout.')
    gen.add_argument('--dump', metavar='LOG', default=None,
                     help='Read an existing canonical log and write it back instead of generating one.')
    _add_trajectory_flags(gen)

    run = sub.add_parser('run', help='Run one filter variant and write results JSON and per-epoch CSV.')
    run.add_argument('--log', metavar='FILE', default=None,
                     help='Canonical log with truth. Default is a synthetic log of --profile.')
    run.add_argument('--profile', choices=PROFILES, default="hilly", help='Synthetic profile when no --log is given. Default is hilly.')
    run.add_argument('--variant', choices=[v.value for v in Variant], default=Variant.DUAL.value,
                     help='Filter variant. Default is DUAL.')
    run.add_argument('--scenario', choices=[s.value for s in Scenario], default=Scenario.FULL_GNSS.value,
                     help='GNSS scenario. Default is full-gnss.')
    run.add_argument('--seed', type=int, default=INIT_SEED,
                     help=f'Seed of the GNSS noise and of the synthetic IMU noise. Default is {INIT_SEED}.')
    run.add_argument('--out_dir', default=".", help='Directory for the result files. Default is the working directory.')
    run.add_argument('--name', default=None, help='Prefix of the result files. Default is <log>_<variant>_<scenario>.')
    _add_trajectory_flags(run)
    _add_spec_flags(run)

    sweep = sub.add_parser('sweep', help='Run every variant in both scenarios over several seeds.')
    sweep.add_argument('--profile', choices=PROFILES, action='append', default=None,
                       help='Profile to sweep, repeatable. Default is hilly.')
    sweep.add_argument('--seed', type=int, default=INIT_SEED, help=f'First seed. Default is {INIT_SEED}.')
    sweep.add_argument('--n_seeds', type=int, default=INIT_N_SEEDS,
                       help=f'Number of consecutive seeds. Default is {INIT_N_SEEDS}.')
    sweep.add_argument('--scenario', choices=[s.value for s in Scenario], action='append', default=None,
                       help='Scenario to sweep, repeatable. Default is both.')
    sweep.add_argument('--variant', choices=[v.value for v in Variant], action='append', default=None,
                       help='Variant to sweep, repeatable. Default is all four.')
    sweep.add_argument('-j', '--jobs', type=int, default=1, help='Worker processes. Default is 1.')
    sweep.add_argument('--out_dir', default=".", help='Directory for sweep_results.json. Default is the working directory.')
    _add_trajectory_flags(sweep)
    _add_spec_flags(sweep)

    convert = sub.add_parser('convert', help='Convert an external CSV into a canonical log.')
    convert.add_argument('input', help='External CSV file.')
    convert.add_argument('--out', metavar='FILE', default=None,
                         help='Output CSV. Default is <input stem>_canonical.csv next to the input.')
    convert.add_argument('--map', metavar='SRC=DST', type=_column_pair, action='append', default=[],
                         help='Rename column SRC to canonical column DST, repeatable.')
    convert.add_argument('--drop', metavar='COLUMN', action='append', default=[], help='Ignore an input column, repeatable.')
    convert.add_argument('--degrees', action='store_true', help='Angular rates and truth angles are in degrees.')
    convert.add_argument('--name', default=None, help='Log name. Default is the input file stem.')
    return parser


def _imu_errors(args) -> ImuErrorSpec:
    return ImuErrorSpec(
        accel_bias=(0.0, 0.0, args.accel_bias),
        gyro_bias=(args.gyro_bias,) * 3,
        accel_density=args.accel_density,
        gyro_density=args.gyro_density,
    )


def _spec_from_args(args, **overrides) -> ExperimentSpec:
    fields = dict(
        gnss_noise_std=args.gnss_noise_std,
        gnss_rate=args.gnss_rate,
        init_s=args.init_s,
        outage_s=args.outage_s,
        bounds_scale=args.bounds_scale,
        v_max=args.v_max,
        altitude_bounds=args.altitude_bounds,
        weighting=args.weighting,
        phi_mode=args.phi_mode,
        nhc_std=args.nhc_std,
    )
    fields.update(overrides)
    return ExperimentSpec(**fields)


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)


def _cmd_gen(args) -> Dict[str, object]:
    if args.dump:
        log = read_log(args.dump)
    else:
        log = gen_synthetic(args.profile, args.duration, args.rate, _imu_errors(args), args.seed)
    if args.out is None:
        sys.stdout.write(dump_log(log))
        sys.stdout.flush()
        return {}
    write_log(log, args.out)
    logger.info("wrote %d epochs to %s", len(log.imu), args.out)
    return {"log": args.out, "epochs": len(log.imu)}


def _cmd_run(args) -> Dict[str, object]:
    spec = _spec_from_args(args, scenario=args.scenario, variant=args.variant, seed=args.seed)
    if args.log:
        log = read_log(args.log)
    else:
        log = gen_synthetic(args.profile, args.duration, args.rate, _imu_errors(args), args.seed)

    spinner = None
    if sys.stderr.isatty():
        spinner = Halo(text=f"{spec.variant.value} on {log.meta.name}", stream=sys.stderr)
        spinner.start()
    try:
        result = run_variant(log, spec)
    finally:
        if spinner is not None:
            spinner.stop()

    name = args.name or f"{log.meta.name}_{spec.variant.value}_{spec.scenario.value}"
    os.makedirs(args.out_dir, exist_ok=True)
    results_path = os.path.join(args.out_dir, f"{name}_results.json")
    epochs_path = os.path.join(args.out_dir, f"{name}_epochs.csv")
    _write_text(results_path, dumps_json(results_document(result)))
    epoch_frame(result, log.truth).to_csv(epochs_path, index=False, lineterminator="\n")

    m = result.metrics
    _say(Fore.GREEN, f"{spec.variant.value} {spec.scenario.value} on {log.meta.name}: "
                     f"PRMSE {m.prmse:.3f} m  VRMSE {m.vrmse:.3f} m/s  ARMSE {m.armse:.5f} rad  "
                     f"h {m.h_prmse:.3f} m  v {m.v_prmse:.3f} m")
    if any(result.fallbacks.values()):
        _say(Fore.YELLOW, f"solver fallbacks: {result.fallbacks}")
    return {"results": results_path, "epochs": epochs_path}


def _cmd_sweep(args) -> Dict[str, object]:
    if args.n_seeds < 1:
        raise ValueError(f"--n_seeds must be at least 1, got {args.n_seeds}")
    if args.jobs < 1:
        raise ValueError(f"--jobs must be at least 1, got {args.jobs}")
    profiles = list(dict.fromkeys(args.profile or ["hilly"]))
    scenarios = [Scenario(s) for s in dict.fromkeys(args.scenario or [s.value for s in Scenario])]
    variants = [Variant(v) for v in dict.fromkeys(args.variant or [v.value for v in Variant])]
    seeds = list(range(args.seed, args.seed + args.n_seeds))
    base = _spec_from_args(args, seed=args.seed)
    imu_errors = _imu_errors(args)
    for scenario in scenarios:
        replace(base, scenario=scenario).validate_for(args.duration)

    tasks = sweep_tasks(profiles, seeds, base, args.duration, args.rate, imu_errors, scenarios, variants)
    _say(Fore.CYAN, f"sweeping {len(tasks)} runs over profiles {', '.join(profiles)} with {args.jobs} job(s)")
    rows = run_sweep(tasks, jobs=args.jobs, progress=sys.stderr.isatty())
    document = sweep_document(rows, base, profiles, seeds, args.duration, args.rate, imu_errors)

    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "sweep_results.json")
    _write_text(path, dumps_json(document))
    print(Style.BRIGHT + format_table(document["table"], document["improvement"]) + Style.RESET_ALL,
          file=sys.stderr, flush=True)
    return {"results": path, "runs": len(rows)}


def _cmd_convert(args) -> Dict[str, object]:
    log = convert_csv(args.input, column_map=dict(args.map), degrees=args.degrees,
                      name=args.name, drop_columns=args.drop)
    out = args.out or os.path.splitext(args.input)[0] + "_canonical.csv"
    write_log(log, out)
    logger.info("converted %s: %d epochs, truth %s", args.input, len(log.imu),
                "present" if log.truth is not None else "absent")
    return {"log": out, "epochs": len(log.imu), "truth": log.truth is not None}


COMMANDS = {
    "gen": _cmd_gen,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "convert": _cmd_convert,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _status("error", kind="usage", message=str(exc))
        return EXIT_USAGE

    try:
        _setup_logging(args.debug, args.log_dir, args.no_log_file)
    except OSError as exc:
        _status("error", kind="io", message=f"cannot open log file: {exc}")
        return EXIT_IO

    try:
        fields = COMMANDS[args.command](args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        logger.error("%s", exc)
        _status("error", kind="io", message=str(exc))
        return EXIT_IO
    except ValueError as exc:
        logger.error("%s", exc)
        _status("error", kind="config", message=str(exc))
        return EXIT_USAGE
    except OSError as exc:
        logger.error("%s", exc)
        _status("error", kind="io", message=str(exc))
        return EXIT_IO
    except KeyboardInterrupt:
        _say(Fore.YELLOW, "interrupted")
        _status("error", kind="interrupted", message="interrupted by user")
        return EXIT_FAILURE
    except Exception as exc:
        logger.exception("%s failed", args.command)
        _status("error", kind="internal", message=f"{type(exc).__name__}: {exc}")
        return EXIT_FAILURE

    if fields:
        _status("ok", command=args.command, **fields)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
