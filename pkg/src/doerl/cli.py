"""Command-line entry point: ``doerl run|compare|validate``.

Exit codes: 0 success, 1 invariant failure (validate), 2 configuration or
input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .config import ConfigError, load_config
from .experiments import CompareError, build_instance, run_config, validate_config, write_comparison
from .mdp import InvariantError

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def parse_seeds(text: str) -> list[int]:
    """Nonnegative seeds: ``"0,3,5"``, ``"0-19"`` (inclusive) or a mix of both."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        updates = {}
        if args.seeds is not None:
            updates["seeds"] = args.seeds
        if args.out is not None:
            updates["output_dir"] = args.out
        if updates:
            config = type(config).model_validate({**config.model_dump(), **updates})
    except (ConfigError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    out_dir = Path(config.output_dir)
    try:
        build_instance(config, args.config, config.seeds[0])
    except (InvariantError, ValueError, OSError) as exc:
        _err(f"invalid environment or model class: {exc}")
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        timings = run_config(config, args.config, out_dir, workers=args.workers)
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure exit code
        _err(f"run failed: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    print(f"wrote {2 * len(timings)} run files to {out_dir} in {time.perf_counter() - start:.1f}s")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        csv_path, svg_path = write_comparison(args.dirs, args.out)
    except CompareError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        _err(f"compare failed: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    print(f"wrote {csv_path} and {svg_path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    try:
        results = validate_config(config, args.config)
    except (ValueError, OSError) as exc:
        _err(f"cannot build the configured instance: {exc}")
        return EXIT_CONFIG
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.invariant}: {r.detail}")
    if failed:
        _err("invariant failures: " + ", ".join(r.invariant for r in failed))
        return EXIT_INVARIANT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doerl", description="Doubly oracle-efficient RL experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config over its seeds")
    run.add_argument("config")
    run.add_argument("--seeds", type=parse_seeds, default=None, help="override seeds, e.g. 0-19 or 1,4,7")
    run.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    run.add_argument("--out", default=None, help="override the output directory")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="aggregate run directories into a table and plot")
    cmp_.add_argument("dirs", nargs="+")
    cmp_.add_argument("--out", required=True)
    cmp_.set_defaults(func=cmd_compare)

    val = sub.add_parser("validate", help="fast invariant checks for a config's instance")
    val.add_argument("config")
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if getattr(args, "workers", 1) < 1:
        _err("--workers must be at least 1")
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
