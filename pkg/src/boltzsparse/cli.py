"""Command-line entry point: ``boltzsparse run | hjb | compare``.

Exit codes: 0 success, 2 invalid configuration, 3 non-convergence, 4 I/O
(including missing or mismatched run artifacts).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import CONTROLS, build_config, load_config, parse_text, with_paper_scale
from .errors import GeometryMismatch, InvalidConfig, NonConvergence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGENCE = 3
EXIT_IO = 4


def apply_thread_cap(env=os.environ) -> int:
    """Honour KSC_THREADS (0 or unset means all available threads)."""
    import numba

    raw = env.get("KSC_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig("KSC_THREADS", f"not an integer: {raw!r}") from None
    if n < 0:
        raise InvalidConfig("KSC_THREADS", "must be >= 0")
    limit = numba.config.NUMBA_NUM_THREADS
    n = limit if n == 0 else min(n, limit)
    numba.set_num_threads(n)
    return n


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boltzsparse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one configured experiment")
    run.add_argument("--config", help="key = value config file")
    run.add_argument("--out", default="run_out", help="output directory")
    run.add_argument("--seed", type=int)
    run.add_argument("--control", choices=CONTROLS)
    run.add_argument("--preset", choices=("hk", "ar"))
    run.add_argument("--paper-scale", action="store_true",
                     help="large scale N_s=5e5, epsilon=5e-5 (slow)")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override any config key (repeatable)")
    run.add_argument("--resume", action="store_true",
                     help="continue from the checkpoint in --out")

    hjb = sub.add_parser("hjb", help="precompute the infinite-horizon feedback table")
    hjb.add_argument("--config", required=True)
    hjb.add_argument("--out", default="feedback_table.csv")
    hjb.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    cmp_ = sub.add_parser("compare", help="tabulate metrics across run directories")
    cmp_.add_argument("dirs", nargs="+")
    cmp_.add_argument("--out", help="write CSV here instead of stdout")
    return p


def _overrides(args) -> dict:
    extra = parse_text("\n".join(args.set), "--set")
    for key in ("seed", "control", "preset"):
        value = getattr(args, key, None)
        if value is not None:
            extra[key] = value
    return extra


def _config(args):
    extra = _overrides(args)
    if args.config:
        cfg = load_config(args.config, **extra)
    else:
        cfg = build_config(**extra)
    if getattr(args, "paper_scale", False):
        cfg = with_paper_scale(cfg)
    return cfg


def _dispatch(args) -> int:
    from . import experiment

    if args.command == "run":
        cfg = _config(args)
        apply_thread_cap()
        report = experiment.run_experiment(cfg, args.out, resume=args.resume)
        print(report.to_json())
    elif args.command == "hjb":
        cfg = _config(args)
        apply_thread_cap()
        summary = experiment.precompute_hjb(cfg, args.out)
        state = "cache hit" if summary.cache_hit else "computed"
        print(f"{summary.path}: {state}, {summary.iterations} iterations, "
              f"residual {summary.residual:.3e}")
    else:
        table = experiment.compare_runs(args.dirs)
        if args.out:
            experiment.atomic_write(args.out, table)
        else:
            sys.stdout.write(table)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except InvalidConfig as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergence as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (OSError, GeometryMismatch) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # library-level validation that escaped the config checks
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
