"""Command line entry point ``simulate``.

Exit codes: 0 all checks pass, 2 checks failed, 3 solver failure, 4 config error
(IO failures while writing outputs also exit with 4).

``CHEMOJKO_NUM_THREADS`` caps the BLAS/OpenMP thread pools of each run.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

EXIT_OK, EXIT_CHECKS, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 4
THREADS_ENV = "CHEMOJKO_NUM_THREADS"

log = logging.getLogger("chemojko")


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise SystemExit(f"{THREADS_ENV} must be an integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


def _exit_code(status: str) -> int:
    return {"ok": EXIT_OK, "checks_failed": EXIT_CHECKS, "solver_failure": EXIT_SOLVER}[status]


def run_one(path: str, out: str | None, check_only: bool = False) -> tuple[str, int, str]:
    """Run one config file; returns (path, exit code, one-line summary)."""
    from .config import ConfigError, parse_config
    from .driver import run

    limiter = _thread_limit()
    try:
        try:
            cfg = parse_config(path)
        except ConfigError as exc:
            return path, EXIT_CONFIG, f"config error: {exc}"
        if check_only:
            return path, EXIT_OK, "config ok"
        target = out if out is not None else cfg.out
        try:
            res = run(cfg, target)
        except OSError as exc:
            return path, EXIT_CONFIG, f"cannot write outputs: {exc}"
        if res.status == "solver_failure":
            msg = f"solver failure at step {res.failed_step}: {res.error}"
        elif res.status == "checks_failed":
            fails = res.failures()
            shown = ", ".join(f"{name}@{n}" for n, name in fails[:8])
            msg = f"{len(fails)} failed checks: {shown}"
        else:
            msg = f"all checks pass ({len(res.trajectory)} steps, {res.wall_seconds:.1f}s)"
        return path, _exit_code(res.status), f"{msg} -> {target}"
    finally:
        if limiter is not None:
            limiter.unregister()


def _sweep(pattern: str, out: str | None, check_only: bool, workers: int | None) -> int:
    paths = sorted(glob.glob(pattern))
    if not paths:
        print(f"no config matches {pattern!r}", file=sys.stderr)
        return EXIT_CONFIG
    outs = [None if out is None else os.path.join(out, os.path.splitext(os.path.basename(p))[0]) for p in paths]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run_one, paths, outs, [check_only] * len(paths)))
    for path, code, msg in results:
        print(f"{path}: {msg}")
    return max(code for _, code, _ in results)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simulate", description="Congested chemotaxis minimizing-movement runs.")
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--out", help="output directory (overrides [output] out)")
    p.add_argument("--sweep", metavar="GLOB", help="run every matching config in parallel, one subdirectory each")
    p.add_argument("--workers", type=int, default=None, help="worker processes for --sweep")
    p.add_argument("--print-defaults", action="store_true", help="print the default configuration and exit")
    p.add_argument("--check-only", action="store_true", help="validate the configuration and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if args.print_defaults:
        from .config import print_defaults

        sys.stdout.write(print_defaults())
        return EXIT_OK
    if args.sweep:
        return _sweep(args.sweep, args.out, args.check_only, args.workers)
    if not args.config:
        print("simulate: need --config, --sweep or --print-defaults", file=sys.stderr)
        return EXIT_CONFIG
    path, code, msg = run_one(args.config, args.out, args.check_only)
    print(f"{path}: {msg}", file=sys.stderr if code else sys.stdout)
    return code


if __name__ == "__main__":
    sys.exit(main())
