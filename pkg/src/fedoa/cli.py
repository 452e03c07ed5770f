"""Command-line entry point: ``fedoa run | check | bounds``.

Exit codes: 0 success, 1 failed checks, 2 bad configuration, 3 numeric
divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence, Tuple

from . import checks
from .config import ExperimentFile
from .errors import ConfigError, DivergenceError
from .io import write_run_artifacts
from .protocol import run_experiment, theorem4_stepsizes

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4
WORKERS_ENV = "FEDOA_WORKERS"


def run_point(point: ExperimentFile, out_dir: str) -> Tuple[str, float]:
    """Run one sweep point and write its artifacts; returns ``(dir, wall seconds)``."""
    report = run_experiment(point.fed_config(), point.benchmark(), point.model_parts(), point.to_dict())
    enc = point.model_parts().enc
    out = write_run_artifacts(out_dir, report, enc.adapted_indices)
    (out / "config.toml").write_text(point.to_toml())
    return str(out), report.wall_clock_s


def cmd_run(config_path: str, out: Optional[str] = None, workers: Optional[int] = None) -> int:
    try:
        exp = ExperimentFile.load(config_path)
    except ConfigError as exc:
        print(f"error: {config_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read {config_path}: {exc}", file=sys.stderr)
        return EXIT_IO
    root = Path(out if out is not None else exp.output.dir)
    jobs = [(point, str(root / name) if name else str(root)) for name, point in exp.points()]
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                done = list(pool.map(run_point, *zip(*jobs)))
        else:
            done = [run_point(point, path) for point, path in jobs]
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: cannot write results: {exc}", file=sys.stderr)
        return EXIT_IO
    for path, seconds in done:
        print(f"wrote {path}/report.json ({seconds:.2f}s)")
    return EXIT_OK


def cmd_check() -> int:
    results = checks.run_checks()
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_bounds(L: float, sigma: float, lam: float, K: int, T: int) -> int:
    try:
        eta_l, eta_g = theorem4_stepsizes(L, sigma, lam, K, T)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"eta_l_max = {eta_l:.17g}")
    print(f"eta_g_max = {eta_g:.17g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedoa", description="Federated adapter tuning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment file (all sweep points)")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None, help="output directory (overrides [output].dir)")
    run.add_argument("--workers", type=int, default=None, help=f"parallel sweep points (default ${WORKERS_ENV} or 1)")

    sub.add_parser("check", help="run the fast verification suite")

    bounds = sub.add_parser("bounds", help="print the convergence step-size bounds")
    bounds.add_argument("--L", type=float, required=True)
    bounds.add_argument("--sigma", type=float, required=True)
    bounds.add_argument("--lambda", dest="lam", type=float, required=True)
    bounds.add_argument("--K", type=int, required=True)
    bounds.add_argument("--T", type=int, required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, args.workers)
    if args.command == "check":
        return cmd_check()
    return cmd_bounds(args.L, args.sigma, args.lam, args.K, args.T)


if __name__ == "__main__":
    sys.exit(main())
