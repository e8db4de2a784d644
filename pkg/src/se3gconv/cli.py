"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 a check failed
(gradcheck, equiv), 3 file-system error.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import grids
from .config import ConfigError, RunConfig, load_run_config, run_config_from_dict

EXIT_OK, EXIT_INVALID, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("se3gconv")


class CheckFailed(Exception):
    pass


def _threads(n):
    """Cap BLAS/OpenMP pools (and numba) at ``n`` workers for the duration of the command."""
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return threadpool_limits(limits=n)


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "config", None):
        cfg = load_run_config(args.config, overrides)
    else:
        cfg = run_config_from_dict({}, overrides)
    return cfg


def _echo_path_for(csv_path: Path) -> Path:
    return csv_path.with_name(csv_path.stem + ".config.yaml")


# -- subcommands ---------------------------------------------------------------------

def cmd_grid_gen(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    opts = grids.RepulsionOptions(power=args.power, step_size=args.step_size, max_iters=args.max_iters, tol=args.tol)
    grid = grids.generate_uniform_grid(args.n, np.random.default_rng(args.seed), opts, seed=args.seed)
    grids.save_grid(grid, args.out)
    print(f"wrote {grid.resolution} rotations to {args.out} (min distance {grid.uniformity:.6f} rad)")
    return EXIT_OK


def cmd_grid_stats(args) -> int:
    grid = grids.load_grid(args.path)
    stats = grids.uniformity_stats(grid)
    print(f"N: {grid.resolution}")
    print(f"kind: {grid.kind}")
    for k in sorted(stats):
        print(f"{k}: {stats[k]:.12f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    from .model import VARIANTS

    if args.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}; expected one of {VARIANTS}")
    failed = 0
    for r in run_suite(args.variant, args.seed):
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:48s} {r.error:.3e} (tol {r.tol:.0e})")
        failed += not r.passed
    if failed:
        raise CheckFailed(f"{failed} gradient check(s) failed")
    return EXIT_OK


def cmd_equiv(args) -> int:
    from . import experiments, harness

    cfg = _config(args)
    out = Path(args.out)
    with _threads(args.threads or cfg.threads):
        rows = experiments.run_equiv(cfg)
    experiments.write_echo(cfg, _echo_path_for(out))
    harness.write_csv(rows, out, experiments.EQUIV_COLUMNS)
    for r in rows:
        print(f"{r['mode']:15s} {r['grid_kind']:10s} N={r['grid_resolution']:<3d} seed={r['seed']} "
              f"mean={r['mean_error']:.3e} max={r['max_error']:.3e}")
    bad = [r for r in rows if r["mode"] == "exact-subgroup" and not r["max_error"] < 1e-6]
    means = list(experiments.sweep_means(rows).values())
    if bad:
        raise CheckFailed(f"exact-subgroup invariance error above 1e-6 for {[r['grid_kind'] for r in bad]}")
    if means and not harness.is_non_increasing(means):
        raise CheckFailed(f"continuous invariance error is not non-increasing in resolution: {means}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .config import _build_section
    from .experiments import run_synth
    import yaml

    text = Path(args.spec).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{args.spec}: not valid YAML ({exc})") from None
    if isinstance(raw, dict) and "data" in raw:
        raw = raw["data"]
    spec = _build_section("data", raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.yaml").write_text(yaml.safe_dump({"data": spec.to_dict()}, sort_keys=True))
    n = run_synth(spec, out)
    print(f"wrote {n} volumes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiments import run_train

    cfg = _config(args)
    with _threads(args.threads or cfg.threads):
        out = run_train(cfg, args.out)
    final = {r["split"]: r["accuracy"] for r in out["result"].metrics if r["epoch"] == cfg.train.epochs}
    summary = ", ".join(f"{k} {v:.4f}" for k, v in sorted(final.items())) or "no evaluation"
    print(f"trained {cfg.model.variant} for {cfg.train.epochs} epochs ({summary}); wrote {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from . import experiments, harness

    cfg = _config(args)
    out = Path(args.out)
    with _threads(args.threads or cfg.threads):
        rows = experiments.run_report(cfg)
    experiments.write_echo(cfg, _echo_path_for(out))
    harness.write_report_csv(rows, out)
    for r in rows:
        print(f"{r['model_variant']:13s} seed={r['seed']} acc={r['acc']:.4f} rotated={r['rotated_acc']:.4f} "
              f"drop={r['drop_percent']:.2f}% inv={r['mean_inv_error']:.3e}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="se3gconv", description="Separable SE(3) group convolutions on volumes.")
    p.add_argument("--threads", type=int, default=None, help="cap the number of worker threads")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    grid = sub.add_parser("grid", help="rotation grids").add_subparsers(dest="grid_command", required=True)
    g = grid.add_parser("gen", help="generate a repulsion grid")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    defaults = grids.RepulsionOptions()
    g.add_argument("--power", type=float, default=defaults.power)
    g.add_argument("--step-size", type=float, default=defaults.step_size)
    g.add_argument("--max-iters", type=int, default=defaults.max_iters)
    g.add_argument("--tol", type=float, default=defaults.tol)
    g.set_defaults(func=cmd_grid_gen)
    s = grid.add_parser("stats", help="print uniformity statistics of a grid file")
    s.add_argument("path")
    s.set_defaults(func=cmd_grid_stats)

    gc = sub.add_parser("gradcheck", help="finite-difference and adjoint checks")
    gc.add_argument("--variant", default="gcnn")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    for name, func, help_text, out_help in (
        ("equiv", cmd_equiv, "exact-subgroup and continuous invariance sweeps", "CSV path"),
        ("train", cmd_train, "train one model on synthetic data", "output directory"),
        ("report", cmd_report, "rotated-test accuracy protocol", "CSV path"),
    ):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", help="YAML run config (defaults when omitted)")
        c.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        c.add_argument("--out", required=True, help=out_help)
        c.set_defaults(func=func)

    sy = sub.add_parser("synth", help="write a synthetic dataset as volume files")
    sy.add_argument("--spec", required=True, help="YAML file with the data settings")
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with exit status 2
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.func in (cmd_equiv, cmd_train, cmd_report):
            return args.func(args)
        with _threads(args.threads):
            return args.func(args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigError, grids.GridFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
