"""Command-line entry point: ``vaeconv --config run.json --out results/``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .models import DegenerateWeightsError
from .runner import SWEEP_AXES, RunAborted, run, sweep

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _parse_sweep(text: str) -> tuple[str, list[str]]:
    if "=" not in text:
        raise ConfigError("--sweep", "expected AXIS=v1,v2,...")
    axis, vals = text.split("=", 1)
    axis = axis.strip()
    if axis not in SWEEP_AXES:
        raise ConfigError("--sweep", f"unknown axis {axis!r}; expected one of {SWEEP_AXES}")
    values = [v.strip() for v in vals.split(",") if v.strip()]
    if not values:
        raise ConfigError("--sweep", "axis needs at least one value")
    return axis, values


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("--seeds", "expected comma-separated integers") from None
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError("--seeds", "expected nonnegative integers")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vaeconv", description="Train VAEs and record convergence diagnostics.")
    p.add_argument("--config", help="JSON run configuration (defaults are used for missing keys)")
    p.add_argument("--seed", type=int, help="overrides data.seed")
    p.add_argument("--out", default="vaeconv_out", help="output directory")
    p.add_argument("--sweep", metavar="AXIS=v1,v2,...", help=f"sweep one axis: {', '.join(SWEEP_AXES)}")
    p.add_argument("--seeds", help="comma-separated seeds for a sweep (default: the config seed)")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs in a sweep")
    p.add_argument("--quiet", action="store_true", help="only print errors")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    log = logging.getLogger("vaeconv")
    try:
        cfg = load_config(args.config, seed=args.seed)
        if args.sweep:
            axis, values = _parse_sweep(args.sweep)
            seeds = _parse_seeds(args.seeds) if args.seeds else [cfg["data"]["seed"]]
            if args.jobs < 1:
                raise ConfigError("--jobs", "must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.sweep:
            table, rows = sweep(cfg, axis, values, seeds, args.out, args.jobs)
            for r in table:
                log.info("%s=%s ok=%d median grad_norm_sq=%.4g objective=%.5g",
                         axis, r["value"], r["n_ok"], r["median_grad_norm_sq"], r["median_objective"])
            failed = [r for r in rows if r["status"] != "ok"]
            for r in failed:
                print(f"run {axis}={r['value']} seed={r['seed']} {r['status']}: {r['error']}", file=sys.stderr)
            return EXIT_RUNTIME if failed else EXIT_OK
        res = run(cfg, args.out, quiet=args.quiet)
        fit = res.summary.get("rate_fit", {})
        if "power" in fit:
            log.info("power-model p=%.3f (R2 %.3f); best model: %s", fit["power"]["p"], fit["power"]["r2"], fit["best"])
        log.info("wrote %s", args.out)
        return EXIT_OK
    except RunAborted as exc:
        print(f"run aborted after iteration {exc.last_good}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FloatingPointError, DegenerateWeightsError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
