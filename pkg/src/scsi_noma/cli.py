"""Command-line entry point: ``scsi-noma simulate|sweep ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import __version__
from .harness import FAILURE_ABORT_FRACTION, ConfigError, SimulationConfig, run_experiment, write_outputs

EXIT_CONFIG = 2
EXIT_TOO_MANY_FAILURES = 3

log = logging.getLogger("scsi_noma")


def _common(p: argparse.ArgumentParser, out_required: bool) -> None:
    p.add_argument("--config", required=True, help="flat JSON simulation config")
    p.add_argument("--out", required=out_required, default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--trials", type=int, help="override config trial count")
    p.add_argument("--threads", type=int, default=1, help="worker processes for trials (default 1)")
    p.add_argument("--echo-config", action="store_true", help="print the resolved config as JSON and exit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scsi-noma", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run every (K, P_max) point of the config")
    _common(sim, out_required=True)

    sweep = sub.add_parser("sweep", help="run one of the two standard sweeps")
    sweep.add_argument("axis", choices=("pmax", "k"), help="pmax: P_max list at n_users; k: k_sweep at one P_max")
    _common(sweep, out_required=False)
    return parser


def resolve_config(args: argparse.Namespace) -> tuple[SimulationConfig, list[int]]:
    cfg = SimulationConfig.load(args.config)
    overrides = {k: getattr(args, k) for k in ("seed", "trials") if getattr(args, k) is not None}
    if overrides:
        cfg = SimulationConfig.from_dict({**cfg.to_dict(), **overrides})
    counts = cfg.user_counts
    if args.command == "sweep":
        if args.axis == "pmax":
            counts = [cfg.n_users]
        else:
            if not cfg.k_sweep:
                raise ConfigError("sweep k needs a non-empty k_sweep")
            if len(cfg.p_max_list) > 1:
                log.info("sweep k: using the first p_max_dbm value %.3g", cfg.p_max_list[0])
                cfg = dataclasses.replace(cfg, p_max_dbm=cfg.p_max_list[0])
            counts = list(cfg.k_sweep)
    return cfg, counts


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, counts = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.echo_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    result = run_experiment(cfg, threads=args.threads, user_counts=counts)
    try:
        paths = write_outputs(result, args.out)
    except OSError as exc:
        print(f"cannot write outputs to {args.out}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(result.records)} trial records to {paths['trials'].parent}")
    if result.failure_fraction > FAILURE_ABORT_FRACTION:
        print(
            f"too many failed trials: {result.failure_fraction:.1%} > {FAILURE_ABORT_FRACTION:.0%} "
            f"{dict(result.failures)}",
            file=sys.stderr,
        )
        return EXIT_TOO_MANY_FAILURES
    return 0


if __name__ == "__main__":
    sys.exit(main())
