"""Command line entry point: ``fedstil run|sweep|report|validate``.

Exit codes: 0 success, 2 configuration or usage error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import report
from .config import STRATEGIES, load_config
from .errors import ConfigError, FedStilError
from .runner import run_experiment

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on its own; raise instead so main() owns the exit code
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def parse_seeds(text: str) -> list[int]:
    """``"1..5"`` -> [1, 2, 3, 4, 5]; ``"1,4,9"`` and mixtures also work."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("..")
        try:
            if sep:
                a, b = int(lo), int(hi)
                if b < a:
                    raise ValueError
                seeds.extend(range(a, b + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"bad seed list {text!r}; use e.g. 1..5 or 1,2,3") from None
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def parse_strategies(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in STRATEGIES]
    if bad or not names:
        raise ConfigError(f"unknown strategy {', '.join(bad) or '(none)'}; choose from {', '.join(STRATEGIES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedstil", description="Federated lifelong re-identification simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--strategy", choices=STRATEGIES)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")

    sweep = sub.add_parser("sweep", help="run strategies x seeds into OUT/<strategy>/seed<N>")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--strategies", required=True)
    sweep.add_argument("--seeds", required=True)
    sweep.add_argument("--out")

    rep = sub.add_parser("report", help="summarise every metrics.csv below a directory")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--json", action="store_true", help="emit JSON instead of text tables")

    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("--config", required=True)
    return p


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.strategy:
        cfg = dataclasses.replace(cfg, strategy=args.strategy)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = args.out or cfg.out_dir
    result = run_experiment(cfg, out_dir=out)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    strategies = parse_strategies(args.strategies)
    seeds = parse_seeds(args.seeds)
    root = Path(args.out or cfg.out_dir)
    for strategy in strategies:
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, strategy=strategy).with_seed(seed)
            out = root / strategy / f"seed{seed}"
            summary = run_experiment(run_cfg, out_dir=out).summary
            print(f"{strategy} seed={seed} final_map={summary.get('final_map', float('nan')):.4f} -> {out}")
    print()
    print(report.render(report.collect_runs(root)), end="")
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        runs = report.collect_runs(args.in_dir)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    if not runs:
        raise ConfigError(f"no metrics.csv found under {args.in_dir}")
    if args.json:
        payload = {"runs": [dataclasses.asdict(r) for r in runs],
                   "comparison": [dataclasses.asdict(r) for r in report.comparison_table(runs)],
                   "ablations": [dataclasses.asdict(r) for r in report.ablation_table(runs)]}
        print(json.dumps(payload, indent=2))
    else:
        print(report.render(runs), end="")
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(f"ok: {args.config} (strategy={cfg.strategy}, clients={cfg.stream.num_clients}, "
          f"rounds={cfg.stream.num_rounds})")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "report": _cmd_report, "validate": _cmd_validate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedStilError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
