"""Aggregate finished runs into comparison tables.

Everything here is recomputed from ``metrics.csv`` files, so a report can be
rebuilt from logs alone. The seed of a run is read from the ``config.ini``
written next to its log.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import read_metrics_csv

ABLATIONS = ("fedstil_no_st", "fedstil_no_rehearsal", "fedstil_no_tying")
STRATEGY_ORDER = ("fedstil", "fedavg", "local") + ABLATIONS


@dataclass(frozen=True)
class RunSummary:
    path: str
    strategy: str
    seed: int | None
    final_round: int | None
    final_map: float | None
    final_rank1: float | None
    final_forgetting: float | None
    s2c_bytes: int
    c2s_bytes: int


def _mean_or_none(values):
    return float(np.mean(values)) if values else None


def summarise_rows(rows, path="", seed=None) -> RunSummary:
    """Final-round numbers of one run, averaged over clients.

    mAP is the per-client average over evaluated tasks; rank-1 is averaged
    the same way from the per-task rows.
    """
    strategies = {r["strategy"] for r in rows}
    strategy = strategies.pop() if len(strategies) == 1 else ""
    eval_rounds = [r["round"] for r in rows if r["metric"] == "avg_map_eq7"]
    last = max(eval_rounds) if eval_rounds else None
    final_map = final_rank1 = final_forgetting = None
    if last is not None:
        at_last = [r for r in rows if r["round"] == last]
        final_map = _mean_or_none([r["value"] for r in at_last if r["metric"] == "avg_map_eq7"])
        final_forgetting = _mean_or_none([r["value"] for r in at_last if r["metric"] == "forgetting_eq8"])
        per_client = {}
        for r in at_last:
            if r["metric"] == "rank1":
                per_client.setdefault(r["client"], []).append(r["value"])
        final_rank1 = _mean_or_none([float(np.mean(v)) for v in per_client.values()])
    s2c = sum(int(r["value"]) for r in rows if r["metric"] == "s2c_bytes")
    c2s = sum(int(r["value"]) for r in rows if r["metric"] == "c2s_bytes")
    return RunSummary(str(path), strategy, seed, last, final_map, final_rank1, final_forgetting, s2c, c2s)


def _seed_of(run_dir: Path):
    ini = run_dir / "config.ini"
    if not ini.is_file():
        return None
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(ini, encoding="utf-8")
    try:
        return parser.getint("experiment", "seed")
    except (configparser.Error, ValueError):
        return None


def collect_runs(root) -> list[RunSummary]:
    """Summaries of every ``metrics.csv`` below ``root``, in path order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    out = []
    for csv_path in sorted(root.rglob("metrics.csv")):
        rows = read_metrics_csv(csv_path)
        out.append(summarise_rows(rows, csv_path.parent, _seed_of(csv_path.parent)))
    return out


@dataclass(frozen=True)
class StrategyRow:
    strategy: str
    runs: int
    map_mean: float | None
    map_std: float | None
    rank1_mean: float | None
    forgetting_mean: float | None
    s2c_bytes_mean: float
    c2s_bytes_mean: float


def _stats(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def comparison_table(runs) -> list[StrategyRow]:
    by_strategy: dict[str, list[RunSummary]] = {}
    for r in runs:
        by_strategy.setdefault(r.strategy, []).append(r)
    order = [s for s in STRATEGY_ORDER if s in by_strategy]
    order += sorted(set(by_strategy) - set(order))
    table = []
    for s in order:
        group = by_strategy[s]
        m, sd = _stats([r.final_map for r in group])
        table.append(StrategyRow(
            s, len(group), m, sd,
            _stats([r.final_rank1 for r in group])[0],
            _stats([r.final_forgetting for r in group])[0],
            float(np.mean([r.s2c_bytes for r in group])),
            float(np.mean([r.c2s_bytes for r in group])),
        ))
    return table


@dataclass(frozen=True)
class AblationRow:
    strategy: str
    map_delta: float | None        # ablation minus fedstil
    forgetting_delta: float | None
    fedstil_wins: int              # seeds where fedstil has the higher final mAP
    paired_seeds: int


def ablation_table(runs) -> list[AblationRow]:
    """Paired per-seed comparison of each ablation against fedstil."""
    full = {r.seed: r for r in runs if r.strategy == "fedstil" and r.final_map is not None}
    rows = []
    for name in ABLATIONS:
        other = {r.seed: r for r in runs if r.strategy == name and r.final_map is not None}
        seeds = sorted(set(full) & set(other), key=lambda s: (s is None, s))
        if not seeds:
            continue
        d_map = [other[s].final_map - full[s].final_map for s in seeds]
        d_forg = [other[s].final_forgetting - full[s].final_forgetting for s in seeds
                  if other[s].final_forgetting is not None and full[s].final_forgetting is not None]
        wins = sum(full[s].final_map > other[s].final_map for s in seeds)
        rows.append(AblationRow(name, float(np.mean(d_map)), _mean_or_none(d_forg), wins, len(seeds)))
    return rows


def _fmt(v, digits=4):
    return "-" if v is None else f"{v:.{digits}f}"


def render(runs) -> str:
    lines = ["strategy               runs  final_mAP        rank1   forgetting  S2C_bytes     C2S_bytes"]
    for r in comparison_table(runs):
        spread = f"{_fmt(r.map_mean)} ± {_fmt(r.map_std)}" if r.map_mean is not None else "-"
        lines.append(f"{r.strategy:<22} {r.runs:>4}  {spread:<15}  {_fmt(r.rank1_mean):>6}  "
                     f"{_fmt(r.forgetting_mean):>10}  {r.s2c_bytes_mean:>12.0f}  {r.c2s_bytes_mean:>12.0f}")
    ablations = ablation_table(runs)
    if ablations:
        lines.append("")
        lines.append("ablation               d_mAP     d_forgetting  fedstil_wins")
        for a in ablations:
            lines.append(f"{a.strategy:<22} {_fmt(a.map_delta):>8}  {_fmt(a.forgetting_delta):>12}  "
                         f"{a.fedstil_wins}/{a.paired_seeds}")
    return "\n".join(lines) + "\n"
