"""Retrieval metrics, lifelong accuracy/forgetting and communication accounting."""
from __future__ import annotations

import csv
import io
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyEvalError, UndefinedForgettingError
from .numeric import pairwise_sq_euclidean

BYTES_PER_FLOAT = 4
DEFAULT_KS = (1, 3, 5)
CSV_HEADER = ("round", "client", "strategy", "metric", "task_index", "value")
METRICS = ("map", "rank1", "rank3", "rank5", "avg_map_eq7", "forgetting_eq8",
           "s2c_bytes", "c2s_bytes", "skipped_queries")


@dataclass
class RetrievalResult:
    mAP: float
    rank: dict          # k -> fraction of valid queries hit within top k
    valid_queries: int
    skipped_queries: int


def evaluate_retrieval(emb_q, labels_q, emb_g, labels_g, ks=DEFAULT_KS) -> RetrievalResult:
    """mAP and CMC over squared euclidean distances.

    Gallery order is a stable sort of distances, so ties go to the lower
    gallery index. Queries with no positive in the gallery are skipped.
    """
    labels_q = np.asarray(labels_q)
    labels_g = np.asarray(labels_g)
    dist = pairwise_sq_euclidean(emb_q, emb_g)
    order = np.argsort(dist, axis=1, kind="stable")
    matches = labels_g[order] == labels_q[:, None]
    valid = matches.any(axis=1)
    skipped = int((~valid).sum())
    if not valid.any():
        raise EmptyEvalError("no query has a positive in the gallery")
    matches = matches[valid]

    # AP summed as exact rationals and rounded once, so hand-checkable
    # cases such as (1/1 + 2/3) / 2 come out as the nearest double to 5/6
    total = Fraction(0)
    for row in matches:
        positive_ranks = np.flatnonzero(row) + 1
        total += sum(Fraction(m, int(r)) for m, r in enumerate(positive_ranks, start=1)) / len(positive_ranks)
    n_valid = len(matches)

    first_hit = matches.argmax(axis=1)  # 0-based rank of the first positive
    rank = {k: float((first_hit < k).mean()) for k in ks}
    return RetrievalResult(float(total / n_valid), rank, int(n_valid), skipped)


@dataclass
class AccuracyTimeline:
    """(client, round, task_index) -> {"map", "rank1", "rank3", "rank5"}."""

    entries: dict = field(default_factory=dict)

    def add(self, client: int, round: int, task: int, values: dict) -> None:
        self.entries[(client, round, task)] = dict(values)

    def tasks_at(self, client: int, round: int) -> list[int]:
        return sorted(t for (c, r, t) in self.entries if c == client and r == round)

    def value(self, client: int, round: int, task: int, metric: str = "map") -> float | None:
        e = self.entries.get((client, round, task))
        return None if e is None else e[metric]


def avg_accuracy(timeline: AccuracyTimeline, client: int, round: int, metric: str = "map") -> float:
    """Mean accuracy over every task evaluated for ``client`` at ``round``."""
    tasks = timeline.tasks_at(client, round)
    if not tasks:
        raise EmptyEvalError(f"client {client} has no evaluated task at round {round}")
    return float(np.mean([timeline.value(client, round, t, metric) for t in tasks]))


def forgetting(timeline: AccuracyTimeline, client: int, round: int, metric: str = "map") -> float:
    """Mean drop from each earlier task's best accuracy to its accuracy now.

    The most recent task is excluded. Tasks not scored at ``round`` do not
    contribute.
    """
    tasks = timeline.tasks_at(client, round)
    if len(tasks) < 2:
        raise UndefinedForgettingError(
            f"client {client} has {len(tasks)} evaluated task(s) at round {round}; need 2")
    drops = []
    for task in tasks[:-1]:
        history = [timeline.value(client, r, task, metric) for r in range(round + 1)]
        best = max(v for v in history if v is not None)
        drops.append(best - timeline.value(client, round, task, metric))
    return float(np.mean(drops))


@dataclass
class CommLedger:
    """Transferred float counts per (round, client)."""

    s2c: dict = field(default_factory=dict)
    c2s: dict = field(default_factory=dict)

    def total_s2c_bytes(self) -> int:
        return BYTES_PER_FLOAT * sum(self.s2c.values())

    def total_c2s_bytes(self) -> int:
        return BYTES_PER_FLOAT * sum(self.c2s.values())

    def bytes_for(self, round: int, client: int) -> tuple[int, int]:
        return (BYTES_PER_FLOAT * self.s2c.get((round, client), 0),
                BYTES_PER_FLOAT * self.c2s.get((round, client), 0))


def account_round(ledger: CommLedger, round: int, param_len: int, feature_len: int,
                  clients) -> CommLedger:
    """Each participant uploads theta plus its task feature and receives one base vector."""
    if param_len < 0 or feature_len < 0:
        raise ValueError("lengths must be non-negative")
    for c in clients:
        key = (round, c)
        ledger.c2s[key] = ledger.c2s.get(key, 0) + param_len + feature_len
        ledger.s2c[key] = ledger.s2c.get(key, 0) + param_len
    return ledger


def build_gallery(batches, querying_client: int, embed_fn):
    """Query-role samples of every other client, ordered by (client, sample index).

    ``batches`` is any iterable of TaskBatch (typically every round of the
    stream); ``embed_fn`` maps raw features to the querying client's
    embeddings.
    """
    parts = sorted((b for b in batches if b.client != querying_client and len(b.query_labels)),
                   key=lambda b: (b.client, b.round))
    if not parts:
        raise EmptyEvalError(f"gallery for client {querying_client} is empty")
    raw = np.concatenate([b.query_features for b in parts])
    labels = np.concatenate([b.query_labels for b in parts])
    return embed_fn(raw), labels


# -- MetricsLog ----------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class MetricsLog:
    """Ordered rows of ``round,client,strategy,metric,task_index,value``."""

    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, round, client, strategy, metric, value, task_index=None):
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        self.rows.append((round, client, strategy, metric,
                          "" if task_index is None else task_index, value))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r, c, s, m, t, v in self.rows:
            w.writerow([r, c, s, m, t, format_value(v)])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for row in reader:
            row["round"] = int(row["round"])
            row["client"] = int(row["client"])
            row["task_index"] = int(row["task_index"]) if row["task_index"] != "" else None
            row["value"] = float(row["value"])
            rows.append(row)
    return rows
