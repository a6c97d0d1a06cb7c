"""Round loop, strategy switches and experiment I/O.

A round runs in four phases so that results do not depend on client order:

1. every client extracts prototypes and reports its task feature;
2. the server computes each client's base from the previous round's uploads;
3. clients train locally (and refresh rehearsal memory);
4. clients upload composed parameters, then evaluation runs.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .client import (ClientState, ExtractionLayer, RehearsalMemory, TrainConfig,
                     extract_prototypes, task_feature, train_local, update_memory)
from .config import ExperimentConfig, save_config
from .errors import EmptyEvalError, FedStilError
from .model import AdamState, AdaptiveParams, compose, embed, init_adaptive, save_adaptive
from .numeric import seeded_rng
from .server import (FeatureHistory, ParamStore, aggregate_base, knowledge_relevance,
                     record_params, uniform_aggregate, uniform_row)
from .stream import batches_to_stream, generate_stream, load_embedding_file, stream_checksum

log = logging.getLogger(__name__)

STATE_MAGIC = "fedstil-runstate-1"


class RoundError(FedStilError):
    """A module error annotated with the client and round where it happened."""

    def __init__(self, client, round, cause):
        self.client, self.round, self.cause = client, round, cause
        super().__init__(f"client {client}, round {round}: {type(cause).__name__}: {cause}")


@dataclass
class RunState:
    clients: list
    history: FeatureHistory
    store: ParamStore
    ledger: M.CommLedger
    timeline: M.AccuracyTimeline
    log: M.MetricsLog
    round: int = 0
    dispatched: dict = field(default_factory=dict)   # client -> base sent this round
    relevance: list = field(default_factory=list)    # (round, client, neighbour, weight)
    losses: dict = field(default_factory=dict)       # (round, client) -> epoch losses
    seconds: list = field(default_factory=list)      # wall clock per round


def effective_training(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.training
    if cfg.strategy == "fedavg":
        return dataclasses.replace(t, tie_weight=0.0, train_alpha=False)
    if cfg.strategy == "fedstil_no_tying":
        return dataclasses.replace(t, tie_weight=0.0)
    if cfg.strategy == "fedstil_no_rehearsal":
        return dataclasses.replace(t, rehearsal_fraction=0.0)
    return t


def uses_server(strategy: str) -> bool:
    return strategy != "local"


def uses_task_features(strategy: str) -> bool:
    return strategy.startswith("fedstil")


def load_stream(cfg: ExperimentConfig):
    if cfg.stream_file:
        return batches_to_stream(load_embedding_file(cfg.stream_file))
    return generate_stream(cfg.stream)


def num_clients(cfg: ExperimentConfig, stream) -> int:
    return len(stream[0]) if stream else cfg.stream.num_clients


def extraction_layer(cfg: ExperimentConfig, stream) -> ExtractionLayer:
    raw_dim = stream[0][0].raw_dim if stream else cfg.stream.raw_dim
    return ExtractionLayer.random(raw_dim, cfg.shapes.proto_dim, cfg.seed)


def init_state(cfg: ExperimentConfig, stream) -> RunState:
    shapes = cfg.shapes
    start = pretrained_start(shapes, cfg.seed)
    clients = [
        ClientState(c, start.copy(),
                    RehearsalMemory(cfg.memory.budget, cfg.memory.per_identity_quota),
                    AdamState.zeros(shapes.param_count),
                    seeded_rng(cfg.seed, 31, c))
        for c in range(num_clients(cfg, stream))
    ]
    return RunState(clients, FeatureHistory(cfg.server.window), ParamStore(shapes.param_count),
                    M.CommLedger(), M.AccuracyTimeline(), M.MetricsLog())


def pretrained_start(shapes, seed) -> AdaptiveParams:
    """Common starting point of every client.

    The He-initialised draw plays the role of shared pre-trained weights and
    is installed as the base B; the local adaptive part A starts at zero, so
    only learnt changes travel through aggregation.
    """
    init = init_adaptive(shapes, seed)
    zeros = np.zeros_like(init.A)
    return AdaptiveParams(zeros, init.A, init.alpha, zeros.copy(), init.alpha.copy())


def dispatch(state: RunState, cfg: ExperimentConfig, snapshot: ParamStore, c: int, t: int):
    """Base parameters sent to client ``c`` at round ``t``.

    Whenever the server has nothing to aggregate for ``c`` (no uploads yet,
    local strategy) the client keeps the base it already holds.
    """
    s = cfg.server
    keep = state.clients[c].params.B
    if cfg.strategy == "local":
        return keep.copy(), None
    if cfg.strategy == "fedavg":
        if not snapshot.params:
            return keep.copy(), None
        return uniform_aggregate(snapshot, c), None
    if cfg.strategy == "fedstil_no_st":
        row = uniform_row(c, t, snapshot.clients(), include_self=s.include_self)
    else:
        if state.history.get(c, t) is None:
            return keep.copy(), None
        row = knowledge_relevance(state.history, c, t, s.forgetting_ratio, s.window,
                                  s.temperature, eligible=snapshot.clients(),
                                  include_self=s.include_self)
    if row.is_empty():
        return keep.copy(), row
    return aggregate_base(snapshot, row), row


def run_round(state: RunState, cfg: ExperimentConfig, stream, layer: ExtractionLayer,
              round: int, evaluate: bool = True) -> RunState:
    if round != state.round:
        raise ValueError(f"expected round {state.round}, got {round}")
    started = time.perf_counter()
    shapes = cfg.shapes
    train_cfg = effective_training(cfg)
    strategy = cfg.strategy
    n_clients = len(state.clients)

    protos = {}
    for c in range(n_clients):
        try:
            protos[c] = extract_prototypes(layer, stream[round][c])
            if len(protos[c]) and uses_task_features(strategy):
                state.history.record(task_feature(protos[c], c, round))
        except FedStilError as exc:
            raise RoundError(c, round, exc) from exc

    snapshot = state.store.snapshot()
    state.dispatched = {}
    for c in range(n_clients):
        try:
            base, row = dispatch(state, cfg, snapshot, c, round)
        except FedStilError as exc:
            raise RoundError(c, round, exc) from exc
        state.dispatched[c] = base
        if row is not None:
            state.relevance.extend((round, c, j, w) for j, w in sorted(row.weights.items()))

    uploads = {}
    for c in range(n_clients):
        client = state.clients[c]
        if len(protos[c]) == 0:
            # nothing arrived: keep the model, still adopt the new base
            client.params = client.params.with_base(state.dispatched[c])
            continue
        try:
            client, theta, losses = train_local(client, protos[c], state.dispatched[c], shapes, train_cfg)
            if strategy != "fedstil_no_rehearsal":
                client.memory = update_memory(client, protos[c], shapes)
        except FedStilError as exc:
            raise RoundError(c, round, exc) from exc
        state.clients[c] = client
        state.losses[(round, c)] = losses
        uploads[c] = theta

    if uses_server(strategy):
        for c in sorted(uploads):
            record_params(state.store, c, uploads[c], round)
        feature_len = shapes.proto_dim if uses_task_features(strategy) else 0
        M.account_round(state.ledger, round, shapes.param_count, feature_len, range(n_clients))

    last = round == len(stream) - 1
    if evaluate and (round % cfg.eval_stride == 0 or last):
        evaluate_round(state, cfg, stream, layer, round)
    for c in range(n_clients):
        s2c, c2s = state.ledger.bytes_for(round, c)
        state.log.add(round, c, strategy, "s2c_bytes", s2c)
        state.log.add(round, c, strategy, "c2s_bytes", c2s)

    state.round = round + 1
    state.seconds.append(time.perf_counter() - started)
    return state


def evaluate_round(state: RunState, cfg: ExperimentConfig, stream, layer: ExtractionLayer,
                   round: int) -> None:
    """Score every task seen so far with each client's current model."""
    shapes = cfg.shapes
    every_batch = [b for batches in stream for b in batches]
    for c, client in enumerate(state.clients):
        theta = compose(client.params)
        embed_fn = lambda raw: embed(theta, shapes, layer.project(raw))  # noqa: E731
        try:
            gallery, g_labels = M.build_gallery(every_batch, c, embed_fn)
        except EmptyEvalError:
            continue
        for task in range(round + 1):
            batch = stream[task][c]
            if len(batch.query_labels) == 0:
                continue
            try:
                res = M.evaluate_retrieval(embed_fn(batch.query_features), batch.query_labels,
                                           gallery, g_labels)
            except EmptyEvalError:
                state.log.add(round, c, cfg.strategy, "skipped_queries", len(batch.query_labels), task)
                continue
            values = {"map": res.mAP, "rank1": res.rank[1], "rank3": res.rank[3], "rank5": res.rank[5]}
            state.timeline.add(c, round, task, values)
            for name, v in values.items():
                state.log.add(round, c, cfg.strategy, name, v, task)
            state.log.add(round, c, cfg.strategy, "skipped_queries", res.skipped_queries, task)
        if state.timeline.tasks_at(c, round):
            state.log.add(round, c, cfg.strategy, "avg_map_eq7", M.avg_accuracy(state.timeline, c, round))
            if len(state.timeline.tasks_at(c, round)) >= 2:
                state.log.add(round, c, cfg.strategy, "forgetting_eq8",
                              M.forgetting(state.timeline, c, round))


# -- checkpoints -------------------------------------------------------------------

def save_run_state(state: RunState, path) -> None:
    """Pickle the complete run state (Python-only; parameters also go to .bin files)."""
    with open(path, "wb") as fh:
        pickle.dump({"magic": STATE_MAGIC, "state": state}, fh, protocol=4)


def load_run_state(path) -> RunState:
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    if not isinstance(blob, dict) or blob.get("magic") != STATE_MAGIC:
        raise ValueError(f"{path} is not a fedstil run-state checkpoint")
    return blob["state"]


# -- experiment ------------------------------------------------------------------

@dataclass
class RunResult:
    state: RunState
    summary: dict
    csv: str


def summarise(state: RunState, cfg: ExperimentConfig, stream) -> dict:
    n_clients = len(state.clients)
    out = {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "rounds_completed": state.round,
        "num_clients": n_clients,
        "param_count": cfg.shapes.param_count,
        "stream_checksum": stream_checksum(stream),
        "s2c_bytes": state.ledger.total_s2c_bytes(),
        "c2s_bytes": state.ledger.total_c2s_bytes(),
        "memory_prototypes": sum(len(cl.memory) for cl in state.clients),
    }
    evaluated = sorted({r for (_, r, _) in state.timeline.entries})
    if evaluated:
        last = evaluated[-1]
        per_client = {}
        for c in range(n_clients):
            if not state.timeline.tasks_at(c, last):
                continue
            row = {m: M.avg_accuracy(state.timeline, c, last, m) for m in ("map", "rank1", "rank3", "rank5")}
            if len(state.timeline.tasks_at(c, last)) >= 2:
                row["forgetting"] = M.forgetting(state.timeline, c, last)
            per_client[c] = row
        out["final_round"] = last
        for key in ("map", "rank1", "rank3", "rank5", "forgetting"):
            vals = [r[key] for r in per_client.values() if key in r]
            if vals:
                out[f"final_{key}"] = float(np.mean(vals))
    return out


def write_outputs(state: RunState, cfg: ExperimentConfig, stream, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state.log.write(out / "metrics.csv")
    summary = summarise(state, cfg, stream)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps({"seconds_per_round": state.seconds}, indent=2) + "\n")
    with open(out / "relevance.csv", "w", encoding="utf-8") as fh:
        fh.write("round,client,neighbour,weight\n")
        for r, c, j, w in state.relevance:
            fh.write(f"{r},{c},{j},{w!r}\n")
    save_config(cfg, out / "config.ini")
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for client in state.clients:
        save_adaptive(ckpt / f"client{client.id}.bin", cfg.shapes, client.params)
    save_run_state(state, ckpt / "state.pkl")
    return summary


def run_experiment(cfg: ExperimentConfig, out_dir=None, stream=None, resume=None,
                   stop_after=None, checkpoint_every: int = 0) -> RunResult:
    """Run (or resume) every round of ``cfg``; write outputs when ``out_dir`` is given.

    ``stop_after`` ends the run early after that many completed rounds, which
    together with ``resume`` supports split runs.
    """
    cfg.validate()
    stream = load_stream(cfg) if stream is None else stream
    layer = extraction_layer(cfg, stream)
    if resume is not None:
        state = resume if isinstance(resume, RunState) else load_run_state(resume)
    else:
        state = init_state(cfg, stream)
    end = len(stream) if stop_after is None else min(stop_after, len(stream))
    for t in range(state.round, end):
        run_round(state, cfg, stream, layer, t)
        log.info("%s round %d done in %.2fs", cfg.strategy, t, state.seconds[-1])
        if out_dir and checkpoint_every and (t + 1) % checkpoint_every == 0:
            Path(out_dir, "checkpoints").mkdir(parents=True, exist_ok=True)
            save_run_state(state, Path(out_dir, "checkpoints", f"state_round{t + 1}.pkl"))
    summary = write_outputs(state, cfg, stream, out_dir) if out_dir else summarise(state, cfg, stream)
    return RunResult(state, summary, state.log.to_csv())
