"""Edge client: prototype extraction, rehearsal memory and local training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptyTaskError, InvalidInputError
from .model import (AdamState, AdaptiveParams, LayerShapes, adam_step, compose, embed,
                    loss_and_grad)
from .numeric import SeededRng, seeded_rng
from .stream import TaskBatch


@dataclass(frozen=True)
class ExtractionLayer:
    """Frozen projection shared by every client (stands in for pre-trained layers)."""

    projection: np.ndarray  # raw_dim x proto_dim

    @classmethod
    def random(cls, raw_dim: int, proto_dim: int, seed) -> "ExtractionLayer":
        w = seeded_rng(seed, 21).normal((raw_dim, proto_dim), scale=1.0 / np.sqrt(raw_dim))
        return cls(w)

    def project(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim == 1:
            raw = raw[None, :]
        if raw.shape[1] != self.projection.shape[0]:
            raise DimensionError(f"raw width {raw.shape[1]} != projection rows {self.projection.shape[0]}")
        return raw @ self.projection


@dataclass
class Prototypes:
    """A set of prototypes stored column-wise."""

    features: np.ndarray
    labels: np.ndarray
    source_round: np.ndarray

    def __len__(self):
        return len(self.labels)

    @classmethod
    def empty(cls, dim: int) -> "Prototypes":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    def take(self, idx) -> "Prototypes":
        return Prototypes(self.features[idx], self.labels[idx], self.source_round[idx])


@dataclass(frozen=True)
class TaskFeature:
    mean: np.ndarray
    client: int
    round: int
    count: int


@dataclass
class RehearsalMemory:
    budget: int = 512
    per_identity_quota: int = 4
    groups: dict = field(default_factory=dict)  # identity -> Prototypes, closest first

    def __len__(self):
        return sum(len(g) for g in self.groups.values())

    def identities(self) -> list[int]:
        return sorted(self.groups)

    def as_prototypes(self, dim: int) -> Prototypes:
        if not self.groups:
            return Prototypes.empty(dim)
        parts = [self.groups[i] for i in self.identities()]
        return Prototypes(np.concatenate([p.features for p in parts]),
                          np.concatenate([p.labels for p in parts]),
                          np.concatenate([p.source_round for p in parts]))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 1e-5
    patience: int = 3
    tie_weight: float = 30.0
    rehearsal_fraction: float = 0.3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    train_alpha: bool = True


@dataclass
class ClientState:
    id: int
    params: AdaptiveParams
    memory: RehearsalMemory
    adam: AdamState
    rng: SeededRng


def extract_prototypes(layer: ExtractionLayer, batch: TaskBatch) -> Prototypes:
    """Project the batch's train samples; query samples are projected at evaluation."""
    feats = layer.project(batch.train_features) if len(batch.train_labels) else \
        np.zeros((0, layer.projection.shape[1]))
    return Prototypes(feats, batch.train_labels.copy(),
                      np.full(len(batch.train_labels), batch.round, dtype=np.int64))


def task_feature(prototypes: Prototypes, client: int = -1, round: int = -1) -> TaskFeature:
    if len(prototypes) == 0:
        raise EmptyTaskError("cannot summarise an empty task")
    return TaskFeature(prototypes.features.mean(axis=0), client, round, len(prototypes))


def update_memory(state: ClientState, prototypes: Prototypes, shapes: LayerShapes) -> RehearsalMemory:
    """Nearest-mean-of-exemplars admission followed by balanced eviction.

    For each identity of the task, prototypes whose embeddings (under the
    current composed parameters) lie closest to that identity's embedding
    mean are admitted, up to ``per_identity_quota``. While over budget, the
    largest group (ties: lowest identity) loses the entry farthest from its
    own embedding mean.
    """
    mem = state.memory
    theta = compose(state.params)
    groups = {k: v for k, v in mem.groups.items()}
    if len(prototypes):
        emb = embed(theta, shapes, prototypes.features)
        for ident in np.unique(prototypes.labels):
            idx = np.flatnonzero(prototypes.labels == ident)
            e = emb[idx]
            dist = ((e - e.mean(axis=0)) ** 2).sum(axis=1)
            keep = idx[np.argsort(dist, kind="stable")[: mem.per_identity_quota]]
            chosen = prototypes.take(keep)
            ident = int(ident)
            if ident in groups:
                old = groups[ident]
                chosen = Prototypes(np.concatenate([old.features, chosen.features]),
                                    np.concatenate([old.labels, chosen.labels]),
                                    np.concatenate([old.source_round, chosen.source_round]))
            groups[ident] = chosen

    total = sum(len(g) for g in groups.values())
    while total > mem.budget:
        ident = min(groups, key=lambda i: (-len(groups[i]), i))
        g = groups[ident]
        e = embed(theta, shapes, g.features)
        dist = ((e - e.mean(axis=0)) ** 2).sum(axis=1)
        # farthest entry; ties resolve to the later position
        worst = len(dist) - 1 - int(np.argmax(dist[::-1]))
        if len(g) == 1:
            del groups[ident]
        else:
            groups[ident] = g.take(np.delete(np.arange(len(g)), worst))
        total -= 1
    return RehearsalMemory(mem.budget, mem.per_identity_quota, groups)


def rehearsal_count(batch_size: int, rho: float) -> int:
    return math.ceil(round(rho * batch_size, 9))


def sample_training_batch(memory: RehearsalMemory, current: Prototypes, batch_size: int,
                          rho: float, rng: SeededRng):
    """Mix stored and current prototypes; returns ``(features, labels, n_from_memory)``."""
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    if not 0.0 <= rho < 1.0:
        raise InvalidInputError("rehearsal fraction must lie in [0, 1)")
    dim = current.features.shape[1]
    stored = memory.as_prototypes(dim)
    if len(stored) == 0 and len(current) == 0:
        raise EmptyTaskError("no current or stored prototypes to sample")
    n_mem = rehearsal_count(batch_size, rho) if len(stored) else 0
    if len(current) == 0:
        n_mem = batch_size
    n_cur = batch_size - n_mem

    def draw(pool: Prototypes, k: int):
        if k == 0:
            return pool.features[:0], pool.labels[:0]
        idx = rng.choice(len(pool), k, replace=len(pool) < k)
        return pool.features[idx], pool.labels[idx]

    xm, ym = draw(stored, n_mem)
    xc, yc = draw(current, n_cur)
    return np.concatenate([xm, xc]), np.concatenate([ym, yc]), n_mem


def train_local(state: ClientState, task: Prototypes, base: np.ndarray, shapes: LayerShapes,
                cfg: TrainConfig):
    """Install ``base`` as B, then run early-stopped epochs of mixed-batch Adam.

    Returns ``(new_state, theta, epoch_losses)`` where theta is the composed
    parameter vector to upload.
    """
    if len(task) == 0:
        raise EmptyTaskError(f"client {state.id} has no prototypes to train on")
    params = state.params.with_base(base)
    adam = state.adam
    steps = math.ceil(len(task) / cfg.batch_size)
    losses: list[float] = []
    best, stale = math.inf, 0
    for _ in range(cfg.epochs):
        total = 0.0
        for _ in range(steps):
            x, y, _ = sample_training_batch(state.memory, task, cfg.batch_size,
                                            cfg.rehearsal_fraction, state.rng)
            loss, g_a, g_alpha = loss_and_grad(params, shapes, x, y, cfg.tie_weight)
            params, adam = adam_step(params, g_a, g_alpha, adam, cfg.lr, cfg.betas, cfg.eps,
                                     cfg.weight_decay, train_alpha=cfg.train_alpha)
            total += loss
        losses.append(total / steps)
        if losses[-1] < best:
            best, stale = losses[-1], 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    new_state = ClientState(state.id, params, state.memory, adam, state.rng)
    return new_state, compose(params), losses
