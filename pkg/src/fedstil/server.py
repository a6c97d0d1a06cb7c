"""Parameter server: task-feature history, relevance weighting and aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .client import TaskFeature
from .errors import DimensionError, MissingFeatureError, MissingParamsError, OrderingError
from .numeric import kl_divergence, softmax


@dataclass
class FeatureHistory:
    """Per-client task features, keeping the latest ``window + 1`` rounds."""

    window: int = 5
    features: dict = field(default_factory=dict)  # client -> {round: TaskFeature}

    def record(self, feature: TaskFeature) -> None:
        rounds = self.features.setdefault(feature.client, {})
        if rounds and feature.round < max(rounds):
            raise OrderingError(
                f"client {feature.client}: round {feature.round} recorded after round {max(rounds)}")
        rounds[feature.round] = feature
        cutoff = feature.round - self.window
        for r in [r for r in rounds if r < cutoff]:
            del rounds[r]

    def get(self, client: int, round: int) -> TaskFeature | None:
        return self.features.get(client, {}).get(round)

    def rounds(self, client: int) -> list[int]:
        return sorted(self.features.get(client, {}))

    def clients(self) -> list[int]:
        return sorted(self.features)


def record(history: FeatureHistory, feature: TaskFeature) -> None:
    history.record(feature)


@dataclass
class ParamStore:
    param_len: int
    params: dict = field(default_factory=dict)  # client -> (theta, upload round)

    def clients(self) -> list[int]:
        return sorted(self.params)

    def theta(self, client: int) -> np.ndarray:
        try:
            return self.params[client][0]
        except KeyError:
            raise MissingParamsError(f"no parameters stored for client {client}") from None

    def snapshot(self) -> "ParamStore":
        return ParamStore(self.param_len, {c: (t.copy(), r) for c, (t, r) in self.params.items()})


def record_params(store: ParamStore, client: int, theta, round: int) -> None:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (store.param_len,):
        raise DimensionError(f"theta has shape {theta.shape}, expected ({store.param_len},)")
    if client in store.params and round < store.params[client][1]:
        raise OrderingError(
            f"client {client}: upload for round {round} after round {store.params[client][1]}")
    store.params[client] = (theta.copy(), round)


@dataclass
class RelevanceRow:
    client: int
    round: int
    weights: dict  # neighbour -> normalised weight
    raw: dict      # neighbour -> accumulated similarity before normalisation

    def is_empty(self) -> bool:
        return not self.weights


def task_similarity(f_i: TaskFeature, f_j: TaskFeature, temperature: float = 1.0) -> float:
    """exp(-KL(softmax(f_i) || softmax(f_j))), a similarity in (0, 1]."""
    if f_i.mean.shape != f_j.mean.shape:
        raise DimensionError(f"feature widths differ: {f_i.mean.size} vs {f_j.mean.size}")
    p = softmax(f_i.mean, temperature)
    q = softmax(f_j.mean, temperature)
    return math.exp(-kl_divergence(p, q))


def normalise(raw: dict) -> dict:
    total = sum(raw[j] for j in sorted(raw))
    if total <= 0:
        return {}
    return {j: raw[j] / total for j in sorted(raw)}


def knowledge_relevance(history: FeatureHistory, i: int, t: int, forgetting_ratio: float = 0.5,
                        window: int = 5, temperature: float = 1.0, eligible=None,
                        include_self: bool = False) -> RelevanceRow:
    """Forgetting-discounted similarity of client ``i``'s current task to each neighbour's
    recent tasks, normalised over neighbours with history.

    ``eligible`` restricts the neighbours (e.g. to clients that have uploaded
    parameters); ``include_self`` lets client ``i``'s own history take part.
    """
    own = history.get(i, t)
    if own is None:
        raise MissingFeatureError(f"no task feature recorded for client {i} at round {t}")
    candidates = history.clients() if eligible is None else sorted(set(eligible))
    raw = {}
    for j in candidates:
        if j == i and not include_self:
            continue
        acc = 0.0
        seen = False
        for tp in range(max(0, t - window), t + 1):
            f_j = history.get(j, tp)
            if f_j is None:
                continue
            acc += forgetting_ratio ** (t - tp) * task_similarity(own, f_j, temperature)
            seen = True
        if seen:
            raw[j] = acc
    return RelevanceRow(i, t, normalise(raw), raw)


def uniform_row(i: int, t: int, neighbours, include_self: bool = False) -> RelevanceRow:
    """Equal weights over ``neighbours`` (self dropped unless ``include_self``)."""
    js = [j for j in sorted(set(neighbours)) if include_self or j != i]
    raw = {j: 1.0 for j in js}
    return RelevanceRow(i, t, normalise(raw), raw)


def aggregate_base(store: ParamStore, row: RelevanceRow) -> np.ndarray:
    """Relevance-weighted sum of stored parameters; zeros for an empty row."""
    out = np.zeros(store.param_len)
    for j in sorted(row.weights):
        out += row.weights[j] * store.theta(j)
    return out


def uniform_aggregate(store: ParamStore, i: int | None = None) -> np.ndarray:
    """Unweighted mean of every stored theta, the requesting client included."""
    if not store.params:
        raise MissingParamsError("parameter store is empty")
    clients = store.clients()
    out = np.zeros(store.param_len)
    for j in clients:
        out += (1.0 / len(clients)) * store.theta(j)
    return out
