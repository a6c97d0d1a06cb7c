"""Synthetic drifting task streams with spatial-temporal identity correlation.

Identities perform a ring random walk over clients: each round an identity
either stays or hops to a neighbouring client. A sample is

    identity_centroid + client_domain_vector + noise

so identities keep their appearance while each client adds its own fixed
"camera" shift. The whole stream is a pure function of ``StreamConfig``.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import InvalidInputError, ParseError, RoundRangeError
from .numeric import seeded_rng

ROLES = ("train", "query")


@dataclass(frozen=True)
class StreamConfig:
    num_clients: int = 5
    num_rounds: int = 6
    num_identities: int = 50
    raw_dim: int = 64
    samples_per_identity_per_round: int = 30
    move_prob: float = 0.5
    domain_shift_scale: float = 0.3
    noise_scale: float = 1.0
    query_fraction: float = 0.4
    identity_rank: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_clients", "num_identities", "raw_dim", "samples_per_identity_per_round"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.num_rounds < 0:
            raise InvalidInputError("num_rounds must be non-negative")
        if self.num_identities < 2 * self.num_clients:
            raise InvalidInputError("num_identities must be at least 2 * num_clients")
        if not 0.0 <= self.move_prob <= 1.0:
            raise InvalidInputError("move_prob must lie in [0, 1]")
        if self.domain_shift_scale < 0 or self.noise_scale < 0:
            raise InvalidInputError("scales must be non-negative")
        if not 0.0 < self.query_fraction < 1.0:
            raise InvalidInputError("query_fraction must lie in (0, 1)")
        if not 0 <= self.identity_rank <= self.raw_dim:
            raise InvalidInputError("identity_rank must lie in [0, raw_dim]")


@dataclass(frozen=True)
class RawSample:
    features: np.ndarray
    identity: int
    client: int
    round: int
    role: str


@dataclass
class TaskBatch:
    """One round of data for one client, stored column-wise."""

    client: int
    round: int
    train_features: np.ndarray
    train_labels: np.ndarray
    query_features: np.ndarray
    query_labels: np.ndarray

    @property
    def raw_dim(self) -> int:
        return self.train_features.shape[1]

    def __len__(self):
        return len(self.train_labels) + len(self.query_labels)

    def samples(self) -> Iterator[RawSample]:
        for role, feats, labels in (("train", self.train_features, self.train_labels),
                                    ("query", self.query_features, self.query_labels)):
            for x, y in zip(feats, labels):
                yield RawSample(x, int(y), self.client, self.round, role)

    def equals(self, other: "TaskBatch") -> bool:
        return (self.client == other.client and self.round == other.round
                and np.array_equal(self.train_features, other.train_features)
                and np.array_equal(self.train_labels, other.train_labels)
                and np.array_equal(self.query_features, other.query_features)
                and np.array_equal(self.query_labels, other.query_labels))


def build_identity_trajectories(cfg: StreamConfig) -> np.ndarray:
    """Return an int array ``traj[identity, round] -> client``."""
    rng = seeded_rng(cfg.seed, 1)
    n, r, c = cfg.num_identities, cfg.num_rounds, cfg.num_clients
    traj = np.empty((n, r), dtype=np.int64)
    if r == 0:
        return traj
    traj[:, 0] = rng.integers(c, size=n)
    for t in range(1, r):
        moves = rng.uniform(n) < cfg.move_prob
        step = np.where(rng.uniform(n) < 0.5, -1, 1)
        traj[:, t] = np.where(moves, (traj[:, t - 1] + step) % c, traj[:, t - 1])
    return traj


def identities_at(cfg: StreamConfig, traj: np.ndarray, round: int) -> list[list[int]]:
    """Identities present at each client in ``round``, ascending.

    A client left empty by the walk receives the fallback identity
    ``(client + round * num_clients) % num_identities`` in addition to its
    regular position.
    """
    present = [sorted(np.flatnonzero(traj[:, round] == c).tolist())
               for c in range(cfg.num_clients)]
    for c, ids in enumerate(present):
        if not ids:
            ids.append((c + round * cfg.num_clients) % cfg.num_identities)
    return present


def _split_sizes(cfg: StreamConfig) -> tuple[int, int]:
    n = cfg.samples_per_identity_per_round
    if n == 1:
        return 1, 0
    n_query = min(max(int(round(cfg.query_fraction * n)), 1), n - 1)
    return n - n_query, n_query


def identity_centroids(cfg: StreamConfig) -> np.ndarray:
    """Unit-variance normal centroids, one row per identity.

    With ``identity_rank = r > 0`` the centroids live in a random
    r-dimensional subspace (still unit variance per coordinate on average),
    which leaves the adaptive layers a discriminative subspace to find under
    isotropic noise. ``identity_rank = 0`` draws them isotropically.
    """
    rng = seeded_rng(cfg.seed, 2)
    if cfg.identity_rank in (0, cfg.raw_dim):
        return rng.normal((cfg.num_identities, cfg.raw_dim))
    r = cfg.identity_rank
    basis, _ = np.linalg.qr(rng.normal((cfg.raw_dim, r)))
    coords = rng.normal((cfg.num_identities, r), scale=np.sqrt(cfg.raw_dim / r))
    return coords @ basis.T


def domain_vectors(cfg: StreamConfig) -> np.ndarray:
    return seeded_rng(cfg.seed, 3).normal((cfg.num_clients, cfg.raw_dim),
                                          scale=cfg.domain_shift_scale)


def generate_round(cfg: StreamConfig, trajectories: np.ndarray, round: int) -> list[TaskBatch]:
    if not 0 <= round < cfg.num_rounds:
        raise RoundRangeError(f"round {round} outside [0, {cfg.num_rounds})")
    centroids = identity_centroids(cfg)
    domains = domain_vectors(cfg)
    present = identities_at(cfg, trajectories, round)
    n_train, n_query = _split_sizes(cfg)
    per_id = n_train + n_query

    total = sum(len(ids) for ids in present) * per_id
    noise = seeded_rng(cfg.seed, 4, round).normal((total, cfg.raw_dim), scale=cfg.noise_scale)

    batches = []
    offset = 0
    for c, ids in enumerate(present):
        ids_arr = np.asarray(ids, dtype=np.int64)
        block = centroids[ids_arr] + domains[c]
        feats = np.repeat(block, per_id, axis=0) + noise[offset:offset + len(ids) * per_id]
        offset += len(ids) * per_id
        feats = feats.reshape(len(ids), per_id, cfg.raw_dim)
        labels = np.repeat(ids_arr, per_id).reshape(len(ids), per_id)
        batches.append(TaskBatch(
            client=c,
            round=round,
            train_features=feats[:, :n_train].reshape(-1, cfg.raw_dim),
            train_labels=labels[:, :n_train].reshape(-1),
            query_features=feats[:, n_train:].reshape(-1, cfg.raw_dim),
            query_labels=labels[:, n_train:].reshape(-1),
        ))
    return batches


def generate_stream(cfg: StreamConfig) -> list[list[TaskBatch]]:
    """All rounds: ``stream[round][client]``."""
    traj = build_identity_trajectories(cfg)
    return [generate_round(cfg, traj, t) for t in range(cfg.num_rounds)]


def stream_checksum(stream) -> str:
    h = hashlib.sha256()
    for batches in stream:
        for b in batches:
            h.update(np.asarray([b.client, b.round], dtype=np.int64).tobytes())
            for arr in (b.train_features, b.train_labels, b.query_features, b.query_labels):
                h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- embedding files ---------------------------------------------------------

def export_embedding_file(batches, path) -> None:
    """Write batches in the CSV layout read by :func:`load_embedding_file`."""
    batches = list(batches)
    if not batches:
        raise InvalidInputError("nothing to export")
    dim = batches[0].raw_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "round", "role", "identity"] + [f"f{i}" for i in range(dim)])
        for b in batches:
            for s in b.samples():
                w.writerow([s.client, s.round, s.role, s.identity] + [repr(float(x)) for x in s.features])


def load_embedding_file(path) -> list[TaskBatch]:
    """Parse an embedding CSV into batches ordered by (round, client)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ParseError("missing header", line=1)
        fixed = ["client", "round", "role", "identity"]
        if [h.strip() for h in header[:4]] != fixed:
            raise ParseError(f"header must start with {','.join(fixed)}", line=1)
        dim = len(header) - 4
        if dim < 1:
            raise ParseError("header declares no feature columns", line=1)
        expected = [f"f{i}" for i in range(dim)]
        if [h.strip() for h in header[4:]] != expected:
            raise ParseError("feature columns must be f0..f{d-1} in order", line=1)

        groups: dict[tuple[int, int], dict[str, tuple[list, list]]] = {}
        for row in reader:
            lineno = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != dim + 4:
                raise ParseError(f"expected {dim + 4} fields, got {len(row)}", line=lineno)
            try:
                client, rnd, identity = int(row[0]), int(row[1]), int(row[3])
            except ValueError:
                raise ParseError("client, round and identity must be integers", line=lineno) from None
            role = row[2].strip()
            if role not in ROLES:
                raise ParseError(f"unknown role {role!r}", line=lineno)
            if client < 0 or rnd < 0 or identity < 0:
                raise ParseError("client, round and identity must be non-negative", line=lineno)
            try:
                feats = [float(x) for x in row[4:]]
            except ValueError:
                raise ParseError("feature values must be decimal reals", line=lineno) from None
            if not all(np.isfinite(feats)):
                raise ParseError("non-finite feature value", line=lineno)
            slot = groups.setdefault((rnd, client), {"train": ([], []), "query": ([], [])})
            slot[role][0].append(feats)
            slot[role][1].append(identity)

    out = []
    for (rnd, client) in sorted(groups):
        slot = groups[(rnd, client)]
        arrays = {}
        for role in ROLES:
            feats, labels = slot[role]
            arrays[role] = (np.asarray(feats, dtype=np.float64).reshape(-1, dim),
                            np.asarray(labels, dtype=np.int64))
        out.append(TaskBatch(client, rnd, arrays["train"][0], arrays["train"][1],
                             arrays["query"][0], arrays["query"][1]))
    return out


def batches_to_stream(batches) -> list[list[TaskBatch]]:
    """Group loaded batches into ``stream[round][client]`` (dense client ids required)."""
    batches = list(batches)
    rounds = max(b.round for b in batches) + 1
    clients = max(b.client for b in batches) + 1
    dim = batches[0].raw_dim
    grid = [[None] * clients for _ in range(rounds)]
    for b in batches:
        grid[b.round][b.client] = b
    for t in range(rounds):
        for c in range(clients):
            if grid[t][c] is None:
                empty = np.zeros((0, dim))
                noid = np.zeros(0, dtype=np.int64)
                grid[t][c] = TaskBatch(c, t, empty, noid, empty.copy(), noid.copy())
    return grid
