"""Dense kernels, probability transforms and the seeded generator.

Vectors and matrices are plain float64 numpy arrays; the functions here
validate shapes/finiteness and raise library errors instead of letting
numpy broadcast silently.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, InvalidInputError

KL_EPS = 1e-12
_U64 = (1 << 64) - 1


def as_vector(v, name="vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionError(f"{name} must be a non-empty 1-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def as_matrix(m, name="matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"{name} must be a non-empty 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def softmax(v, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction."""
    if not (np.isfinite(temperature) and temperature > 0):
        raise InvalidInputError(f"temperature must be positive and finite, got {temperature}")
    z = as_vector(v) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; entries are clamped to KL_EPS before the log."""
    p = as_vector(p, "p")
    q = as_vector(q, "q")
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch: {p.size} vs {q.size}")
    p = np.maximum(p, KL_EPS)
    q = np.maximum(q, KL_EPS)
    kl = float(np.sum(p * np.log(p / q)))
    if kl < 0.0:
        if kl < -1e-12:
            raise InvalidInputError(f"negative divergence {kl}; inputs are not distributions")
        kl = 0.0
    return kl


def matvec(m, v) -> np.ndarray:
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.size:
        raise DimensionError(f"matrix {m.shape} cannot multiply vector of length {v.size}")
    return m @ v


def hadamard(a, b) -> np.ndarray:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return a * b


def axpy(s: float, a, b) -> np.ndarray:
    """s * a + b."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return s * a + b


def pairwise_sq_euclidean(queries, gallery) -> np.ndarray:
    """D[i, j] = ||q_i - g_j||^2, clamped at zero against cancellation."""
    q = as_matrix(queries, "queries")
    g = as_matrix(gallery, "gallery")
    if q.shape[1] != g.shape[1]:
        raise DimensionError(f"column mismatch: {q.shape[1]} vs {g.shape[1]}")
    qq = np.einsum("ij,ij->i", q, q)
    gg = np.einsum("ij,ij->i", g, g)
    d = qq[:, None] + gg[None, :] - 2.0 * (q @ g.T)
    np.maximum(d, 0.0, out=d)
    return d


class SeededRng:
    """Deterministic generator owned by a single actor.

    Uniforms come from numpy's PCG64 bit generator. Normals are produced by
    the Box-Muller transform of pairs of those uniforms, so the normal stream
    depends only on the uniform stream and this file.
    """

    def __init__(self, seed):
        if isinstance(seed, (list, tuple)):
            entropy = [int(s) & _U64 for s in seed]
        else:
            entropy = int(seed) & _U64
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform draws in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray | float:
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self._gen.random(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        out = scale * z[:n]
        return float(out[0]) if size is None else out.reshape(shape)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        return self._gen.integers(0, high, size=size)

    def shuffle(self, items) -> list:
        """Return a shuffled copy of ``items`` as a list."""
        items = list(items)
        order = self._gen.permutation(len(items))
        return [items[i] for i in order]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __getstate__(self):
        return {"state": self._gen.bit_generator.state}

    def __setstate__(self, d):
        self._gen = np.random.Generator(np.random.PCG64())
        self._gen.bit_generator.state = d["state"]


def seeded_rng(seed, *keys) -> SeededRng:
    """Generator for ``seed``; extra ``keys`` derive independent child streams."""
    return SeededRng([seed, *keys] if keys else seed)
