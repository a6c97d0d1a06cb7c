"""Adaptive layers: theta = B * alpha + A over a one-hidden-layer network.

Flat parameter order (row-major blocks):

    W1  proto_dim x hidden_dim
    b1  hidden_dim
    W2  hidden_dim x num_labels      (no classifier bias)

``hidden = relu(x @ W1 + b1)`` is the retrieval embedding and
``logits = hidden @ W2``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, InvalidLabelError, ParseError
from .numeric import seeded_rng

CHECKPOINT_MAGIC = b"FSTLPAR1"
_HEADER = struct.Struct("<8sIIII")


@dataclass(frozen=True)
class LayerShapes:
    proto_dim: int = 64
    hidden_dim: int = 128
    num_labels: int = 50

    def __post_init__(self):
        if min(self.proto_dim, self.hidden_dim, self.num_labels) < 1:
            raise DimensionError("layer sizes must be positive")

    @property
    def param_count(self) -> int:
        return self.proto_dim * self.hidden_dim + self.hidden_dim + self.hidden_dim * self.num_labels

    def split(self, flat: np.ndarray):
        """Views (W1, b1, W2) into a flat parameter vector."""
        if flat.shape != (self.param_count,):
            raise DimensionError(f"expected {self.param_count} parameters, got {flat.shape}")
        d, h, L = self.proto_dim, self.hidden_dim, self.num_labels
        w1 = flat[: d * h].reshape(d, h)
        b1 = flat[d * h: d * h + h]
        w2 = flat[d * h + h:].reshape(h, L)
        return w1, b1, w2


@dataclass
class AdaptiveParams:
    A: np.ndarray
    B: np.ndarray
    alpha: np.ndarray
    A_anchor: np.ndarray
    alpha_anchor: np.ndarray

    def __post_init__(self):
        n = self.A.shape
        for name in ("B", "alpha", "A_anchor", "alpha_anchor"):
            if getattr(self, name).shape != n:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {n}")

    def copy(self) -> "AdaptiveParams":
        return AdaptiveParams(self.A.copy(), self.B.copy(), self.alpha.copy(),
                              self.A_anchor.copy(), self.alpha_anchor.copy())

    def with_base(self, base: np.ndarray) -> "AdaptiveParams":
        """Install a new base and snapshot the tying anchors (round start)."""
        base = np.asarray(base, dtype=np.float64)
        if base.shape != self.A.shape:
            raise DimensionError(f"base has shape {base.shape}, expected {self.A.shape}")
        return AdaptiveParams(self.A.copy(), base.copy(), self.alpha.copy(),
                              self.A.copy(), self.alpha.copy())


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray

    @property
    def embeddings(self) -> np.ndarray:
        return self.hidden


@dataclass
class AdamState:
    step: int
    m_A: np.ndarray
    v_A: np.ndarray
    m_alpha: np.ndarray
    v_alpha: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))


def init_adaptive(shapes: LayerShapes, seed) -> AdaptiveParams:
    """He-normal A, alpha = 1, B = 0; anchors copy A and alpha."""
    rng = seeded_rng(seed, 11)
    d, h, L = shapes.proto_dim, shapes.hidden_dim, shapes.num_labels
    a = np.concatenate([
        rng.normal(d * h, scale=np.sqrt(2.0 / d)),
        rng.normal(h, scale=np.sqrt(2.0 / d)),
        rng.normal(h * L, scale=np.sqrt(2.0 / h)),
    ])
    n = shapes.param_count
    return AdaptiveParams(a, np.zeros(n), np.ones(n), a.copy(), np.ones(n))


def compose(p: AdaptiveParams) -> np.ndarray:
    if not (p.A.shape == p.B.shape == p.alpha.shape):
        raise DimensionError("A, B and alpha must share one length")
    return p.B * p.alpha + p.A


def forward(theta: np.ndarray, shapes: LayerShapes, x) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != shapes.proto_dim:
        raise DimensionError(f"prototype width {x.shape[-1]} != proto_dim {shapes.proto_dim}")
    w1, b1, w2 = shapes.split(theta)
    pre = x @ w1 + b1
    hidden = np.maximum(pre, 0.0)
    return ForwardCache(x, pre, hidden, hidden @ w2)


def embed(theta: np.ndarray, shapes: LayerShapes, x) -> np.ndarray:
    return forward(theta, shapes, x).hidden


def cross_entropy_grad(theta: np.ndarray, shapes: LayerShapes, x, labels):
    """Mean cross-entropy and its gradient with respect to the composed theta."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= shapes.num_labels):
        raise InvalidLabelError(f"labels must lie in [0, {shapes.num_labels})")
    cache = forward(theta, shapes, x)
    n = cache.logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"{labels.size} labels for a batch of {n}")

    z = cache.logits - cache.logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    d_logits = np.exp(log_probs)
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    _, _, w2 = shapes.split(theta)
    d_w2 = cache.hidden.T @ d_logits
    d_pre = (d_logits @ w2.T) * (cache.pre > 0)
    d_w1 = cache.inputs.T @ d_pre
    d_b1 = d_pre.sum(axis=0)
    grad = np.concatenate([d_w1.ravel(), d_b1, d_w2.ravel()])
    return float(loss), grad


def tie_penalty(p: AdaptiveParams, tie_weight: float) -> float:
    n = p.A.size
    return tie_weight * (np.abs(p.A - p.A_anchor).sum() + np.abs(p.alpha - p.alpha_anchor).sum()) / n


def loss_and_grad(p: AdaptiveParams, shapes: LayerShapes, x, labels, tie_weight: float = 0.0):
    """Tying-penalised cross-entropy; returns ``(loss, grad_A, grad_alpha)``.

    The tie term is ``tie_weight * (|A - A_anchor|_1 + |alpha - alpha_anchor|_1) / n``
    with subgradient 0 at the kink.
    """
    theta = compose(p)
    ce, d_theta = cross_entropy_grad(theta, shapes, x, labels)
    loss = ce
    grad_a = d_theta.copy()
    grad_alpha = d_theta * p.B
    if tie_weight:
        scale = tie_weight / p.A.size
        loss += tie_penalty(p, tie_weight)
        grad_a += scale * np.sign(p.A - p.A_anchor)
        grad_alpha += scale * np.sign(p.alpha - p.alpha_anchor)
    return loss, grad_a, grad_alpha


def adam_step(p: AdaptiveParams, grad_a, grad_alpha, state: AdamState, lr=1e-3,
              betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, train_alpha=True):
    """One AdamW step on A and alpha. B and the anchors are carried over untouched."""
    b1, b2 = betas
    t = state.step + 1

    def update(param, grad, m, v):
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        param = param * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        return param, m, v

    new_a, m_a, v_a = update(p.A, grad_a, state.m_A, state.v_A)
    if train_alpha:
        new_alpha, m_al, v_al = update(p.alpha, grad_alpha, state.m_alpha, state.v_alpha)
    else:
        new_alpha, m_al, v_al = p.alpha, state.m_alpha, state.v_alpha
    return (replace(p, A=new_a, alpha=new_alpha),
            AdamState(t, m_a, v_a, m_al, v_al))


# -- checkpoints ---------------------------------------------------------------

def write_checkpoint(path, shapes: LayerShapes, vectors) -> None:
    """Binary layout: magic, uint32 (proto_dim, hidden_dim, num_labels, count),
    then ``count`` little-endian float64 vectors of ``param_count`` entries each."""
    vectors = [np.asarray(v, dtype="<f8") for v in vectors]
    for v in vectors:
        if v.shape != (shapes.param_count,):
            raise DimensionError(f"vector of shape {v.shape} does not match {shapes}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, shapes.proto_dim, shapes.hidden_dim,
                              shapes.num_labels, len(vectors)))
        for v in vectors:
            fh.write(v.tobytes())


def read_checkpoint(path) -> tuple[LayerShapes, list[np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError(f"{path}: truncated checkpoint header")
    magic, d, h, L, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    shapes = LayerShapes(d, h, L)
    n = shapes.param_count
    body = data[_HEADER.size:]
    if len(body) != count * n * 8:
        raise ParseError(f"{path}: expected {count * n * 8} payload bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return shapes, [flat[i * n:(i + 1) * n].copy() for i in range(count)]


def save_adaptive(path, shapes: LayerShapes, p: AdaptiveParams) -> None:
    write_checkpoint(path, shapes, [p.A, p.B, p.alpha, p.A_anchor, p.alpha_anchor])


def load_adaptive(path) -> tuple[LayerShapes, AdaptiveParams]:
    shapes, vecs = read_checkpoint(path)
    if len(vecs) != 5:
        raise ParseError(f"{path}: expected 5 vectors for adaptive params, found {len(vecs)}")
    return shapes, AdaptiveParams(*vecs)
