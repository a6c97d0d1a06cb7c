import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstil.client import (ClientState, ExtractionLayer, Prototypes, RehearsalMemory, TrainConfig,
                            extract_prototypes, rehearsal_count, sample_training_batch,
                            task_feature, train_local, update_memory)
from fedstil.errors import DimensionError, EmptyTaskError
from fedstil.model import AdamState, AdaptiveParams, LayerShapes, compose, embed, init_adaptive
from fedstil.numeric import seeded_rng
from fedstil.stream import StreamConfig, TaskBatch, generate_round, build_identity_trajectories


def make_batch(features, labels, client=0, round=0):
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    empty = np.zeros((0, features.shape[1]))
    return TaskBatch(client, round, features, labels, empty, np.zeros(0, dtype=np.int64))


def make_client(shapes, seed=0, budget=512, quota=4, params=None):
    params = params if params is not None else init_adaptive(shapes, seed)
    return ClientState(0, params, RehearsalMemory(budget, quota), AdamState.zeros(shapes.param_count),
                       seeded_rng(seed, 99))


def protos(rng, n, dim, n_ids, round=0):
    return Prototypes(rng.normal(size=(n, dim)), rng.integers(0, n_ids, n), np.full(n, round))


# -- extraction ------------------------------------------------------------------

def test_identity_projection_passes_features_through():
    layer = ExtractionLayer(np.eye(3))
    x = np.array([[1.0, -2.0, 0.5]])
    p = extract_prototypes(layer, make_batch(x, [7]))
    np.testing.assert_array_equal(p.features, x)
    assert p.labels.tolist() == [7]


def test_zero_raw_gives_zero_prototype():
    layer = ExtractionLayer.random(5, 3, seed=1)
    np.testing.assert_array_equal(layer.project(np.zeros(5)), np.zeros((1, 3)))


def test_projection_matches_loop_oracle():
    rng = np.random.default_rng(0)
    layer = ExtractionLayer.random(6, 4, seed=2)
    x = rng.normal(size=(5, 6))
    got = layer.project(x)
    for n in range(5):
        for k in range(4):
            expected = sum(layer.projection[r, k] * x[n, r] for r in range(6))
            assert abs(got[n, k] - expected) < 1e-12


def test_projection_dimension_error():
    with pytest.raises(DimensionError):
        ExtractionLayer.random(5, 3, seed=0).project(np.zeros((2, 4)))


def test_extraction_ignores_query_samples():
    cfg = StreamConfig(num_clients=2, num_identities=4, raw_dim=3, samples_per_identity_per_round=5, seed=0)
    batch = generate_round(cfg, build_identity_trajectories(cfg), 0)[0]
    p = extract_prototypes(ExtractionLayer(np.eye(3)), batch)
    np.testing.assert_array_equal(p.features, batch.train_features)
    for q in batch.query_features:
        assert not any(np.array_equal(q, f) for f in p.features)


# -- task features ---------------------------------------------------------------

def test_task_feature_small_cases():
    one = Prototypes(np.array([[1.5, -2.0]]), np.array([0]), np.array([0]))
    np.testing.assert_array_equal(task_feature(one).mean, [1.5, -2.0])
    two = Prototypes(np.array([[1.0, 3.0], [3.0, 1.0]]), np.array([0, 1]), np.array([0, 0]))
    np.testing.assert_array_equal(task_feature(two).mean, [2.0, 2.0])


def test_task_feature_matches_summation_oracle():
    rng = np.random.default_rng(3)
    p = protos(rng, 100, 6, 5)
    got = task_feature(p, client=2, round=4)
    expected = [sum(p.features[n, k] for n in range(100)) / 100 for k in range(6)]
    np.testing.assert_allclose(got.mean, expected, rtol=0, atol=1e-12)
    assert (got.client, got.round, got.count) == (2, 4, 100)


def test_task_feature_empty():
    with pytest.raises(EmptyTaskError):
        task_feature(Prototypes.empty(3))


def test_task_feature_commutes_with_projection():
    rng = np.random.default_rng(4)
    layer = ExtractionLayer.random(7, 4, seed=5)
    raw = rng.normal(size=(30, 7))
    f = task_feature(extract_prototypes(layer, make_batch(raw, np.zeros(30))))
    np.testing.assert_allclose(f.mean, layer.projection.T @ raw.mean(axis=0), atol=1e-10)


# -- rehearsal memory --------------------------------------------------------------

SHAPES = LayerShapes(3, 5, 6)


def test_memory_stores_all_when_quota_covers_count():
    rng = np.random.default_rng(0)
    p = Prototypes(rng.normal(size=(3, 3)), np.array([2, 2, 2]), np.zeros(3, dtype=np.int64))
    mem = update_memory(make_client(SHAPES, quota=5), p, SHAPES)
    assert len(mem) == 3 and mem.identities() == [2]


def test_memory_admits_closest_to_center():
    # W1 = I, b1 = 0, so the embedding is relu(x); the centre is (8/3, 1)
    shapes = LayerShapes(2, 2, 2)
    theta = np.concatenate([np.eye(2).ravel(), np.zeros(2), np.zeros(4)])
    params = AdaptiveParams(theta, np.zeros(10), np.ones(10), theta.copy(), np.ones(10))
    feats = np.array([[1.0, 1.0], [1.0, 1.0], [6.0, 1.0]])
    p = Prototypes(feats, np.array([0, 0, 0]), np.zeros(3, dtype=np.int64))
    mem = update_memory(make_client(shapes, quota=1, params=params), p, shapes)
    np.testing.assert_array_equal(mem.groups[0].features, [[1.0, 1.0]])


def test_memory_distance_zero_beats_distance_five():
    shapes = LayerShapes(1, 1, 2)
    theta = np.array([1.0, 0.0, 0.0, 0.0])  # hidden = relu(x)
    params = AdaptiveParams(theta, np.zeros(4), np.ones(4), theta.copy(), np.ones(4))
    # embeddings 0, 5, 10: the centre is 5, so distances are 25, 0, 25
    feats = np.array([[0.0], [5.0], [10.0]])
    p = Prototypes(feats, np.array([1, 1, 1]), np.zeros(3, dtype=np.int64))
    mem = update_memory(make_client(shapes, quota=1, params=params), p, shapes)
    np.testing.assert_array_equal(mem.groups[1].features, [[5.0]])


def memory_oracle(state, batches, shapes):
    """Independent re-statement of admission + balanced eviction by exhaustive ranking."""
    theta = compose(state.params)
    groups = {}
    budget, quota = state.memory.budget, state.memory.per_identity_quota

    def emb(x):
        w1, b1, _ = shapes.split(theta)
        return np.maximum(x @ w1 + b1, 0.0)

    for p in batches:
        for ident in sorted(set(p.labels.tolist())):
            rows = [n for n in range(len(p)) if p.labels[n] == ident]
            e = emb(p.features[rows])
            c = e.mean(axis=0)
            scored = sorted(range(len(rows)), key=lambda k: (float(((e[k] - c) ** 2).sum()), k))
            groups.setdefault(ident, []).extend(p.features[rows[k]] for k in scored[:quota])
        while sum(len(g) for g in groups.values()) > budget:
            ident = sorted(groups, key=lambda i: (-len(groups[i]), i))[0]
            e = emb(np.array(groups[ident]))
            c = e.mean(axis=0)
            d = [float(((e[k] - c) ** 2).sum()) for k in range(len(e))]
            worst = max(range(len(d)), key=lambda k: (d[k], k))
            del groups[ident][worst]
            if not groups[ident]:
                del groups[ident]
    return groups


@pytest.mark.parametrize("seed", range(5))
def test_memory_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    state = make_client(SHAPES, seed=seed, budget=10, quota=4)
    batches = [protos(rng, 25, 3, 5, round=r) for r in range(3)]
    for p in batches:
        state.memory = update_memory(state, p, SHAPES)
    expected = memory_oracle(make_client(SHAPES, seed=seed, budget=10, quota=4), batches, SHAPES)
    assert state.memory.identities() == sorted(expected)
    for ident, rows in expected.items():
        np.testing.assert_array_equal(state.memory.groups[ident].features, np.array(rows))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.lists(st.integers(1, 20), min_size=1, max_size=6),
       st.integers(0, 2**32 - 1))
def test_memory_never_exceeds_budget(budget, quota, sizes, seed):
    rng = np.random.default_rng(seed)
    state = make_client(SHAPES, seed=1, budget=budget, quota=quota)
    for r, n in enumerate(sizes):
        state.memory = update_memory(state, protos(rng, n, 3, 6, round=r), SHAPES)
        assert len(state.memory) <= budget
        assert all(len(g) > 0 for g in state.memory.groups.values())


def test_memory_is_deterministic():
    rng = np.random.default_rng(9)
    batches = [protos(rng, 20, 3, 4, round=r) for r in range(3)]
    results = []
    for _ in range(2):
        state = make_client(SHAPES, budget=7, quota=3)
        for p in batches:
            state.memory = update_memory(state, p, SHAPES)
        results.append(state.memory.as_prototypes(3))
    np.testing.assert_array_equal(results[0].features, results[1].features)
    np.testing.assert_array_equal(results[0].labels, results[1].labels)


# -- batch sampling --------------------------------------------------------------

def filled_memory(rng, n=12):
    state = make_client(SHAPES, budget=64, quota=n)
    return update_memory(state, protos(rng, n, 3, 1), SHAPES)


def test_rehearsal_count():
    assert rehearsal_count(32, 0.3) == 10
    assert rehearsal_count(8, 0.25) == 2
    assert rehearsal_count(10, 0.3) == 3  # 0.3 * 10 is 3.0000000000000004 in floating point


def test_rho_zero_uses_only_current():
    rng = np.random.default_rng(0)
    current = protos(rng, 10, 3, 2)
    mem = filled_memory(rng)
    _, y, n_mem = sample_training_batch(mem, current, 8, 0.0, seeded_rng(1))
    assert n_mem == 0 and len(y) == 8


def test_empty_memory_falls_back_to_current():
    rng = np.random.default_rng(1)
    current = protos(rng, 10, 3, 2)
    x, _, n_mem = sample_training_batch(RehearsalMemory(), current, 8, 0.5, seeded_rng(1))
    assert n_mem == 0
    assert all(any(np.array_equal(row, c) for c in current.features) for row in x)


def test_memory_fraction_frequency():
    rng = np.random.default_rng(2)
    current = Prototypes(rng.normal(size=(50, 3)), np.zeros(50, dtype=np.int64), np.zeros(50, dtype=np.int64))
    stored = Prototypes(rng.normal(size=(20, 3)) + 100, np.ones(20, dtype=np.int64), np.zeros(20, dtype=np.int64))
    mem = RehearsalMemory(64, 20, {1: stored})
    g = seeded_rng(3)
    from_mem = 0
    draws = 10_000
    for _ in range(draws // 8):
        _, y, _ = sample_training_batch(mem, current, 8, 0.25, g)
        from_mem += int((y == 1).sum())
    assert abs(from_mem / (draws // 8 * 8) - 0.25) < 0.02


def test_sampling_both_empty():
    with pytest.raises(EmptyTaskError):
        sample_training_batch(RehearsalMemory(), Prototypes.empty(3), 8, 0.3, seeded_rng(0))


def test_sampling_with_replacement_when_pool_small():
    rng = np.random.default_rng(4)
    current = protos(rng, 3, 3, 1)
    x, _, _ = sample_training_batch(RehearsalMemory(), current, 10, 0.0, seeded_rng(0))
    assert len(x) == 10


# -- local training ----------------------------------------------------------------

def test_zero_epochs_returns_composed_incoming_state():
    rng = np.random.default_rng(5)
    state = make_client(SHAPES)
    base = rng.normal(size=SHAPES.param_count)
    _, theta, losses = train_local(state, protos(rng, 10, 3, 6), base, SHAPES, TrainConfig(epochs=0))
    np.testing.assert_array_equal(theta, base * state.params.alpha + state.params.A)
    assert losses == []


def test_training_reduces_loss_on_separable_task():
    rng = np.random.default_rng(6)
    shapes = LayerShapes(2, 8, 2)
    x = np.concatenate([rng.normal(size=(30, 2)) + 3, rng.normal(size=(30, 2)) - 3])
    task = Prototypes(x, np.repeat([0, 1], 30), np.zeros(60, dtype=np.int64))
    state = make_client(shapes)
    cfg = TrainConfig(epochs=5, lr=1e-2, tie_weight=0.0, rehearsal_fraction=0.0)
    _, _, losses = train_local(state, task, np.zeros(shapes.param_count), shapes, cfg)
    assert losses[-1] < losses[0]


def test_training_is_deterministic():
    rng = np.random.default_rng(7)
    task = protos(rng, 40, 3, 6)
    base = rng.normal(size=SHAPES.param_count)
    runs = [train_local(make_client(SHAPES), task, base, SHAPES, TrainConfig(epochs=3)) for _ in range(2)]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])
    assert runs[0][2] == runs[1][2]


def test_training_keeps_dispatched_base():
    rng = np.random.default_rng(8)
    base = rng.normal(size=SHAPES.param_count)
    new, _, _ = train_local(make_client(SHAPES), protos(rng, 20, 3, 6), base, SHAPES, TrainConfig(epochs=2))
    np.testing.assert_array_equal(new.params.B, base)


def test_training_on_empty_task():
    with pytest.raises(EmptyTaskError):
        train_local(make_client(SHAPES), Prototypes.empty(3), np.zeros(SHAPES.param_count), SHAPES,
                    TrainConfig())


def test_embedding_used_for_memory_is_model_embedding():
    # guard: memory centres use the same embedding as retrieval
    rng = np.random.default_rng(10)
    state = make_client(SHAPES)
    x = rng.normal(size=(4, 3))
    w1, b1, _ = SHAPES.split(compose(state.params))
    np.testing.assert_allclose(embed(compose(state.params), SHAPES, x), np.maximum(x @ w1 + b1, 0))
