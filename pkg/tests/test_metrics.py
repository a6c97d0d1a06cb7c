import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstil import metrics as M
from fedstil.errors import EmptyEvalError, UndefinedForgettingError
from fedstil.stream import TaskBatch


def retrieval_oracle(q, lq, g, lg, ks=(1, 3, 5)):
    """Per-query enumeration: explicit ranking list, precision at each positive."""
    aps, hits = [], {k: 0 for k in ks}
    for qi in range(len(q)):
        d = [sum((q[qi][k] - g[gi][k]) ** 2 for k in range(len(q[qi]))) for gi in range(len(g))]
        ranking = sorted(range(len(g)), key=lambda gi: (d[gi], gi))
        positives = [r + 1 for r, gi in enumerate(ranking) if lg[gi] == lq[qi]]
        if not positives:
            continue
        aps.append(sum((m + 1) / r for m, r in enumerate(positives)) / len(positives))
        for k in ks:
            hits[k] += positives[0] <= k
    n = len(aps)
    return sum(aps) / n, {k: hits[k] / n for k in ks}, n


def test_unique_nearest_positive():
    res = M.evaluate_retrieval([[0.0]], [1], [[0.1], [5.0]], [1, 2])
    assert res.mAP == 1.0 and res.rank[1] == 1.0


def test_hand_case_five_sixths():
    # gallery distances 1..5 from the query; positives at ranks 1 and 3
    g = [[1.0], [2.0], [3.0], [4.0], [5.0]]
    lg = [7, 0, 7, 0, 0]
    res = M.evaluate_retrieval([[0.0]], [7], g, lg)
    assert res.mAP == 5 / 6
    assert res.rank == {1: 1.0, 3: 1.0, 5: 1.0}


@pytest.mark.parametrize("seed", range(20))
def test_retrieval_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    nq, ng, d = int(rng.integers(1, 11)), int(rng.integers(5, 51)), 3
    q, g = rng.normal(size=(nq, d)), rng.normal(size=(ng, d))
    lq, lg = rng.integers(0, 4, nq), rng.integers(0, 4, ng)
    if seed % 4 == 0:  # force distance ties
        g[1] = g[0]
        lg[0], lg[1] = 0, 1
    try:
        expected = retrieval_oracle(q, lq, g, lg)
    except ZeroDivisionError:
        with pytest.raises(EmptyEvalError):
            M.evaluate_retrieval(q, lq, g, lg)
        return
    res = M.evaluate_retrieval(q, lq, g, lg)
    assert abs(res.mAP - expected[0]) < 1e-12
    for k in (1, 3, 5):
        assert abs(res.rank[k] - expected[1][k]) < 1e-12
    assert res.valid_queries == expected[2]
    assert res.skipped_queries == nq - expected[2]


def test_ties_prefer_lower_gallery_index():
    res = M.evaluate_retrieval([[0.0]], [1], [[1.0], [1.0]], [0, 1])
    assert res.mAP == 0.5 and res.rank[1] == 0.0


def test_no_valid_query():
    with pytest.raises(EmptyEvalError):
        M.evaluate_retrieval([[0.0]], [3], [[1.0]], [4])


def test_queries_without_positive_are_skipped():
    res = M.evaluate_retrieval([[0.0], [0.0]], [1, 9], [[0.5]], [1])
    assert res.valid_queries == 1 and res.skipped_queries == 1 and res.mAP == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_retrieval_properties(seed):
    rng = np.random.default_rng(seed)
    q, g = rng.normal(size=(4, 2)), rng.normal(size=(12, 2))
    lq, lg = rng.integers(0, 3, 4), rng.integers(0, 3, 12)
    lg[:3] = [0, 1, 2]
    res = M.evaluate_retrieval(q, lq, g, lg, ks=(1, 3, 5, 12))
    assert 0.0 <= res.mAP <= 1.0
    assert res.rank[1] <= res.rank[3] <= res.rank[5] <= res.rank[12] == 1.0
    # distance-preserving reshuffle of the gallery changes nothing without ties
    perm = rng.permutation(12)
    shuffled = M.evaluate_retrieval(q, lq, g[perm], lg[perm], ks=(1, 3, 5, 12))
    assert abs(shuffled.mAP - res.mAP) < 1e-12


def test_perfect_separation_gives_map_one():
    g = np.array([[0.0], [0.1], [10.0], [10.1]])
    res = M.evaluate_retrieval([[0.05], [10.05]], [0, 1], g, [0, 0, 1, 1])
    assert res.mAP == 1.0


# -- lifelong accuracy ---------------------------------------------------------------

def timeline_from(values):
    """values[round][task] -> mAP (None = not evaluated)."""
    tl = M.AccuracyTimeline()
    for r, row in enumerate(values):
        for t, v in enumerate(row):
            if v is not None:
                tl.add(0, r, t, {"map": v, "rank1": v, "rank3": v, "rank5": v})
    return tl


def test_avg_accuracy_cases():
    assert M.avg_accuracy(timeline_from([[0.7]]), 0, 0) == 0.7
    assert M.avg_accuracy(timeline_from([[0.9], [0.4, 0.6]]), 0, 1) == 0.5
    rng = np.random.default_rng(0)
    vals = rng.random(6).tolist()
    tl = timeline_from([vals[:r + 1] for r in range(6)])
    assert abs(M.avg_accuracy(tl, 0, 5) - sum(vals) / 6) < 1e-12
    with pytest.raises(EmptyEvalError):
        M.avg_accuracy(tl, 3, 0)


def test_forgetting_cases():
    assert M.forgetting(timeline_from([[0.5], [0.6, 0.4], [0.7, 0.5, 0.3]]), 0, 2) == 0.0
    assert M.forgetting(timeline_from([[0.8], [0.6, 0.9]]), 0, 1) == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(UndefinedForgettingError):
        M.forgetting(timeline_from([[0.8]]), 0, 0)


def forgetting_oracle(values, r):
    tasks = [t for t, v in enumerate(values[r]) if v is not None]
    drops = []
    for t in tasks[:-1]:
        best = -1.0
        for rr in range(r + 1):
            if t < len(values[rr]) and values[rr][t] is not None:
                best = max(best, values[rr][t])
        drops.append(best - values[r][t])
    return sum(drops) / len(drops)


@pytest.mark.parametrize("seed", range(10))
def test_forgetting_matches_max_scan_oracle(seed):
    rng = np.random.default_rng(seed)
    values = [rng.random(r + 1).tolist() for r in range(6)]
    tl = timeline_from(values)
    for r in range(1, 6):
        assert abs(M.forgetting(tl, 0, r) - forgetting_oracle(values, r)) < 1e-12
        assert M.forgetting(tl, 0, r) >= 0.0


# -- communication ---------------------------------------------------------------

def test_accounting_substitution():
    ledger = M.account_round(M.CommLedger(), 0, 10, 2, [3])
    assert ledger.bytes_for(0, 3) == (40, 48)
    assert ledger.total_s2c_bytes() == 40 and ledger.total_c2s_bytes() == 48


def test_accounting_no_participants():
    ledger = M.account_round(M.CommLedger(), 0, 10, 2, [])
    assert ledger.total_s2c_bytes() == 0 and ledger.total_c2s_bytes() == 0


def test_accounting_closed_form():
    ledger = M.CommLedger()
    for r in range(6):
        M.account_round(ledger, r, 100, 8, range(5))
    assert ledger.total_s2c_bytes() == 6 * 5 * 4 * 100
    assert ledger.total_c2s_bytes() == 6 * 5 * 4 * 108


# -- gallery -------------------------------------------------------------------

def batch(client, round, q, labels):
    q = np.asarray(q, dtype=float)
    return TaskBatch(client, round, np.zeros((0, q.shape[1])), np.zeros(0, dtype=np.int64), q,
                     np.asarray(labels, dtype=np.int64))


def test_two_client_gallery_is_other_clients_queries():
    b0 = batch(0, 0, [[1.0], [2.0]], [1, 2])
    b1 = batch(1, 0, [[3.0], [4.0]], [3, 4])
    g, lg = M.build_gallery([b0, b1], 0, lambda x: x)
    np.testing.assert_array_equal(g, [[3.0], [4.0]])
    assert lg.tolist() == [3, 4]


def test_gallery_size_and_order():
    rng = np.random.default_rng(1)
    batches = []
    for r in (1, 0):
        for c in (4, 2, 0, 3, 1):
            n = int(rng.integers(1, 4))
            batches.append(batch(c, r, rng.normal(size=(n, 2)), rng.integers(0, 5, n)))
    g, lg = M.build_gallery(batches, 2, lambda x: x)
    assert len(g) == sum(len(b.query_labels) for b in batches if b.client != 2)
    expected = np.concatenate([b.query_features for b in sorted(batches, key=lambda b: (b.client, b.round))
                               if b.client != 2])
    np.testing.assert_array_equal(g, expected)


def test_empty_gallery():
    with pytest.raises(EmptyEvalError):
        M.build_gallery([batch(0, 0, [[1.0]], [1])], 0, lambda x: x)


# -- metrics log -------------------------------------------------------------------

def test_metrics_log_roundtrip(tmp_path):
    log = M.MetricsLog()
    log.add(0, 1, "fedstil", "map", 0.1 + 0.2, 0)
    log.add(0, 1, "fedstil", "s2c_bytes", 400)
    log.write(tmp_path / "m.csv")
    rows = M.read_metrics_csv(tmp_path / "m.csv")
    assert rows[0]["value"] == 0.1 + 0.2 and rows[0]["task_index"] == 0
    assert rows[1]["task_index"] is None and rows[1]["value"] == 400
    text = (tmp_path / "m.csv").read_text()
    assert text.splitlines()[0] == ",".join(M.CSV_HEADER)


def test_metrics_log_rejects_unknown_metric():
    with pytest.raises(ValueError):
        M.MetricsLog().add(0, 0, "fedstil", "accuracy", 1.0)
