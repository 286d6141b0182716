import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import normalized_mutual_info_score

from kevo.engine import finite_diff_check
from kevo.errors import DimensionError
from kevo.losses import (TripletSet, cross_entropy, l2_normalize, mine_semi_hard, triplet_loss,
                         triplet_objective)
from kevo.metrics import (h2d_metrics, hypothesis_mean_abs, kmeans, nmi_from_labels, nmi_score,
                          recall_at_k, top1_accuracy)


# --------------------------------------------------------------------------- oracles

def semi_hard_oracle(emb, labels, m):
    """Exhaustive enumeration of all ordered triples filtered by the semi-hard band."""
    n = len(labels)
    d = lambda i, j: math.sqrt(sum((emb[i][k] - emb[j][k]) ** 2 for k in range(len(emb[i]))))
    out = []
    for a, p, q in itertools.product(range(n), repeat=3):
        if a == p or labels[a] != labels[p] or labels[q] == labels[a]:
            continue
        if d(a, p) < d(a, q) < d(a, p) + m:
            out.append((a, p, q))
    return out


def recall_oracle(emb, labels, k):
    hits = 0
    n = len(labels)
    for q in range(n):
        dists = sorted((float(np.linalg.norm(emb[q] - emb[j])), j) for j in range(n) if j != q)
        hits += any(labels[j] == labels[q] for _, j in dists[:k])
    return hits / n


# --------------------------------------------------------------------------- cross entropy

def test_ce_uniform_logits():
    loss, _ = cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_ce_confident_limit():
    logits = np.array([[50.0, 0.0, 0.0]])
    assert cross_entropy(logits, np.array([0]))[0] == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy(logits, np.array([0]), 0.1)[0] > 0


def test_ce_smoothing_hand_value():
    loss, _ = cross_entropy(np.array([[1.0, 0.0]]), np.array([0]), 0.1)
    assert loss == pytest.approx(0.36326168751822285, abs=1e-12)


@pytest.mark.parametrize("alpha", [0.0, 0.1])
def test_ce_gradcheck(rng, alpha):
    logits = rng.normal(size=(6, 5))
    labels = rng.integers(0, 5, 6)
    _, g = cross_entropy(logits, labels, alpha)
    err = finite_diff_check(lambda: cross_entropy(logits, labels, alpha)[0], {"z": logits}, {"z": g}, samples=None)
    assert err < 1e-4


# --------------------------------------------------------------------------- triplets

def test_mining_identical_points_gives_nothing():
    emb = np.tile([1.0, 0.0], (4, 1))
    assert len(mine_semi_hard(emb, np.array([0, 0, 1, 1]), 0.2)) == 0


def test_mining_hand_built_set():
    m = 0.4
    # anchor 0 at origin, positive 1 at distance 0.5, negative 2 at 0.7 (= D_ap + m/2), negative 3 far away
    emb = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.7], [5.0, 5.0]])
    labels = np.array([0, 0, 1, 1])
    got = {tuple(t) for t in mine_semi_hard(emb, labels, m).triplets}
    assert (0, 1, 2) in got
    assert (0, 1, 3) not in got        # easy negative beyond the margin
    assert got == set(semi_hard_oracle(emb, labels, m))


def test_mining_matches_exhaustive_enumeration(rng):
    for _ in range(20):
        n = int(rng.integers(4, 16))
        emb, _ = l2_normalize(rng.normal(size=(n, 3)))
        labels = rng.integers(0, 3, n)
        got = [tuple(t) for t in mine_semi_hard(emb, labels, 0.3).triplets]
        assert got == semi_hard_oracle(emb, labels, 0.3)


def test_triplet_hinge_values():
    emb = np.array([[0.0, 0.0], [0.5, 0.0], [0.9, 0.0]])
    ts = TripletSet(np.array([[0, 1, 2]]), 0.2)
    assert triplet_loss(emb, ts)[0] == pytest.approx(0.0)
    emb = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]])
    assert triplet_loss(emb, ts)[0] == pytest.approx(0.2)


def test_triplet_empty_set_zero_grad(rng):
    emb = rng.normal(size=(4, 3))
    loss, g = triplet_loss(emb, TripletSet(np.zeros((0, 3), dtype=int), 0.2))
    assert loss == 0.0 and not g.any()


def test_triplet_gradcheck(rng):
    emb = rng.normal(size=(8, 4))
    labels = np.array([0, 0, 1, 1, 2, 2, 0, 1])
    ts = TripletSet(np.array([[0, 1, 2], [2, 3, 4], [4, 5, 6], [6, 0, 7], [1, 6, 3]]), 5.0)
    _, g = triplet_loss(emb, ts)
    err = finite_diff_check(lambda: triplet_loss(emb, ts)[0], {"e": emb}, {"e": g}, samples=None)
    assert err < 1e-4


def test_triplet_objective_gradcheck(rng):
    raw = rng.normal(size=(10, 5))
    labels = np.repeat(np.arange(5), 2)
    u, _ = l2_normalize(raw)
    ts = mine_semi_hard(u, labels, 0.5)
    assert len(ts) > 0
    _, g, _ = triplet_objective(raw, labels, 0.5)

    def frozen():
        # keep the mined set fixed while probing
        uu, _ = l2_normalize(raw)
        return triplet_loss(uu, ts)[0]

    assert finite_diff_check(frozen, {"r": raw}, {"r": g}, samples=None) < 1e-4


# --------------------------------------------------------------------------- recall / nmi

def test_recall_tight_pairs():
    emb = np.array([[0.0, 0.0], [0.01, 0.0], [5.0, 5.0], [5.0, 5.01]])
    assert recall_at_k(emb, np.array([0, 0, 1, 1]), 1) == 1.0


def test_recall_singleton_classes(rng):
    assert recall_at_k(rng.normal(size=(6, 2)), np.arange(6), 3) == 0.0


def test_recall_constant_embeddings_tie_break():
    # every neighbour is equidistant; lowest index wins: 0 -> 1, others -> 0
    labels = np.array([0, 0, 1, 1])
    assert recall_at_k(np.zeros((4, 2)), labels, 1) == pytest.approx(2 / 4)


def test_recall_matches_oracle(rng):
    for _ in range(10):
        emb = rng.normal(size=(30, 3))
        labels = rng.integers(0, 4, 30)
        for k in (1, 4):
            assert recall_at_k(emb, labels, k) == pytest.approx(recall_oracle(emb, labels, k))


@given(st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_recall_isometry_invariant(seed):
    r = np.random.default_rng(seed)
    emb = r.normal(size=(12, 3))
    labels = r.integers(0, 3, 12)
    q, _ = np.linalg.qr(r.normal(size=(3, 3)))
    moved = emb @ q + r.normal(size=3)
    for k in (1, 2):
        assert recall_at_k(moved, labels, k) == recall_at_k(emb, labels, k)


def test_nmi_perfect_and_single_cluster():
    labels = np.array([0, 0, 1, 1, 2, 2])
    assert nmi_from_labels(labels, labels) == 1.0
    assert nmi_from_labels(labels, np.zeros(6)) == 0.0
    assert nmi_from_labels(np.zeros(4), np.zeros(4)) == 1.0


def test_nmi_fixed_contingency():
    truth = np.array([0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2])
    clusters = np.array([0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 2, 0])
    expected = normalized_mutual_info_score(truth, clusters, average_method="geometric")
    assert nmi_from_labels(truth, clusters) == pytest.approx(expected, abs=1e-12)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=30, deadline=None)
def test_nmi_symmetric_and_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    a = r.integers(0, 4, 20)
    b = r.integers(0, 3, 20)
    perm = r.permutation(4)
    assert nmi_from_labels(a, b) == pytest.approx(nmi_from_labels(b, a), abs=1e-12)
    assert nmi_from_labels(perm[a], b) == pytest.approx(nmi_from_labels(a, b), abs=1e-12)


def test_nmi_separated_blobs(rng):
    centers = np.array([[0, 0], [10, 0], [0, 10]], dtype=float)
    labels = np.repeat(np.arange(3), 10)
    emb = centers[labels] + 0.1 * rng.normal(size=(30, 2))
    assert nmi_score(emb, labels, 3, seed=0) == pytest.approx(1.0)


def test_kmeans_deterministic(rng):
    x = rng.normal(size=(40, 3))
    np.testing.assert_array_equal(kmeans(x, 4, seed=2), kmeans(x, 4, seed=2))


# --------------------------------------------------------------------------- top-1

def test_top1_perfect_and_inverted():
    labels = np.array([0, 1, 1, 0])
    logits = np.eye(2)[labels]
    assert top1_accuracy(logits, labels) == 1.0
    assert top1_accuracy(1 - logits, labels) == 0.0


def test_top1_matches_loop(rng):
    logits = rng.normal(size=(50, 4))
    labels = rng.integers(0, 4, 50)
    expected = sum(int(max(range(4), key=lambda c: (logits[i, c], -c)) == labels[i]) for i in range(50)) / 50
    assert top1_accuracy(logits, labels) == expected


def test_top1_ties_lowest_index():
    assert top1_accuracy(np.zeros((2, 3)), np.array([0, 1])) == 0.5


# --------------------------------------------------------------------------- diagnostics

def test_hypothesis_mean_abs_constant():
    params = {"l.weight": np.full((3, 4), -0.7)}
    mask = {"l.weight": np.eye(3, 4, dtype=bool)}
    fit, reset = hypothesis_mean_abs(params, mask)["l"]
    assert fit == pytest.approx(0.7) and reset == pytest.approx(0.7)


def test_hypothesis_mean_abs_zero_reset_and_full_fit(rng):
    w = rng.normal(size=(4, 4))
    m = rng.random((4, 4)) < 0.5
    params = {"a.weight": np.where(m, w, 0.0), "b.weight": w}
    stats = hypothesis_mean_abs(params, {"a.weight": m, "b.weight": np.ones((4, 4), bool)})
    assert stats["a"][1] == 0.0
    assert stats["a"][0] == pytest.approx(sum(abs(v) for v, k in zip(w.ravel(), m.ravel()) if k) / m.sum())
    assert stats["b"][1] is None


def test_h2d_identical_and_complementary():
    h = np.array([1, 0, 1, 0, 1, 0], dtype=bool)
    s, c = h2d_metrics([h, h, h])
    assert s == [0.0, 0.0] and c == [0.0, 0.0]
    s, c = h2d_metrics([h, ~h])
    assert s == [1.0] and c == [1.0]


def test_h2d_popcount_oracle(rng):
    series = [rng.random(200) < 0.5 for _ in range(4)]
    s, c = h2d_metrics(series)
    for g in range(1, 4):
        assert s[g - 1] == bin(int("".join("1" if a != b else "0" for a, b in zip(series[g - 1], series[g])), 2)).count("1") / 200
        assert c[g - 1] == sum(a != b for a, b in zip(series[0], series[g])) / 200
    assert c[0] == s[0]
    assert all(0 <= v <= 1 for v in s + c)


def test_h2d_length_mismatch():
    with pytest.raises(DimensionError):
        h2d_metrics([np.zeros(3, bool), np.zeros(4, bool)])
