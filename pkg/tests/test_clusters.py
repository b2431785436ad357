import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgda.clusters import (ClusterState, compute_centroids, compute_target_centroids, mean_classifier_discrepancy,
                            mean_intra_cluster_distance, select_confident, selection_counts)


def test_centroid_examples():
    f = np.arange(16, dtype=np.float32).reshape(4, 4)
    cc = compute_centroids(f, [0, 1, 2, 3])
    for k in range(4):
        np.testing.assert_array_equal(cc[k], f[k])
    f2 = np.array([[0, 0], [2, 2], [1, 5], [3, 3], [4, 4]], np.float32)
    cc = compute_centroids(f2, [0, 0, 1, 2, 3])
    np.testing.assert_array_equal(cc[0], [1, 1])


def test_centroids_list_missing_classes():
    with pytest.raises(ValueError, match=r"\['S', 'F'\]"):
        compute_centroids(np.zeros((2, 3)), [0, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4))
def test_centroids_invariant_under_duplication(seed, copies):
    rng = np.random.default_rng(seed)
    y = np.concatenate([np.arange(4), rng.integers(0, 4, 20)])
    f = rng.normal(size=(24, 5))
    a = compute_centroids(f, y)
    b = compute_centroids(np.tile(f, (copies + 1, 1)), np.tile(y, copies + 1))
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=1e-6, atol=1e-7)


def test_intra_cluster_distance_examples():
    cc = {0: np.zeros(2)}
    assert mean_intra_cluster_distance(np.zeros((3, 2)), [0, 0, 0], cc) == {0: 0.0}
    f = np.array([[1.0, 0.0], [0.0, -3.0]])
    assert mean_intra_cluster_distance(f, [0, 0], cc)[0] == pytest.approx(2.0)
    f4 = np.array([[4.0, 4.0], [1.0, 0.0], [3.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    y4 = [0, 1, 1, 2, 3]
    out = mean_intra_cluster_distance(f4, y4, compute_centroids(f4, y4))
    assert out == {0: 0.0, 1: 1.0, 2: 0.0, 3: 0.0}
    with pytest.raises(ValueError, match="no samples"):
        mean_intra_cluster_distance(f, [0, 0], {0: np.zeros(2), 1: np.zeros(2)})


def test_classifier_discrepancy_examples():
    p = np.eye(4)[[0, 1, 2]]
    assert mean_classifier_discrepancy(p, p) == 0.0
    assert mean_classifier_discrepancy(np.eye(4)[[0, 0]], np.eye(4)[[0, 1]]) == pytest.approx(math.sqrt(2) / 2)
    assert mean_classifier_discrepancy(np.eye(4)[[0, 1]], np.eye(4)[[0, 0]]) == mean_classifier_discrepancy(
        np.eye(4)[[1, 0]], np.eye(4)[[0, 0]])
    with pytest.raises(ValueError):
        mean_classifier_discrepancy(np.zeros((0, 4)), np.zeros((0, 4)))


def gate_setup():
    cc_s = {k: np.eye(4)[k] * 10 for k in range(4)}
    m_ctr = {k: 1.0 for k in range(4)}
    return cc_s, m_ctr, 0.1


def test_selection_examples():
    cc_s, m_ctr, m_dis = gate_setup()
    probs = np.array([[0.995, 0.005, 0, 0], [0.98, 0.02, 0, 0], [0.001, 0.999, 0, 0]])
    feats = np.stack([cc_s[0] + 0.1, cc_s[0], cc_s[1] + np.array([0, 0, 2.0, 0])])
    chosen = select_confident(feats, probs, probs, probs, cc_s, m_ctr, m_dis)
    assert chosen == [(0, 0)]


def test_selection_strict_inequalities():
    cc_s, m_ctr, m_dis = gate_setup()
    probs = np.array([[0.99, 0.01, 0, 0]])
    assert select_confident(cc_s[0][None], probs, probs, probs, cc_s, m_ctr, m_dis) == []
    probs = np.array([[1.0, 0, 0, 0]])
    at_radius = (cc_s[0] + np.array([0, 1.0, 0, 0]))[None]
    assert select_confident(at_radius, probs, probs, probs, cc_s, m_ctr, m_dis) == []
    p1 = np.array([[1.0, 0, 0, 0]])
    p2 = np.array([[1.0 - 0.1 / math.sqrt(2), 0.1 / math.sqrt(2), 0, 0]])
    assert select_confident(cc_s[0][None], probs, p1, p2, cc_s, m_ctr, 0.1 + 1e-12) == [(0, 0)]
    assert select_confident(cc_s[0][None], probs, p1, p2, cc_s, m_ctr, 0.09) == []


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.9, 0.999), st.floats(0.1, 1.0), st.floats(0.1, 1.0))
def test_selection_shrinks_when_thresholds_tighten(seed, thr, ctr_scale, dis_scale):
    rng = np.random.default_rng(seed)
    n = 80
    logits = rng.normal(scale=6, size=(n, 4))
    p1 = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    p2 = np.exp(logits + rng.normal(scale=0.3, size=(n, 4)))
    p2 /= p2.sum(1, keepdims=True)
    probs = (p1 + p2) / 2
    feats = rng.normal(size=(n, 3))
    cc_s = {k: rng.normal(scale=0.5, size=3) for k in range(4)}
    m_ctr = {k: float(rng.uniform(0.5, 2.5)) for k in range(4)}
    m_dis = float(rng.uniform(0.01, 0.3))
    loose = set(select_confident(feats, probs, p1, p2, cc_s, m_ctr, m_dis, thr))
    tighter = [
        select_confident(feats, probs, p1, p2, cc_s, m_ctr, m_dis, min(thr + 0.0009, 0.9999)),
        select_confident(feats, probs, p1, p2, cc_s, {k: v * ctr_scale for k, v in m_ctr.items()}, m_dis, thr),
        select_confident(feats, probs, p1, p2, cc_s, m_ctr, m_dis * dis_scale, thr),
    ]
    for t in tighter:
        assert set(t) <= loose


def test_target_centroids_and_fallback():
    cc_s = {k: np.full(2, float(k)) for k in range(4)}
    feats = np.array([[1.0, 1.0], [3.0, 3.0], [7.0, 0.0], [5.0, 5.0]])
    chosen = [(0, 0), (1, 0), (2, 1), (3, 2)]
    cc_t, fb = compute_target_centroids(chosen, feats, cc_s)
    np.testing.assert_allclose(cc_t[0], [2, 2])
    np.testing.assert_allclose(cc_t[1], [7, 0])
    np.testing.assert_allclose(cc_t[3], cc_s[3])
    assert fb == {0: False, 1: False, 2: False, 3: True}
    assert selection_counts(chosen) == {0: 2, 1: 1, 2: 1, 3: 0}
    cc_t, fb = compute_target_centroids([], feats, cc_s)
    assert all(fb.values())


def test_state_roundtrip_and_cc_m():
    rng = np.random.default_rng(0)
    cc_s = {k: rng.normal(size=6).astype(np.float32) for k in range(4)}
    cc_t = {k: rng.normal(size=6).astype(np.float32) for k in range(4)}
    state = ClusterState(cc_s, cc_t, {k: float(k) + 0.25 for k in range(4)}, 0.0123,
                         {0: 5, 1: 0, 2: 3, 3: 1}, {0: False, 1: True, 2: False, 3: False})
    for k in range(4):
        np.testing.assert_allclose(state.cc_m[k], (cc_s[k].astype(np.float64) + cc_t[k]) / 2, rtol=1e-6)
    back = ClusterState.loads(state.dumps())
    assert back.dumps() == state.dumps()
    assert back.m_dis == state.m_dis and back.confident_count == state.confident_count
    for k in range(4):
        np.testing.assert_array_equal(back.cc_s[k], cc_s[k])
        np.testing.assert_array_equal(back.cc_t[k], cc_t[k])
    refreshed = state.with_target(cc_s, {k: 0 for k in range(4)}, {k: True for k in range(4)})
    for k in range(4):
        np.testing.assert_allclose(refreshed.cc_m[k], cc_s[k])


def test_state_parse_errors():
    with pytest.raises(ValueError, match="before any class"):
        ClusterState.loads("m_dis 0.1\nm_ctr 1.0\n")
    with pytest.raises(ValueError, match="missing m_dis"):
        ClusterState.loads("class N\nm_ctr 1.0\n")
    with pytest.raises(ValueError, match="unknown key"):
        ClusterState.loads("m_dis 0.1\nclass N\nbogus 1\n")
