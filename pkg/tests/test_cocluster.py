import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from ehr_consensus.cocluster import (
    SINK,
    align_labels,
    bootstrap_stability,
    choose_k,
    cluster_connectivity,
    fixed_point_violations,
    patient_cluster_event_distribution,
    pearson_corr_matrix,
    spectral_cocluster,
)
from oracles import fixed_point_ok, pearson_oracle, planted_blocks


def test_block_diagonal_exact():
    A = np.kron(np.eye(2), np.ones((2, 2)))
    m = spectral_cocluster(A, 2)
    assert m.patient_labels[0] == m.patient_labels[1] != m.patient_labels[2] == m.patient_labels[3]
    assert m.feature_labels[0] == m.feature_labels[1] != m.feature_labels[2] == m.feature_labels[3]
    # the joint cluster pairs rows with their own columns
    assert m.patient_labels[0] == m.feature_labels[0]


def test_k_one_all_zero_labels():
    A = np.random.default_rng(0).random((6, 5))
    m = spectral_cocluster(A, 1)
    assert np.all(m.feature_labels == 0) and np.all(m.patient_labels == 0)


def test_k_out_of_range():
    A = np.ones((4, 3))
    for k in (0, 4):
        with pytest.raises(ValueError):
            spectral_cocluster(A, k)


def test_negative_matrix_rejected():
    with pytest.raises(ValueError):
        spectral_cocluster(-np.ones((3, 3)), 1)


def test_zero_rows_and_columns_go_to_sink():
    A = np.kron(np.eye(2), np.ones((3, 3)))
    A = np.pad(A, ((0, 1), (0, 1)))
    m = spectral_cocluster(A, 2)
    assert m.patient_labels[-1] == SINK and m.feature_labels[-1] == SINK
    assert np.all(m.patient_labels[:-1] >= 0) and np.all(m.feature_labels[:-1] >= 0)


@pytest.mark.parametrize("seed", range(5))
def test_planted_recovery_and_fixed_point(seed):
    A, rows, cols = planted_blocks(30, 12, 3, 0.05, seed)
    m = spectral_cocluster(A, 3, seed=seed)
    assert adjusted_rand_score(rows, m.patient_labels) >= 0.95
    assert adjusted_rand_score(cols, m.feature_labels) >= 0.95
    assert m.converged
    assert fixed_point_violations(A, m) == (0, 0)
    assert fixed_point_ok(A, m.patient_labels, m.feature_labels, 3)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_fixed_point_holds_on_random_matrices(seed):
    rng = np.random.default_rng(seed)
    A = rng.poisson(0.7, size=(20, 9)).astype(float)
    k = int(rng.integers(1, 5))
    m = spectral_cocluster(A, k, seed=seed)
    if m.converged:
        assert fixed_point_ok(A, m.patient_labels, m.feature_labels, k)
    labels = np.concatenate([m.patient_labels, m.feature_labels])
    assert np.all((labels >= SINK) & (labels < k))


def test_deterministic_and_order_invariant():
    A, rows, cols = planted_blocks(30, 12, 3, 0.05, 7)
    a = spectral_cocluster(A, 3, seed=1)
    b = spectral_cocluster(A, 3, seed=1)
    assert np.array_equal(a.feature_labels, b.feature_labels)
    rng = np.random.default_rng(0)
    pr, pc = rng.permutation(30), rng.permutation(12)
    c = spectral_cocluster(A[np.ix_(pr, pc)], 3, seed=1)
    assert adjusted_rand_score(a.feature_labels[pc], c.feature_labels) == 1.0
    assert adjusted_rand_score(a.patient_labels[pr], c.patient_labels) == 1.0


def test_choose_k_single_candidate():
    A, _, _ = planted_blocks(30, 12, 3, 0.0, 0)
    k, table = choose_k(A, [3])
    assert k == 3 and len(table) == 1 and table[0]["chosen"]


def test_choose_k_table_rows_and_planted_pick():
    A, _, _ = planted_blocks(90, 30, 3, 0.02, 0)
    k, table = choose_k(A, range(2, 11))
    assert [r["k"] for r in table] == list(range(2, 11))
    assert sum(r["chosen"] for r in table) == 1
    assert k == 3


def test_choose_k_empty_range():
    with pytest.raises(ValueError):
        choose_k(np.ones((4, 4)), [])


def test_align_labels_undoes_renaming():
    ref = np.array([0, 0, 1, 1, 2, 2, 2])
    renamed = np.array([1, 1, 2, 2, 0, 0, 0])
    assert np.array_equal(align_labels(renamed, ref, 3), ref)


def test_stability_noise_free_is_one():
    A, _, _ = planted_blocks(60, 18, 3, 0.0, 0)
    res = bootstrap_stability(A, 3, B=5, seed=0)
    assert res.mean == 1.0 and res.n_used == 5 and res.n_skipped == 0


def test_stability_needs_two_replicates():
    with pytest.raises(ValueError):
        bootstrap_stability(np.ones((3, 3)), 1, B=1)


def test_pearson_examples():
    rng = np.random.default_rng(3)
    x = rng.normal(size=50)
    corr, flat = pearson_corr_matrix(np.c_[x, -x])
    assert corr[0, 0] == 1.0
    assert corr[0, 1] == pytest.approx(-1.0, abs=1e-12)
    assert not flat.any()
    A = rng.normal(size=(40, 5))
    assert np.allclose(pearson_corr_matrix(A)[0], pearson_oracle(A), atol=1e-12, rtol=0)


def test_pearson_zero_variance_flagged():
    A = np.c_[np.arange(5.0), np.ones(5)]
    corr, flat = pearson_corr_matrix(A)
    assert flat.tolist() == [False, True]
    assert corr[0, 1] == 0.0 and corr[1, 1] == 1.0


def _edges_oracle(corr, labels, t):
    out = {}
    for a in range(len(labels)):
        for b in range(a + 1, len(labels)):
            if labels[a] != labels[b] and corr[a, b] > t:
                key = tuple(sorted((labels[a], labels[b])))
                out[key] = out.get(key, 0) + 1
    return sorted((a, b, n) for (a, b), n in out.items())


def test_connectivity_examples():
    corr = np.kron(np.eye(2), np.ones((2, 2)))
    assert cluster_connectivity(corr, [0, 0, 1, 1]) == []
    corr[1, 2] = corr[2, 1] = 0.6
    assert cluster_connectivity(corr, [0, 0, 1, 1]) == [(0, 1, 1)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_connectivity_matches_pair_scan(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(15, 8))
    A[:, 4:] += A[:, :4] * 2
    corr, _ = pearson_corr_matrix(A)
    labels = rng.integers(0, 3, 8)
    assert cluster_connectivity(corr, labels, 0.3) == _edges_oracle(corr, labels, 0.3)


def test_connectivity_relabel_invariant():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(30, 6))
    A[:, 3:] += A[:, :3]
    corr, _ = pearson_corr_matrix(A)
    labels = np.array([0, 1, 2, 0, 1, 2])
    rename = np.array([2, 0, 1])
    a = cluster_connectivity(corr, labels, 0.3)
    b = cluster_connectivity(corr, rename[labels], 0.3)
    inv = np.argsort(rename)
    back = sorted((min(inv[x], inv[y]), max(inv[x], inv[y]), n) for x, y, n in b)
    assert a == back


def test_event_distribution():
    labels = [0, 0, 1, 1, 1, 2]
    sub = ["no_event", "no_event", "mi", "no_event", "stroke", "mi"]
    d = patient_cluster_event_distribution(labels, sub)
    assert d[0]["proportions"]["no_event"] == 1.0
    assert d[1]["counts"] == {"mi": 1, "no_event": 1, "stroke": 1}
    assert d[2]["n"] == 1 and d[2]["proportions"]["mi"] == 1.0
    for c in d.values():
        assert abs(sum(c["proportions"].values()) - 1.0) < 1e-12
