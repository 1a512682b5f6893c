import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehr_consensus.consensus import (
    AgreementMatrix,
    RboParams,
    agreement_matrix,
    cluster_rank,
    clustered_rbo,
    cross_outcome_agreement,
    rbo,
    top_k_table,
)
from oracles import rbo_oracle


def perm_pair(draw_seed, n):
    rng = np.random.default_rng(draw_seed)
    return rng.permutation(n).tolist(), rng.permutation(n).tolist()


# -- rbo ----------------------------------------------------------------------


def test_worked_example():
    assert rbo(list("abc"), list("bac"), RboParams(0.9, 3)) == pytest.approx(0.9, abs=1e-9)
    assert float(rbo_oracle(list("abc"), list("bac"), 0.9)) == pytest.approx(0.9, abs=1e-12)


@pytest.mark.parametrize("p", [0.1, 0.5, 0.9, 0.99])
@pytest.mark.parametrize("n", [1, 2, 7, 50])
def test_identical_lists_score_one(p, n):
    S = list(range(n))
    assert abs(rbo(S, S, RboParams(p)) - 1.0) < 1e-12


def test_disjoint_lists_score_zero():
    assert rbo([1, 2, 3], [4, 5, 6]) == 0.0


def test_empty_list_rejected():
    with pytest.raises(ValueError):
        rbo([], [1])


def test_depth_beyond_list_rejected():
    with pytest.raises(ValueError):
        rbo([1, 2], [2, 1], RboParams(0.9, 3))


def test_params_validated():
    with pytest.raises(ValueError):
        RboParams(p=1.0)
    with pytest.raises(ValueError):
        RboParams(k=0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.floats(0.05, 0.98))
def test_matches_oracle(seed, n, p):
    S, T = perm_pair(seed, n)
    assert rbo(S, T, RboParams(p)) == pytest.approx(rbo_oracle(S, T, p), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_bounded_and_symmetric(seed, n):
    S, T = perm_pair(seed, n)
    a, b = rbo(S, T), rbo(T, S)
    assert 0.0 <= a <= 1.0
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_common_suffix_never_decreases(seed, n):
    S, T = perm_pair(seed, n)
    base = rbo(S, T)
    assert rbo(S + ["new"], T + ["new"]) >= base - 1e-12


# -- clustered ----------------------------------------------------------------


def test_cluster_rank_dedupes_by_first_appearance():
    assert cluster_rank(["f1", "f2", "f3"], {"f1": "A", "f2": "A", "f3": "B"}) == ["A", "B"]
    assert cluster_rank(["x", "y"], {"x": 0, "y": 0}) == [0]


def test_cluster_rank_fixture():
    # 8 features over 3 clusters, derived by hand
    labels = {f"f{i}": c for i, c in enumerate([2, 0, 2, 1, 0, 1, 2, 0])}
    ranked = ["f3", "f0", "f5", "f1", "f2", "f7", "f4", "f6"]
    assert cluster_rank(ranked, labels) == [1, 2, 0]


def test_cluster_rank_unlabelled_feature():
    with pytest.raises(ValueError):
        cluster_rank(["a", "b"], {"a": 0})


def test_within_cluster_permutation_scores_one():
    labels = {"a": 0, "b": 0, "c": 1, "d": 1}
    S, T = ["a", "b", "c", "d"], ["b", "a", "d", "c"]
    assert rbo(S, T) < 1.0
    assert clustered_rbo(S, T, labels) == 1.0


def test_clustered_fixture_two_step():
    labels = {"a": 0, "b": 1, "c": 1, "d": 2, "e": 2}
    S, T = ["a", "b", "d", "c", "e"], ["d", "a", "e", "b", "c"]
    # cluster lists [0, 1, 2] and [2, 0, 1]
    assert clustered_rbo(S, T, labels) == pytest.approx(rbo_oracle([0, 1, 2], [2, 0, 1], 0.9), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_identity_labelling_equals_raw(seed, n):
    S, T = perm_pair(seed, n)
    ident = {f: f for f in range(n)}
    assert clustered_rbo(S, T, ident) == rbo(S, T)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30), st.integers(1, 6))
def test_cluster_rank_length_is_distinct_clusters(seed, n, k):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, size=n)
    S = rng.permutation(n).tolist()
    assert len(cluster_rank(S, labels)) == len(set(labels.tolist()))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30), st.integers(1, 6))
def test_label_renaming_invariance(seed, n, k):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, size=n)
    rename = rng.permutation(k)
    S, T = rng.permutation(n).tolist(), rng.permutation(n).tolist()
    assert clustered_rbo(S, T, labels) == clustered_rbo(S, T, rename[labels])


# -- matrices -----------------------------------------------------------------


def test_agreement_matrix_symmetric_unit_diagonal():
    rng = np.random.default_rng(0)
    toks = [f"t{i}" for i in range(12)]
    rankings = {m: [toks[j] for j in rng.permutation(12)] for m in "abcd"}
    labels = {t: i % 3 for i, t in enumerate(toks)}
    raw, cl = agreement_matrix(rankings, labels)
    for M in (raw, cl):
        assert np.array_equal(M.values, M.values.T)
        assert np.all(np.diag(M.values) == 1.0)
        assert np.all((M.values >= 0) & (M.values <= 1))
    assert raw.values[0, 1] == rbo(rankings["a"], rankings["b"])


def test_agreement_self_copy_is_one():
    raw, cl = agreement_matrix({"m": [1, 2, 3], "copy": [1, 2, 3]})
    assert raw.values[0, 1] == 1.0
    assert cl is None


def test_agreement_vocab_mismatch_names_tokens():
    with pytest.raises(ValueError, match="t9"):
        agreement_matrix({"a": ["t1", "t2"], "b": ["t1", "t9"]})


def test_agreement_needs_two_models():
    with pytest.raises(ValueError):
        agreement_matrix({"a": [1]})


def test_agreement_csv_layout():
    M = AgreementMatrix(("a", "b"), np.array([[1.0, 0.25], [0.25, 1.0]]))
    assert M.to_csv() == "model,a,b\na,1.000000,0.250000\nb,0.250000,1.000000\n"
    assert M.mean_offdiagonal() == 0.25


def test_cross_outcome_identical_rankings():
    r = {"m": ["a", "b", "c"]}
    res = cross_outcome_agreement(r, r, {"a": 0, "b": 1, "c": 2})
    assert res.scores == {"m": 1.0}


def test_cross_outcome_restricts_to_shared_vocab():
    sd = {"m": ["x", "a", "b", "c"]}
    acm = {"m": ["a", "y", "b", "c"]}
    res = cross_outcome_agreement(sd, acm, {t: i for i, t in enumerate("abcxy")})
    assert res.scores["m"] == 1.0
    assert res.shared == ("a", "b", "c")
    assert res.only_first == ("x",) and res.only_second == ("y",)


def test_cross_outcome_empty_intersection():
    with pytest.raises(ValueError):
        cross_outcome_agreement({"m": ["a"]}, {"m": ["b"]}, {"a": 0, "b": 1})


def test_top_k_table():
    rankings = {"m1": ["h_I50", "m_0202", "t_hb"], "m2": ["d_age", "hist_Stroke", "h_I50"]}
    rows = top_k_table(rankings, 1)
    assert [(r["model"], r["token"]) for r in rows] == [("m1", "h_I50"), ("m2", "d_age")]
    rows = top_k_table(rankings, 3)
    assert {r["family"] for r in rows} == {
        "Hospitalisation", "Prescription", "BloodTestMarker", "Demographic", "HistoryOfDisease"
    }
    assert [r["token"] for r in rows if r["model"] == "m2"] == rankings["m2"]
    with pytest.raises(ValueError):
        top_k_table(rankings, 0)
