import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehr_consensus.core import Family
from ehr_consensus.encode import encode_cohort
from ehr_consensus.models import (
    ABLATION_SUBSETS,
    ConstantPredictor,
    DenoisingEncoder,
    Predictor,
    TrainSpec,
    UndefinedMetricError,
    ablation_run,
    auc_score,
    compute_metrics,
    corrupt_mask,
    kfold_evaluate,
    pretrain_denoising_autoencoder,
    stratified_folds,
    train_deep_patient,
    train_logistic,
    train_recurrent,
)
from ehr_consensus.models.nn import GRU, Dense, Dropout, LastStep, Network, Tanh, mse, sigmoid_bce, softmax_xent
from ehr_consensus.synth import SynthConfig, generate_cohort
from oracles import auc_oracle

SMALL = dict(n_hospitalisation=20, n_prescription=20, n_blood_test=10, n_history=4, n_demographic=2,
             n_latent_groups=5, sparsity_target=0.9, events_per_activation=3)


def _encoded(**kw):
    cohort, truth = generate_cohort(SynthConfig(**{**SMALL, **kw}))
    return encode_cohort(cohort, cohort.outcome_kinds[0]), truth


# -- gradients ----------------------------------------------------------------


def _grad_check(net, x, loss_fn, target, n_checks=10, seed=0, h=1e-6):
    """Largest relative error between backprop and central differences."""
    net.zero_grad()
    loss, d = loss_fn(net.forward(x), target)
    net.backward(d)
    rng = np.random.default_rng(seed)
    params = net.named_params()
    worst = 0.0
    for _ in range(n_checks):
        _, p, g = params[rng.integers(len(params))]
        idx = tuple(rng.integers(s) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        up = loss_fn(net.forward(x), target)[0]
        p[idx] = old - h
        down = loss_fn(net.forward(x), target)[0]
        p[idx] = old
        num = (up - down) / (2 * h)
        worst = max(worst, abs(num - g[idx]) / max(abs(num) + abs(g[idx]), 1e-10))
    return worst


def _labels(rng, n):
    y = rng.integers(0, 2, n)
    return y, rng.uniform(0.5, 2.0, n)


def test_gradient_logistic():
    rng = np.random.default_rng(0)
    net = Network([Dense(5, 1, rng)])
    y, w = _labels(rng, 12)
    assert _grad_check(net, rng.normal(size=(12, 5)), lambda o, t: sigmoid_bce(o, *t), (y, w)) < 1e-4


def test_gradient_dense_stack():
    rng = np.random.default_rng(1)
    net = Network([Dense(6, 8, rng), Tanh(), Dense(8, 2, rng)])
    y, w = _labels(rng, 10)
    assert _grad_check(net, rng.normal(size=(10, 6)), lambda o, t: softmax_xent(o, *t), (y, w)) < 1e-4


def test_gradient_recurrent():
    rng = np.random.default_rng(2)
    net = Network([GRU(4, 6, rng), Dropout(0.0), GRU(6, 3, rng), LastStep(), Dense(3, 2, rng)])
    y, w = _labels(rng, 5)
    x = rng.normal(size=(5, 7, 4))
    for seed in range(3):
        assert _grad_check(net, x, lambda o, t: softmax_xent(o, *t), (y, w), seed=seed) < 1e-4


def test_gradient_autoencoder():
    rng = np.random.default_rng(3)
    enc = DenoisingEncoder(7, (5, 4, 3), rng)
    x = rng.normal(size=(9, 7))
    assert _grad_check(enc.full, x, mse, x, n_checks=20) < 1e-4


# -- logistic -----------------------------------------------------------------


def test_logistic_separable_auc_one():
    x = np.r_[np.linspace(-3, -1, 20), np.linspace(1, 3, 20)][:, None]
    y = (x[:, 0] > 0).astype(int)
    m = train_logistic(x, y, TrainSpec(epochs=20, batch_size=8, learning_rate=0.05))
    assert auc_score(m.predict_proba(x), y) == 1.0


def test_zero_epochs_is_null_predictor():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 5))
    y = np.r_[np.zeros(200, int), np.ones(200, int)]
    m = train_logistic(X, y, TrainSpec(epochs=0))
    assert np.all(m.predict_proba(X) == 0.5)
    assert auc_score(m.predict_proba(X), y) == 0.5


def test_logistic_matches_gradient_descent_oracle():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(300, 2))
    y = (rng.random(300) < 1 / (1 + np.exp(-(1.5 * X[:, 0] - 0.8 * X[:, 1] + 0.3)))).astype(int)
    m = train_logistic(X, y, TrainSpec(epochs=3000, batch_size=300, learning_rate=0.01))
    # oracle: plain full-batch gradient descent on the same standardized, class-weighted loss
    Z = (X - X.mean(0)) / X.std(0)
    counts = np.bincount(y)
    w = len(y) / (2.0 * counts[y])
    beta = np.zeros(3)
    A = np.c_[Z, np.ones(len(y))]
    for _ in range(20000):
        p = 1 / (1 + np.exp(-A @ beta))
        beta -= 0.5 * A.T @ ((p - y) * w) / len(y)
    got = np.r_[m.net.layers[0].params["W"][:, 0], m.net.layers[0].params["b"]]
    assert np.allclose(got, beta, rtol=0.05, atol=0)


def test_non_finite_input_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        train_logistic(np.array([[np.nan], [1.0]]), np.array([0, 1]))


# -- recurrent ----------------------------------------------------------------


@pytest.fixture(scope="module")
def planted():
    return _encoded(n_subjects=1500, risk_weights=[5.0] * 5, seed=0)[0]


def test_recurrent_learns_planted_signal(planted):
    e = planted
    tr = np.arange(len(e.y)) < 1000
    m = train_recurrent(e.sequence[tr], e.y[tr], TrainSpec(epochs=10, batch_size=64, learning_rate=0.003))
    assert auc_score(m.predict_proba(e.sequence[~tr]), e.y[~tr]) >= 0.9


def test_recurrent_on_shuffled_labels_is_null():
    rng = np.random.default_rng(0)
    X = rng.poisson(0.3, size=(5000, 7, 6)).astype(float)
    y = rng.integers(0, 2, 5000)
    m = train_recurrent(X[:1000], y[:1000], TrainSpec(epochs=3, batch_size=64))
    assert abs(auc_score(m.predict_proba(X[1000:]), y[1000:]) - 0.5) <= 0.03


def test_recurrent_rejects_empty_sequence_and_bow_runs():
    with pytest.raises(ValueError):
        train_recurrent(np.zeros((4, 0, 3)), np.array([0, 1, 0, 1]))
    X = np.random.default_rng(0).poisson(1.0, size=(20, 5)).astype(float)
    m = train_recurrent(X, np.arange(20) % 2, TrainSpec(epochs=1, units=(4,), dropout=(0.1,)))
    assert m.kind == "bow" and m.predict_proba(X).shape == (20,)


# -- denoising autoencoder ----------------------------------------------------


def test_corrupt_mask_rates():
    X = np.arange(1.0, 13.0).reshape(3, 4)
    assert np.array_equal(corrupt_mask(X, 0.0, seed=1), X)
    assert not corrupt_mask(X, 1.0, seed=1).any()
    big = np.ones((1000, 1000))
    frac = 1.0 - corrupt_mask(big, 0.05, seed=7).mean()
    assert abs(frac - 0.05) <= 0.001
    assert np.array_equal(corrupt_mask(X, 0.5, seed=3), corrupt_mask(X, 0.5, seed=3))
    with pytest.raises(ValueError):
        corrupt_mask(X, 1.5)


@pytest.fixture(scope="module")
def rank_one_encoder():
    rng = np.random.default_rng(0)
    X = np.outer(rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 6))
    spec = TrainSpec(learning_rate=0.003, batch_size=32, dae_epochs=300)
    return X, pretrain_denoising_autoencoder(X, widths=(8, 8, 8), rate=0.0, spec=spec)


def test_autoencoder_reconstructs_rank_one(rank_one_encoder):
    X, enc = rank_one_encoder
    assert np.mean((enc.reconstruct(X) - X) ** 2) < 1e-3
    assert enc.transform(X).shape == (200, 8)


def test_autoencoder_loss_non_increasing(rank_one_encoder):
    X, _ = rank_one_encoder
    # full batches remove minibatch noise from the epoch losses
    spec = TrainSpec(learning_rate=0.001, batch_size=len(X), dae_epochs=200)
    enc = pretrain_denoising_autoencoder(X, widths=(8, 8, 8), rate=0.0, spec=spec)
    h = np.array(enc.history)
    assert np.mean(np.maximum(np.diff(h), 0)) <= 1e-6


def test_deep_patient_close_to_raw_input(planted):
    e = planted
    tr = np.arange(len(e.y)) < 1000
    spec = TrainSpec(epochs=30, batch_size=64, learning_rate=0.01, dae_widths=(32, 32, 32), dae_epochs=20)
    raw = train_logistic(e.matrix[tr], e.y[tr], spec)
    deep = train_deep_patient(e.matrix[tr], e.y[tr], spec)
    a_raw = auc_score(raw.predict_proba(e.matrix[~tr]), e.y[~tr])
    a_deep = auc_score(deep.predict_proba(e.matrix[~tr]), e.y[~tr])
    assert abs(a_raw - a_deep) <= 0.05


def test_deep_patient_tensor_variant_runs():
    X = np.random.default_rng(0).poisson(0.5, size=(30, 7, 4)).astype(float)
    spec = TrainSpec(epochs=1, units=(3,), dropout=(0.0,), dae_widths=(5,), dae_epochs=1)
    m = train_deep_patient(X, np.arange(30) % 2, spec)
    assert m.kind == "tensor" and np.all((m.predict_proba(X) > 0) & (m.predict_proba(X) < 1))


# -- metrics ------------------------------------------------------------------


def test_metrics_examples():
    assert tuple(compute_metrics([0.9, 0.1], [1, 0])) == (1.0, 1.0, 1.0, 1.0)
    assert compute_metrics([0.5] * 4, [0, 1, 0, 1]).auc == 0.5
    with pytest.raises(UndefinedMetricError) as info:
        compute_metrics([0.7, 0.2], [1, 1])
    assert info.value.partial.sensitivity == 0.5 and np.isnan(info.value.partial.auc)
    with pytest.raises(ValueError):
        compute_metrics([1.2], [1])


def test_auc_matches_concordance_oracle():
    rng = np.random.default_rng(0)
    s = np.round(rng.random(200), 2)  # rounding forces ties
    y = rng.integers(0, 2, 200)
    assert abs(auc_score(s, y) - auc_oracle(s, y)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 20, 40).astype(float)
    y = np.r_[0, 1, rng.integers(0, 2, 38)]
    assert auc_score(s, y) == auc_score(s ** 3 + 2 * s, y)


# -- k-fold -------------------------------------------------------------------


def test_kfold_constant_predictor():
    y = np.r_[np.zeros(30, int), np.ones(20, int)]
    rep = kfold_evaluate(lambda X, y, s: ConstantPredictor(0.5), np.zeros((50, 2)), y, k=5)
    assert rep.mean["auc"] == 0.5 and rep.std["auc"] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_folds_partition_subjects(seed, k):
    rng = np.random.default_rng(seed)
    y = np.r_[np.zeros(k, int), np.ones(k, int), rng.integers(0, 2, 40)]
    folds = stratified_folds(y, k, seed)
    joined = np.concatenate(folds)
    assert sorted(joined.tolist()) == list(range(len(y)))
    for f in folds:
        assert 0 < y[f].sum() < len(f)


def test_kfold_threaded_matches_reference(planted):
    e = planted
    spec = TrainSpec(epochs=3, batch_size=64, learning_rate=0.01)
    trainer = lambda X, y, s: train_logistic(X, y, spec.replace(seed=s))  # noqa: E731
    ref = kfold_evaluate(trainer, e.matrix, e.y, k=4, seed=3)
    again = kfold_evaluate(trainer, e.matrix, e.y, k=4, seed=3)
    threaded = kfold_evaluate(trainer, e.matrix, e.y, k=4, seed=3, n_jobs=4)
    assert ref.folds == again.folds == threaded.folds


def test_kfold_uses_threads_when_asked():
    seen = set()

    def trainer(X, y, s):
        seen.add(threading.get_ident())
        return ConstantPredictor(0.5)

    kfold_evaluate(trainer, np.zeros((40, 1)), np.arange(40) % 2, k=4, n_jobs=4)
    assert threading.get_ident() not in seen


def test_kfold_small_class_named():
    y = np.r_[np.zeros(20, int), np.ones(3, int)]
    with pytest.raises(ValueError, match="Event"):
        kfold_evaluate(lambda X, y, s: ConstantPredictor(0.5), np.zeros((23, 1)), y, k=5)


# -- ablation -----------------------------------------------------------------


def test_ablation_subsets_are_the_ten_listed():
    names = [n for n, _ in ABLATION_SUBSETS]
    assert len(names) == 10 and names[0] == "Demographics" and names[-1] == "All features"
    assert dict(ABLATION_SUBSETS)["All features"] == frozenset(Family)


def test_ablation_prescription_signal():
    e, truth = _encoded(n_subjects=3000, signal_families=["Prescription"], n_signal_groups=1,
                        signal_strength=5.0, seed=0)
    assert [f for f, w in zip(truth.group_families, truth.risk_weights) if w] == ["Prescription"]
    spec = TrainSpec(epochs=10, batch_size=64, learning_rate=0.01)
    reports = ablation_run(e.matrix, e.y, e.vocab.families,
                           lambda X, y, s: train_logistic(X, y, spec.replace(seed=s)), k=5)
    auc = {r.name: r.mean["auc"] for r in reports}
    assert len(reports) == 10
    assert auc["Prescriptions"] > auc["Demographics"]
    assert auc["All features"] >= max(auc.values()) - 0.02


def test_ablation_empty_subset_rejected():
    X = np.zeros((20, 2))
    fams = [Family.HOSPITALISATION, Family.PRESCRIPTION]
    with pytest.raises(ValueError, match="Demographics"):
        ablation_run(X, np.arange(20) % 2, fams, lambda X, y, s: ConstantPredictor(0.5), k=2)


# -- persistence --------------------------------------------------------------


@pytest.mark.parametrize("kind", ["logistic", "tensor", "bow", "deep"])
def test_save_load_round_trip(tmp_path, kind):
    rng = np.random.default_rng(0)
    y = np.arange(24) % 2
    spec = TrainSpec(epochs=1, units=(4, 3), dropout=(0.1, 0.2), dae_widths=(5, 4), dae_epochs=1)
    if kind == "logistic":
        X = rng.normal(size=(24, 5))
        m = train_logistic(X, y, spec, tokens=list("abcde"))
    elif kind == "tensor":
        X = rng.poisson(0.5, size=(24, 7, 5)).astype(float)
        m = train_recurrent(X, y, spec)
    elif kind == "bow":
        X = rng.poisson(0.5, size=(24, 5)).astype(float)
        m = train_recurrent(X, y, spec)
    else:
        X = rng.normal(size=(24, 5))
        m = train_deep_patient(X, y, spec)
    m.save(tmp_path / "m.npz")
    back = Predictor.load(tmp_path / "m.npz")
    assert np.array_equal(back.predict_proba(X), m.predict_proba(X))
    assert back.kind == m.kind and back.tokens == m.tokens
