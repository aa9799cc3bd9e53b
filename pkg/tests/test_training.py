import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from oracles import components
from tgcn.data_io import Dataset, split_by_counts
from tgcn.errors import NumericError, ValidationError
from tgcn.graph_builders import knn_graph, synthetic_gaussian_dataset
from tgcn.graph_core import TensorGraph, sparse_from_edges
from tgcn.metrics import accuracy
from tgcn.model import ModelConfig, forward, forward_with_cache, init_params
from tgcn.training import (
    AdamState,
    TrainConfig,
    adam_step,
    cross_entropy,
    finite_diff_check,
    gradients,
    l1_reg,
    l2_reg,
    objective,
    objective_terms,
    smoothness_reg,
    tiny_gradcheck_problem,
    train,
)


def zero_params(cfg, N, I, F):
    p = init_params(cfg, N, I, F)
    return p.with_arrays({k: np.zeros_like(v) for k, v in p.arrays.items()})


def small_problem(seed=0, N=8, I=2, F=3, K=2):
    rng = np.random.default_rng(seed)
    slabs = []
    for _ in range(I):
        m = np.triu(rng.random((N, N)) < 0.4, 1)
        slabs.append(sp.csr_matrix((m | m.T).astype(float)))
    g = TensorGraph(tuple(slabs))
    X = rng.normal(size=(N, F))
    Y = np.eye(K)[rng.integers(0, K, N)]
    M = np.array([0, 2, 3, 5])
    return g, X, Y, M, rng


# -- config -----------------------------------------------------------------------

def test_train_config_validation():
    TrainConfig(max_epochs=10, patience=10)
    with pytest.raises(ValidationError):
        TrainConfig(max_epochs=10, patience=11)
    with pytest.raises(ValidationError):
        TrainConfig(mu1=-1.0)
    with pytest.raises(ValidationError):
        TrainConfig(adam_betas=(0.9, 1.0))
    with pytest.raises(ValidationError):
        TrainConfig(l1_mode="lasso")
    d = TrainConfig()
    assert (d.learning_rate, d.max_epochs, d.patience, d.adam_betas, d.adam_eps) == (0.005, 300, 60, (0.9, 0.999), 1e-8)


# -- objective terms --------------------------------------------------------------

def test_cross_entropy_examples():
    Y = np.eye(2)
    assert cross_entropy(np.eye(2), Y, [0, 1]) == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy(np.full((1, 2), 0.5), np.eye(2)[:1], [0]) == pytest.approx(math.log(2))
    Yh = np.full((3, 4), 0.25)
    Y4 = np.eye(4)[[0, 2, 3]]
    assert cross_entropy(Yh, Y4, [0, 1, 2]) == pytest.approx(3 * math.log(4))
    assert cross_entropy(Yh, Y4, [0, 1, 2]) == pytest.approx(4.1589, abs=1e-4)
    with pytest.raises(ValidationError):
        cross_entropy(Yh, Y4, [])


def test_cross_entropy_clamps_zero_probability():
    assert cross_entropy(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), [0]) == pytest.approx(-math.log(1e-12))


def test_smoothness_examples():
    g = TensorGraph((sparse_from_edges([(0, 1, 1.0)], 2, 2, symmetrize=True),))
    assert smoothness_reg(np.array([[0.3, 0.7], [0.3, 0.7]]), g) == 0.0
    assert smoothness_reg(np.array([[1.0, 0.0], [0.0, 1.0]]), g) == 2.0
    assert smoothness_reg(np.eye(3), TensorGraph((sp.csr_matrix((3, 3)),))) == 0.0


def test_smoothness_of_directed_slab_uses_symmetrized_weights():
    g = TensorGraph((sparse_from_edges([(0, 1, 2.0), (1, 2, 1.0)], 3, 3),))
    Y = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    # weights 1 on {0,1} and 0.5 on {1,2}: 1 * 2 + 0.5 * 0.5
    assert smoothness_reg(Y, g) == 2.25


def test_smoothness_uses_absolute_weights():
    g = TensorGraph((sparse_from_edges([(0, 1, -2.0)], 2, 2, symmetrize=True),))
    assert smoothness_reg(np.array([[1.0, 0.0], [0.0, 1.0]]), g) == 4.0


@given(st.integers(1, 7), st.integers(1, 3), st.integers(0, 2**31), st.booleans())
def test_smoothness_nonnegative_and_zero_iff_constant_on_components(N, K, seed, make_constant):
    rng = np.random.default_rng(seed)
    A = np.triu(rng.random((N, N)) < 0.35, 1)
    A = (A | A.T) * rng.uniform(0.5, 2.0, size=(N, N))
    A = np.triu(A, 1) + np.triu(A, 1).T
    g = TensorGraph((sp.csr_matrix(A),))
    comp = components(A)
    Y = rng.random((N, K))
    if make_constant:
        per = rng.random((max(comp) + 1, K))
        Y = per[comp]
    val = smoothness_reg(Y, g)
    assert val >= 0
    half_sum = 0.5 * sum(A[a, b] * np.sum((Y[a] - Y[b]) ** 2) for a in range(N) for b in range(N))
    assert val == pytest.approx(half_sum, rel=1e-12, abs=1e-12)
    constant = all(np.array_equal(Y[a], Y[b]) for a in range(N) for b in range(N) if comp[a] == comp[b])
    assert (val == 0.0) == constant


def test_l2_examples_and_bias_exclusion():
    cfg = ModelConfig(hops=1, widths=(2,))
    p = zero_params(cfg, 3, 1, 2)
    assert l2_reg(p) == 0.0
    w = p["layer0.z.W"].copy()
    w.flat[0] = 3.0
    assert l2_reg(p.replaced("layer0.z.W", w)) == 9.0
    w.flat[1] = -4.0
    q = p.replaced("layer0.z.W", w).replaced("head.b", np.array([7.0, 7.0]))
    assert l2_reg(q) == 25.0


def test_l1_examples():
    cfg = ModelConfig(hops=1, widths=(2,))
    p = zero_params(cfg, 3, 3, 2)
    assert l1_reg(p) == 0.0
    eye = np.eye(3)[:, :, None]
    assert l1_reg(p.replaced("layer0.z.R", eye).replaced("layer0.x.R", eye)) == 6.0
    r = np.zeros((3, 3, 1))
    r[0, 1, 0], r[2, 0, 0] = -1.0, 2.0
    assert l1_reg(p.replaced("layer0.z.R", r).replaced("head.w", np.full(3, -5.0))) == 3.0


def test_objective_examples():
    g, X, Y, M, rng = small_problem()
    cfg = ModelConfig(hops=2, widths=(3, 2))
    p = init_params(cfg, 8, 2, 3, seed=1)
    Yh = forward(X, g, p)
    assert objective(X, g, Y, M, p, TrainConfig(mu1=0, mu2=0, lam=0)) == cross_entropy(Yh, Y, M)
    z = zero_params(cfg, 8, 2, 3)
    assert objective(X, g, Y, M, z, TrainConfig(mu1=0.3, mu2=0.2, lam=0.1)) == pytest.approx(4 * math.log(2), abs=1e-15)


@given(st.integers(0, 2**31), st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
def test_objective_is_sum_of_terms(seed, mu1, mu2, lam):
    g, X, Y, M, rng = small_problem(seed % 1000)
    cfg = ModelConfig(hops=2, widths=(3, 2), share_R_across_nodes=False)
    p = init_params(cfg, 8, 2, 3, seed)
    p = p.with_arrays({k: rng.normal(size=v.shape) for k, v in p.arrays.items()})
    tc = TrainConfig(mu1=mu1, mu2=mu2, lam=lam)
    Yh = forward(X, g, p)
    terms = cross_entropy(Yh, Y, M) + mu1 * smoothness_reg(Yh, g) + mu2 * l2_reg(p) + lam * l1_reg(p)
    assert objective(X, g, Y, M, p, tc) == pytest.approx(terms, rel=1e-12, abs=1e-12)
    t = objective_terms(X, g, Y, M, p, tc)
    assert set(t) == {"cross_entropy", "smoothness", "l2", "l1"}


# -- gradients --------------------------------------------------------------------

def test_l2_gradient_vanishes_at_zero():
    g, X, Y, M, _ = small_problem()
    cfg = ModelConfig(hops=1, widths=(2,))
    z = zero_params(cfg, 8, 2, 3)
    Y0 = np.zeros_like(Y)  # labeled rows carry no class: the data term is identically zero
    grads = gradients(X, g, Y0, M, z, TrainConfig(mu1=0, mu2=1.0, lam=0))
    assert all(np.all(v == 0) for v in grads.values())


def test_head_gradient_matches_softmax_formula():
    g, X, Y, M, rng = small_problem(3)
    cfg = ModelConfig(hops=2, widths=(3, 2))
    p = init_params(cfg, 8, 2, 3, 2)
    p = p.with_arrays({k: rng.normal(size=v.shape) for k, v in p.arrays.items()})
    cache = forward_with_cache(X, g, p)
    grads = gradients(X, g, Y, M, p, TrainConfig(mu1=0, mu2=0, lam=0))
    resid = cache.Y_hat[M] - Y[M]
    # d CE / d w_i = sum_n sum_k (y_hat - y)_{nk} Z_L[n, i, k]
    expect_w = np.array([np.sum(resid * cache.ZL[M, i, :]) for i in range(2)])
    np.testing.assert_allclose(grads["head.w"], expect_w, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(grads["head.b"], resid.sum(axis=0), rtol=1e-12, atol=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_gradient_names_parameter():
    g, X, Y, M, _ = small_problem()
    cfg = ModelConfig(hops=1, widths=(2,))
    p = zero_params(cfg, 8, 2, 3)
    p = p.replaced("layer0.z.W", np.full(p["layer0.z.W"].shape, 1e308))
    with pytest.raises(NumericError, match="layer0.z.W"):
        gradients(np.zeros_like(X), g, Y, M, p, TrainConfig(mu1=0, mu2=1.0, lam=0))


@pytest.mark.parametrize("per_node", [False, True])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(per_node, seed):
    X, g, Y, M, params, cfg = tiny_gradcheck_problem(seed, per_node)
    res = finite_diff_check(X, g, Y, M, params, cfg)
    assert res.max_rel_error < 1e-4, res.worst
    assert res.n_checked + res.n_excluded == params.size()


def test_subgradient_mode_matches_finite_differences_without_residual():
    import dataclasses

    X, g, Y, M, params, cfg = tiny_gradcheck_problem(4, False)
    mcfg = dataclasses.replace(params.cfg, residual=False, output_activation=False)
    p = init_params(mcfg, 12, 3, 3)
    rng = np.random.default_rng(4)
    p = p.with_arrays({k: rng.normal(scale=0.5, size=v.shape) for k, v in p.arrays.items()})
    assert finite_diff_check(X, g, Y, M, p, cfg).max_rel_error < 1e-4


def test_finite_differences_exact_for_quadratic():
    g, X, Y, M, rng = small_problem(5)
    cfg = ModelConfig(hops=2, widths=(3, 2))
    p = init_params(cfg, 8, 2, 3)
    # entries bounded away from zero; the stencil has no truncation error on a
    # quadratic, so a wide step only shrinks the roundoff in the quotient
    p = p.with_arrays({k: rng.choice([-1, 1], v.shape) * rng.uniform(0.5, 1.5, v.shape)
                       for k, v in p.arrays.items()})
    res = finite_diff_check(X, g, np.zeros_like(Y), M, p, TrainConfig(mu1=0, mu2=1.0, lam=0), eps=1e-2)
    assert res.max_rel_error < 1e-9
    assert res.n_checked > 0


def test_finite_difference_step_must_be_positive():
    X, g, Y, M, params, cfg = tiny_gradcheck_problem(0, False)
    with pytest.raises(ValidationError):
        finite_diff_check(X, g, Y, M, params, cfg, eps=0.0)


def test_kinks_are_excluded_and_reported():
    X, g, Y, M, params, cfg = tiny_gradcheck_problem(0, False)
    r = params["layer0.z.R"].copy()
    r[0, 1, 0] = 2e-6  # within eps of the l1 kink
    res = finite_diff_check(X, g, Y, M, params.replaced("layer0.z.R", r), cfg)
    assert "layer0.z.R[0,1,0]" in res.excluded
    assert res.max_rel_error < 1e-4


# -- ADAM -------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    a = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(a, {"w": np.zeros(2)}, AdamState(), TrainConfig())
    np.testing.assert_array_equal(new["w"], a["w"])
    assert state.step == 1


def test_adam_first_step_size():
    cfg = TrainConfig(learning_rate=0.01)
    g = np.array([0.5, -3.0, 1e-9])
    new, _ = adam_step({"w": np.zeros(3)}, {"w": g}, AdamState(), cfg)
    expected = -cfg.learning_rate * g / (np.abs(g) + cfg.adam_eps)
    np.testing.assert_allclose(new["w"], expected, rtol=1e-12)


def test_adam_constant_gradient_decreases_monotonically():
    cfg = TrainConfig()
    a, state = {"w": np.array([0.0])}, AdamState()
    values = [0.0]
    for _ in range(100):
        a, state = adam_step(a, {"w": np.array([1.0])}, state, cfg)
        values.append(float(a["w"][0]))
    assert all(y < x for x, y in zip(values, values[1:]))


def test_proximal_step_zeroes_weights_without_support():
    cfg = TrainConfig(lam=0.1)
    a = {"r": np.array([0.0, 0.3])}
    new, _ = adam_step(a, {"r": np.array([0.0, 0.05])}, AdamState(), cfg, prox_keys={"r"})
    assert new["r"][0] == 0.0
    # gradient 0.05 < lam: the threshold lr*lam/|g| exceeds the step lr, so the weight shrinks
    assert 0.0 < new["r"][1] < 0.3 - cfg.learning_rate


# -- training loop ----------------------------------------------------------------

def synthetic(seed, n=200, f=6):
    ds = synthetic_gaussian_dataset(n, f, seed)
    ds = split_by_counts(ds, n // 5, n // 5, n - 2 * (n // 5), seed)
    g = TensorGraph((knn_graph(ds.X, 5), knn_graph(ds.X, 10)))
    return ds, g


def test_patience_equal_to_max_epochs_runs_every_epoch():
    ds, g = synthetic(0)
    _, hist = train(ds, g, ModelConfig(hops=2, widths=(8, 2)), TrainConfig(max_epochs=25, patience=25))
    assert len(hist) == 25 and hist.stop_reason == "max_epochs"


def test_early_stopping_and_best_epoch():
    ds, g = synthetic(1)
    _, hist = train(ds, g, ModelConfig(hops=2, widths=(8, 2)), TrainConfig(max_epochs=400, patience=5, learning_rate=0.05))
    assert hist.stop_reason == "patience"
    assert len(hist) == hist.best_epoch + 6
    best = hist.val_loss[hist.best_epoch]
    assert all(v >= best for v in hist.val_loss)
    assert hist.train_loss[hist.best_epoch] <= hist.train_loss[0]


def test_training_is_bitwise_reproducible():
    ds, g = synthetic(2)
    mc, tc = ModelConfig(hops=2, widths=(8, 2), dropout_rate=0.3), TrainConfig(max_epochs=30, patience=30, seed=4)
    p1, h1 = train(ds, g, mc, tc)
    p2, h2 = train(ds, g, mc, tc)
    assert h1.to_csv() == h2.to_csv()
    assert all(np.array_equal(p1[k], p2[k]) for k in p1.arrays)


def test_history_csv_header():
    ds, g = synthetic(0)
    _, hist = train(ds, g, ModelConfig(hops=1, widths=(2,)), TrainConfig(max_epochs=3, patience=3))
    lines = hist.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_acc" and len(lines) == 4


def test_divergence_reports_epoch():
    ds, g = synthetic(0)
    with pytest.raises(NumericError, match="epoch"):
        train(ds, g, ModelConfig(hops=2, widths=(8, 8, 2)), TrainConfig(learning_rate=1e200, max_epochs=10, patience=10))


def test_train_rejects_mismatched_class_count():
    ds, g = synthetic(0)
    with pytest.raises(ValidationError):
        train(ds, g, ModelConfig(widths=(4, 3)), TrainConfig())


def test_train_without_validation_monitors_training_objective():
    ds, g = synthetic(3)
    ds = Dataset(ds.X, ds.labels, 2, ds.train, np.zeros(ds.n_nodes, bool), ds.test)
    _, hist = train(ds, g, ModelConfig(hops=1, widths=(4, 2)), TrainConfig(max_epochs=20, patience=20))
    assert hist.val_loss == hist.train_loss


def test_clean_synthetic_reaches_high_validation_accuracy():
    ds = split_by_counts(synthetic_gaussian_dataset(1000, 10, 0), 200, 200, 600, 0)
    g = TensorGraph((knn_graph(ds.X, 5), knn_graph(ds.X, 10)))
    params, hist = train(ds, g, ModelConfig(hops=2, widths=(64, 8, 2)), TrainConfig(seed=0))
    Yh = forward(ds.X, g, params)
    assert accuracy(Yh, ds.labels, ds.val) >= 0.95
