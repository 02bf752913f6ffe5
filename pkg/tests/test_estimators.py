import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cefedgnn import models as M
from cefedgnn.estimators import (EstimatorError, create_embedding_state,
                                 create_gradient_ma, set_warm, tracking_error_probe,
                                 update_embedding, update_gradient)
from cefedgnn.graphs import EdgeRecord, NodeRecord, build_graph
from cefedgnn.rng import sampling_stream, stream
from cefedgnn.sampling import sample_minibatch
from conftest import random_partitioned_graph


def small_view(n=6, seed=0):
    g = random_partitioned_graph(n, 2 * n, 1, seed=seed)
    return g, g.view(0)


def test_gamma_one_overwrites():
    _, view = small_view()
    st_ = create_embedding_state(view, [3], 1.0, "tanh")
    m = np.array([0.4, -0.2, 0.9])
    update_embedding(st_, 0, 1, m)
    assert np.array_equal(st_.h_tilde[0][0], m)
    update_embedding(st_, 0, 1, 2 * m)
    assert np.array_equal(st_.h_tilde[0][0], 2 * m)


def test_half_gamma_mixes_toward_message():
    _, view = small_view()
    st_ = create_embedding_state(view, [2], 0.5, "tanh")
    set_warm(st_, 0, 1, np.zeros(2))
    update_embedding(st_, 0, 1, np.array([2.0, -2.0]))
    assert np.array_equal(st_.h_tilde[0][0], np.array([1.0, -1.0]))


def test_cold_first_touch_ignores_gamma():
    _, view = small_view()
    st_ = create_embedding_state(view, [2], 0.1, "tanh")
    update_embedding(st_, 0, 1, np.array([2.0, -2.0]))
    assert np.array_equal(st_.h_tilde[0][0], np.array([2.0, -2.0]))


def test_activation_invariant_maintained():
    _, view = small_view()
    st_ = create_embedding_state(view, [2], 0.5, "tanh")
    update_embedding(st_, 0, 1, np.array([0.7, -1.3]))
    assert np.array_equal(st_.h_act[0][0], np.tanh(st_.h_tilde[0][0]))


def test_untouched_rows_bit_identical():
    _, view = small_view()
    st_ = create_embedding_state(view, [3], 0.5, "tanh")
    for r in range(view.num_local):
        update_embedding(st_, r, 1, np.full(3, float(r)))
    before = st_.h_tilde[0].copy()
    update_embedding(st_, 2, 1, np.array([9.0, 9.0, 9.0]))
    mask = np.ones(view.num_local, dtype=bool)
    mask[2] = False
    assert np.array_equal(st_.h_tilde[0][mask], before[mask])


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=0.05, max_value=1.0),
       st.integers(min_value=0, max_value=5),
       st.integers(min_value=0, max_value=999))
def test_non_sampled_rows_never_change(gamma, row, seed):
    _, view = small_view()
    rng = stream(seed, 4)
    st_ = create_embedding_state(view, [2], gamma, "tanh")
    snapshots = st_.h_tilde[0].copy()
    others = [r for r in range(view.num_local) if r != row]
    update_embedding(st_, others, 1, rng.normal(size=(len(others), 2)))
    assert np.array_equal(st_.h_tilde[0][row], snapshots[row])


def test_gamma_out_of_range_rejected():
    _, view = small_view()
    with pytest.raises(EstimatorError, match="gamma"):
        create_embedding_state(view, [2], 0.0, "tanh")
    st_ = create_embedding_state(view, [2], 0.5, "tanh")
    with pytest.raises(EstimatorError, match="gamma"):
        update_embedding(st_, 0, 1, np.zeros(2), gamma=1.5)


def test_geometric_tracking_is_exact():
    # frozen params, full-neighborhood touches at layer 1: the gap to the
    # fixed point contracts by exactly (1 - gamma) per touch
    g, view = small_view(seed=3)
    params = M.init_params(stream(5, 1), 4, [3], 2, task="node")
    plan = M.full_plan(view, params.arch, params.gin_eps)
    msg = M.aggregate(plan, view.features) @ params.layers[0].T

    gamma = 0.25
    st_ = create_embedding_state(view, [3], gamma, "tanh")
    start = np.ones((view.num_local, 3))
    for r in range(view.num_local):
        set_warm(st_, r, 1, start[r])
    gap0 = np.linalg.norm(st_.h_tilde[0] - msg)
    for t in range(1, 12):
        update_embedding(st_, plan.nodes, 1, msg)
        gap = np.linalg.norm(st_.h_tilde[0] - msg)
        assert gap == pytest.approx((1 - gamma) ** t * gap0, rel=1e-12)


def test_error_vanishes_after_repeated_full_touches():
    # 200 full-neighborhood touches at gamma = 0.5 reach the exact
    # embeddings beyond float resolution
    g, view = small_view(seed=4)
    params = M.init_params(stream(6, 1), 4, [3, 3], 2, task="node")
    st_ = create_embedding_state(view, [3, 3], 0.5, "tanh")
    plan = M.full_plan(view, params.arch, params.gin_eps)
    for _ in range(200):
        for layer in (1, 2):
            prev = view.features if layer == 1 else st_.h_act[layer - 2]
            msg = M.aggregate(plan, prev) @ params.layers[layer - 1].T
            update_embedding(st_, plan.nodes, layer, msg)
    oracle = M.compute_stack(params, view)
    for li in range(2):
        err = float(np.max(np.sum((st_.h_act[li] - oracle.acts[li]) ** 2, axis=1)))
        assert err < 1e-30


def test_probe_zero_after_collapse_and_cold_equals_embedding_norm():
    g, view = small_view(seed=7)
    params = M.init_params(stream(8, 1), 4, [3, 3], 2, task="node")
    st_ = create_embedding_state(view, [3, 3], 1.0, "tanh")

    oracle = M.compute_stack(params, view)
    cold_err = tracking_error_probe(st_, params)
    for li in range(2):
        expected = float(np.mean(np.sum(oracle.acts[li] ** 2, axis=1)))
        assert cold_err[li] == pytest.approx(expected, rel=1e-12)

    plan = M.full_plan(view, params.arch, params.gin_eps)
    for layer in (1, 2):
        prev = view.features if layer == 1 else st_.h_act[layer - 2]
        update_embedding(st_, plan.nodes, layer,
                         M.aggregate(plan, prev) @ params.layers[layer - 1].T)
    assert tracking_error_probe(st_, params) == [0.0, 0.0]


def test_gradient_ma_formulas():
    params = M.init_params(stream(9, 1), 4, [3], 2, task="edge")
    ma = create_gradient_ma(params, 1.0)
    ghat = M.zeros_like_params(params)
    for _, w in ghat.tensors():
        w += 1.0
    update_gradient(ma, ghat)
    for _, w in ma.values.tensors():
        assert np.all(w == 1.0)

    ma = create_gradient_ma(params, 0.1)
    g0 = M.zeros_like_params(params)
    for _, w in g0.tensors():
        w += 2.0
    update_gradient(ma, g0, beta=1.0)  # install prior
    update_gradient(ma, ghat)          # 0.9 * 2 + 0.1 * 1
    for _, w in ma.values.tensors():
        assert np.allclose(w, 1.9)


def test_gradient_ma_shape_mismatch_names_tensor():
    params = M.init_params(stream(10, 1), 4, [3], 2, task="edge")
    ma = create_gradient_ma(params, 0.5)
    bad = M.zeros_like_params(params)
    bad.task_head = np.zeros((3, 7))
    with pytest.raises(EstimatorError, match="Whead"):
        update_gradient(ma, bad)


def test_beta_out_of_range_rejected():
    params = M.init_params(stream(11, 1), 4, [3], 2, task="edge")
    with pytest.raises(EstimatorError, match="beta"):
        create_gradient_ma(params, 0.0)


def test_smaller_beta_tracks_full_gradient_with_less_error():
    # fixed params, resampled minibatches: time-averaged ||G - grad F||^2
    # must be strictly smaller at beta = 0.1 than at beta = 1
    g = random_partitioned_graph(12, 25, 1, seed=15)
    params = M.init_params(stream(16, 1), 4, [4, 4], 2, task="edge")
    view = g.view(0)
    pool = view.edge_pool[g.edge_labels[view.edge_pool] >= 0]
    targets = {0: [M.Target("edge", int(e), int(g.edge_labels[e])) for e in pool]}
    full = M.federated_objective(params, g, targets).grads

    def run(beta, seed):
        st_ = create_embedding_state(view, [4, 4], 0.5, "tanh")
        ma = create_gradient_ma(params, beta)
        errs = []
        for k in range(1000):
            mb = sample_minibatch(g, 0, 3, (3, 3), sampling_stream(seed, 0, 0, k),
                                  seed_pool=pool)
            tr = M.forward_stochastic(params, g, mb, st_, {})
            update_gradient(ma, M.backward(tr, params))
            err = sum(float(np.sum((a - b) ** 2))
                      for (_, a), (_, b) in zip(ma.values.tensors(), full.tensors()))
            errs.append(err)
        return float(np.mean(errs))

    wins = 0
    for seed in range(10):
        if run(0.1, seed) < run(1.0, seed):
            wins += 1
    assert wins >= 9
