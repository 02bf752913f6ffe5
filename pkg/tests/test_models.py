import numpy as np
import pytest

from cefedgnn import models as M
from cefedgnn.estimators import create_embedding_state
from cefedgnn.graphs import EdgeRecord, NodeRecord, build_graph
from cefedgnn.rng import sampling_stream, stream
from cefedgnn.sampling import sample_minibatch
from conftest import random_partitioned_graph


def finite_difference_grads(loss_fn, params, step=1e-5):
    """Central finite differences over every weight entry."""
    out = {}
    for name, w in params.tensors():
        g = np.zeros_like(w)
        for idx in np.ndindex(*w.shape):
            orig = w[idx]
            w[idx] = orig + step
            lp = loss_fn(params)
            w[idx] = orig - step
            lm = loss_fn(params)
            w[idx] = orig
            g[idx] = (lp - lm) / (2 * step)
        out[name] = g
    return out


def max_rel_err(analytic, numeric, floor=1e-4):
    err = 0.0
    for name, a in analytic:
        b = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        err = max(err, float(np.max(np.abs(a - b) / denom)))
    return err


def make_params(seed, d0=4, hidden=(5, 5), classes=2, arch=M.SAGE_MEAN,
                task="edge", **kw):
    return M.init_params(stream(seed, 1), d0, list(hidden), classes,
                         arch=arch, task=task, **kw)


def path_graph_one_client(d0=4, seed=0, labels=(0, 1, 0)):
    rng = stream(seed, 2)
    nodes = [NodeRecord(i, 0, rng.normal(size=d0), labels[i]) for i in range(3)]
    edges = [EdgeRecord(0, 0, 1), EdgeRecord(1, 1, 2)]
    return build_graph(nodes, edges, 1)


# -- forward -----------------------------------------------------------------


def test_zero_features_give_zero_embeddings_and_zero_gradients():
    nodes = [NodeRecord(i, 0, np.zeros(4), None) for i in range(4)]
    edges = [EdgeRecord(0, 0, 1, None, 0), EdgeRecord(1, 1, 2, None, 1),
             EdgeRecord(2, 2, 3, None, 0), EdgeRecord(3, 3, 0, None, 1)]
    g = build_graph(nodes, edges, 1)
    params = make_params(3)
    targets = [M.Target("edge", e, int(g.edge_labels[e])) for e in range(4)]
    trace = M.forward_exact(params, g.view(0), targets, graph=g)
    for stack in trace.stacks.values():
        for act in stack.acts:
            assert np.all(act == 0.0)
    grads = M.backward(trace, params)
    for name, w in grads.tensors():
        assert np.all(w == 0.0), name


def test_single_node_identity_weight_gives_tanh_of_features():
    x = np.array([0.3, -0.7, 0.1])
    g = build_graph([NodeRecord(0, 0, x, 1)], [], 1)
    params = M.ModelParams(layers=[np.eye(3)], task_head=np.zeros((2, 3)),
                           edge_head=None)
    trace = M.forward_exact(params, g.view(0), [M.Target("node", 0, 1)], graph=g)
    assert np.allclose(trace.stacks[0].acts[0][0], np.tanh(x), atol=0, rtol=0)


def test_three_node_path_matches_straight_line_recomputation():
    g = path_graph_one_client(seed=5)
    params = make_params(6, task="node")
    params = M.ModelParams(layers=params.layers, task_head=params.task_head,
                           edge_head=None)
    trace = M.forward_exact(params, g.view(0),
                            [M.Target("node", i, int(g.node_labels[i])) for i in range(3)],
                            graph=g)

    # independent straight-line recomputation of the mean-aggregate forward
    x = {i: g.features[g.index_of(i)] for i in range(3)}
    W1, W2 = params.layers
    nbrs = {0: [1], 1: [0, 2], 2: [1]}
    h1 = {}
    for v in range(3):
        agg = (x[v] + sum(x[u] for u in nbrs[v])) / (1 + len(nbrs[v]))
        h1[v] = np.tanh(W1 @ agg)
    h2 = {}
    for v in range(3):
        agg = (h1[v] + sum(h1[u] for u in nbrs[v])) / (1 + len(nbrs[v]))
        h2[v] = np.tanh(W2 @ agg)

    view = g.view(0)
    for v in range(3):
        r = view.row_of(v)
        assert np.allclose(trace.stacks[0].acts[0][r], h1[v], atol=1e-12)
        assert np.allclose(trace.stacks[0].acts[1][r], h2[v], atol=1e-12)


def test_permuting_edge_record_order_leaves_forward_bit_identical():
    rng = stream(7, 3)
    nodes = [NodeRecord(i, 0, rng.normal(size=4), None) for i in range(8)]
    edges = [EdgeRecord(e, int(rng.integers(8)), int((rng.integers(7) + 1 +
                                                      rng.integers(8)) % 8), None, 0)
             for e in range(15)]
    edges = [e for e in edges if e.src != e.dst]
    g1 = build_graph(nodes, edges, 1)
    g2 = build_graph(nodes, list(reversed(edges)), 1)
    params = make_params(8)
    t = [M.Target("edge", int(g1.edge_ids[0]), 0)]
    tr1 = M.forward_exact(params, g1.view(0), t, graph=g1)
    tr2 = M.forward_exact(params, g2.view(0), t, graph=g2)
    for l in range(2):
        assert np.array_equal(tr1.stacks[0].acts[l], tr2.stacks[0].acts[l])


def test_dimension_mismatch_names_layer():
    params = make_params(4)
    params.layers[1] = np.zeros((5, 7))
    with pytest.raises(M.ConfigurationError, match="layer 2"):
        params.validate(4, "edge")


def test_edge_head_required_for_edge_task():
    params = make_params(4, task="node")
    with pytest.raises(M.ConfigurationError, match="edge head"):
        params.validate(4, "edge")


# -- backward ----------------------------------------------------------------


@pytest.mark.parametrize("arch", [M.SAGE_MEAN, M.GCN, M.GIN])
@pytest.mark.parametrize("task", ["edge", "node"])
def test_gradients_match_finite_differences(arch, task):
    g = random_partitioned_graph(10, 18, 1, seed=13)
    params = make_params(17, arch=arch, task=task,
                         gin_eps=0.0 if arch != M.GIN else 0.0)
    view = g.view(0)
    if task == "edge":
        targets = [M.Target("edge", int(e), int(g.edge_labels[e]))
                   for e in view.edge_pool[:6]]
    else:
        targets = [M.Target("node", int(view.local_ids[r]), int(r % 2))
                   for r in range(6)]

    def loss_fn(p):
        return M.forward_exact(p, view, targets, graph=g).loss

    trace = M.forward_exact(params, view, targets, graph=g)
    grads = M.backward(trace, params)
    numeric = finite_difference_grads(loss_fn, params)
    assert max_rel_err(grads.tensors(), numeric) <= 1e-5


def test_node_task_leaves_edge_head_untouched():
    g = path_graph_one_client(seed=9)
    params = make_params(10, task="edge")  # edge head present but unused
    targets = [M.Target("node", i, int(g.node_labels[i])) for i in range(3)]
    trace = M.forward_exact(params, g.view(0), targets, graph=g)
    grads = M.backward(trace, params)
    assert np.all(grads.edge_head == 0.0)


def test_feature_gradient_matches_finite_differences():
    g = path_graph_one_client(seed=21)
    params = make_params(22, task="node")
    targets = [M.Target("node", i, int(g.node_labels[i])) for i in range(3)]
    trace = M.forward_exact(params, g.view(0), targets, graph=g)
    grads = M.backward(trace, params, feature_grad_node=(0, 1))
    assert grads.feature_grad is not None

    view = g.view(0)
    row = view.row_of(1)
    num = np.zeros(4)
    for j in range(4):
        orig = view.features[row, j]
        view.features[row, j] = orig + 1e-6
        lp = M.forward_exact(params, view, targets, graph=g).loss
        view.features[row, j] = orig - 1e-6
        lm = M.forward_exact(params, view, targets, graph=g).loss
        view.features[row, j] = orig
        num[j] = (lp - lm) / 2e-6
    assert np.allclose(grads.feature_grad, num, atol=1e-6)


def test_decomposition_single_cross_edge(two_client_cross_edge):
    g = two_client_cross_edge
    params = make_params(42)
    targets = {0: [M.Target("edge", 0, 1, 0.5)], 1: [M.Target("edge", 0, 1, 0.5)]}
    oracle = M.federated_objective(params, g, targets)
    h_top = {c: oracle.stacks[c].top()[0].copy() for c in (0, 1)}

    grads = []
    for c in (0, 1):
        st = create_embedding_state(g.view(c), [5, 5], 0.5, "tanh")
        mb = sample_minibatch(g, c, 1, (10, 10), sampling_stream(1, c, 0, 0))
        buf = {1 - c: (h_top[1 - c], 0)}
        tr = M.forward_stochastic(params, g, mb, st, buf)
        grads.append(M.backward(tr, params))

    for name, _ in params.tensors():
        mean = 0.5 * (dict(grads[0].tensors())[name] + dict(grads[1].tensors())[name])
        ref = dict(oracle.grads.tensors())[name]
        if name == "We":
            assert np.array_equal(mean, ref)
        else:
            assert np.max(np.abs(mean - ref)) <= 1e-10


# -- stochastic forward --------------------------------------------------------


def test_remote_zero_buffer_halves_edge_aggregate(two_client_cross_edge):
    g = two_client_cross_edge
    params = make_params(4)
    st = create_embedding_state(g.view(0), [5, 5], 1.0, "tanh")
    mb = sample_minibatch(g, 0, 1, (10, 10), sampling_stream(2, 0, 0, 0))
    tr = M.forward_stochastic(params, g, mb, st, {1: (np.zeros(5), 0)})
    t = tr.targets[0]
    local_top = st.h_act[-1][g.view(0).row_of(0)]
    assert np.array_equal(t.e_agg, 0.5 * local_top)
    assert tr.used_stale == [(1, 0)]


def test_missing_buffer_entry_flagged_cold(two_client_cross_edge):
    g = two_client_cross_edge
    params = make_params(4)
    st = create_embedding_state(g.view(0), [5, 5], 1.0, "tanh")
    mb = sample_minibatch(g, 0, 1, (10, 10), sampling_stream(2, 0, 0, 0))
    tr = M.forward_stochastic(params, g, mb, st, {})
    assert tr.used_cold == [1]
    assert np.array_equal(tr.targets[0].e_agg,
                          0.5 * st.h_act[-1][g.view(0).row_of(0)])


def full_batch_collapse_setup(seed):
    g = random_partitioned_graph(12, 30, 1, seed=seed)
    params = make_params(seed + 1)
    view = g.view(0)
    pool = view.edge_pool
    pool = pool[g.edge_labels[pool] >= 0]
    return g, params, view, pool


def test_gamma_one_full_neighborhoods_collapse_to_exact():
    g, params, view, pool = full_batch_collapse_setup(31)
    st = create_embedding_state(view, [5, 5], 1.0, "tanh")
    mb = sample_minibatch(g, 0, len(pool), (100, 100), sampling_stream(3, 0, 0, 0),
                          seed_pool=pool)
    tr_s = M.forward_stochastic(params, g, mb, st, {})
    targets = [M.Target("edge", int(e), int(g.edge_labels[e])) for e in mb.seed_edges]
    tr_e = M.forward_exact(params, view, targets, graph=g)

    rows = sorted(set(int(r) for plan in mb.plans for r in plan.nodes))
    for l in range(2):
        touched = sorted(set(int(r) for r in mb.plans[l].nodes))
        assert np.allclose(st.h_act[l][touched], tr_e.stacks[0].acts[l][touched],
                           atol=1e-12)
    assert tr_s.loss == pytest.approx(tr_e.loss, abs=1e-12)

    gs = M.backward(tr_s, params)
    ge = M.backward(tr_e, params)
    for name, w in gs.tensors():
        assert np.allclose(w, dict(ge.tensors())[name], atol=1e-12), name


def test_one_round_stale_buffer_exact_under_frozen_params(two_client_cross_edge):
    g = two_client_cross_edge
    params = make_params(8)
    exact = M.federated_objective(params, g, {0: [M.Target("edge", 0, 1, 0.5)],
                                              1: [M.Target("edge", 0, 1, 0.5)]},
                                  compute_grads=False)
    released = {}
    for c in (0, 1):
        st = create_embedding_state(g.view(c), [5, 5], 1.0, "tanh")
        mb = sample_minibatch(g, c, 1, (10, 10), sampling_stream(4, c, 0, 0))
        M.forward_stochastic(params, g, mb, st, {})
        released[int(g.view(c).local_ids[0])] = (st.h_act[-1][0].copy(), 0)

    # next round, params frozen: stale buffer equals fresh exact values
    st0 = create_embedding_state(g.view(0), [5, 5], 1.0, "tanh")
    mb0 = sample_minibatch(g, 0, 1, (10, 10), sampling_stream(4, 0, 1, 0))
    tr = M.forward_stochastic(params, g, mb0, st0, released)
    exact_eagg = 0.5 * (exact.stacks[0].top()[0] + exact.stacks[1].top()[0])
    assert np.linalg.norm(tr.targets[0].e_agg - exact_eagg) == 0.0


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    params = make_params(50, arch=M.GIN, gin_eps=0.3)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    M.save_params(params, p1)
    loaded = M.load_params(p1)
    M.save_params(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for (na, a), (nb, b) in zip(params.tensors(), loaded.tensors()):
        assert na == nb
        assert np.array_equal(a, b)
    assert loaded.arch == M.GIN and loaded.gin_eps == pytest.approx(0.3)
