import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cefedgnn import models as M
from cefedgnn.graphs import EdgeRecord, NodeRecord, build_graph
from cefedgnn.privacy import (AttackResult, NoiseConfig, aia_attack, clip_and_noise,
                              knn_distances, mdp_epsilon, nearest_rank_percentile,
                              privacy_report, rho_percentiles)
from cefedgnn.rng import stream

# frozen from a 2e6-point dense-grid evaluation of the accountant objective
GOLDEN_EPS_RHO1_S1_R1_D1E5 = 4.728386984949264


def dense_grid_epsilon(rho, sigma0, rprime, delta, n=1_000_000):
    """Independent dense-grid oracle for the composed Gaussian accountant."""
    alphas = 1.0 + np.logspace(-7, 6.0, n)
    vals = (rprime * alphas * rho * rho / (2.0 * sigma0 * sigma0)
            + np.log((alphas - 1.0) / alphas)
            - np.log(delta * alphas) / (alphas - 1.0))
    return max(float(vals.min()), 0.0)


# -- clip_and_noise ------------------------------------------------------------


def test_clip_noop_inside_ball():
    x = np.array([0.3, 0.4])
    out = clip_and_noise(x, 2.0, 0.0, stream(0, 0))
    assert np.array_equal(out, x)


def test_clip_rescales_to_radius():
    out = clip_and_noise(np.array([3.0, 4.0]), 2.5, 0.0, stream(0, 0))
    assert np.allclose(out, [1.5, 2.0], atol=1e-15)


def test_noise_variance_close_to_sigma_squared():
    rng = stream(7, 1)
    samples = np.vstack([clip_and_noise(np.zeros(4), 1.0, 1.0, rng)
                         for _ in range(25_000)])
    var = samples.var(axis=0).mean()
    assert abs(var - 1.0) < 0.03


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=8),
       st.floats(min_value=0.01, max_value=10))
def test_clipped_norm_never_exceeds_radius(vec, clip):
    out = clip_and_noise(np.array(vec), clip, 0.0, stream(1, 2))
    assert np.linalg.norm(out) <= clip * (1 + 1e-12)


# -- accountant ----------------------------------------------------------------


def test_huge_sigma_gives_tiny_epsilon():
    assert mdp_epsilon(1.0, 1e6, 1, 1e-4) < 0.01


def test_rho_zero_gives_tiny_epsilon():
    assert mdp_epsilon(0.0, 1.0, 1, 1e-4) < 0.01


def test_sigma_zero_signals_infinite_epsilon():
    assert mdp_epsilon(1.0, 0.0, 1, 1e-4) == float("inf")


def test_golden_value():
    assert mdp_epsilon(1.0, 1.0, 1, 1e-5) == pytest.approx(
        GOLDEN_EPS_RHO1_S1_R1_D1E5, rel=1e-3)


def test_matches_dense_grid_oracle_within_point_one_percent():
    rng = stream(11, 0)
    for _ in range(25):
        rho = float(rng.uniform(0.02, 3.0))
        s0 = float(rng.uniform(0.2, 5.0))
        rp = int(rng.integers(1, 50))
        delta = float(10.0 ** rng.uniform(-6, -2))
        mine = mdp_epsilon(rho, s0, rp, delta)
        oracle = dense_grid_epsilon(rho, s0, rp, delta)
        if oracle > 1e-6:
            assert abs(mine - oracle) / oracle < 1e-3
        else:
            assert mine < 0.01


def test_monotone_in_all_arguments():
    rng = stream(12, 0)
    for _ in range(100):
        rho = float(rng.uniform(0.05, 2.0))
        s0 = float(rng.uniform(0.3, 4.0))
        rp = int(rng.integers(1, 40))
        delta = float(10.0 ** rng.uniform(-6, -2))
        base = mdp_epsilon(rho, s0, rp, delta)
        assert mdp_epsilon(rho * 1.5, s0, rp, delta) >= base - 1e-12
        assert mdp_epsilon(rho, s0, rp + 5, delta) >= base - 1e-12
        assert mdp_epsilon(rho, s0 * 1.5, rp, delta) <= base + 1e-12


def test_scale_invariance_in_rho_over_sigma():
    rng = stream(13, 0)
    for _ in range(50):
        rho = float(rng.uniform(0.05, 2.0))
        s0 = float(rng.uniform(0.3, 4.0))
        c = float(rng.uniform(0.1, 10.0))
        rp = int(rng.integers(1, 30))
        a = mdp_epsilon(rho, s0, rp, 1e-4)
        b = mdp_epsilon(rho * c, s0 * c, rp, 1e-4)
        assert a == pytest.approx(b, rel=1e-6, abs=1e-9)


def test_invalid_arguments_rejected():
    with pytest.raises(ValueError):
        mdp_epsilon(-1.0, 1.0, 1, 1e-4)
    with pytest.raises(ValueError):
        mdp_epsilon(1.0, 1.0, 0, 1e-4)
    with pytest.raises(ValueError):
        mdp_epsilon(1.0, 1.0, 1, 1.5)


# -- rho percentiles -----------------------------------------------------------


def test_identical_embeddings_give_zero_rho():
    emb = np.tile(np.array([1.0, 2.0, 2.0]), (10, 1))
    assert rho_percentiles(emb, 3, (50, 90, 100)) == [0.0, 0.0, 0.0]


def test_four_axis_points_k1():
    emb = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    d = knn_distances(emb, 1)
    assert np.allclose(d, np.sqrt(2.0))
    assert rho_percentiles(emb, 1, (50,))[0] == pytest.approx(np.sqrt(2.0))


def test_matches_second_brute_force_implementation_exactly():
    rng = stream(14, 0)
    emb = rng.normal(size=(1000, 6))
    k = 5
    mine = knn_distances(emb, k)

    # second, deliberately naive O(n^2) implementation
    unit = emb / np.linalg.norm(emb, axis=1)[:, None]
    ref = np.zeros(len(unit))
    for i in range(len(unit)):
        dists = sorted(float(np.sqrt(max(np.sum((unit[i] - unit[j]) ** 2), 0.0)))
                       for j in range(len(unit)) if j != i)
        ref[i] = dists[k - 1]
    assert np.allclose(mine, ref, atol=1e-9)

    for q in (50, 90, 95, 99, 100):
        assert nearest_rank_percentile(mine, q) == pytest.approx(
            sorted(ref)[int(np.ceil(q * len(ref) / 100)) - 1], abs=1e-9)


def test_rescaling_all_embeddings_changes_nothing():
    rng = stream(15, 0)
    emb = rng.normal(size=(50, 4))
    a = rho_percentiles(emb, 3, (50, 90))
    b = rho_percentiles(emb * 37.5, 3, (50, 90))
    assert np.allclose(a, b, atol=1e-12)


def test_too_few_points_rejected():
    with pytest.raises(ValueError, match="k\\+1"):
        knn_distances(np.eye(3), 3)


def test_zero_vectors_dropped_with_warning():
    emb = np.vstack([np.zeros(3), np.eye(3)])
    with pytest.warns(UserWarning, match="zero embeddings"):
        d = knn_distances(emb, 1)
    assert len(d) == 3


def test_nearest_rank_rule():
    vals = np.array([4.0, 1.0, 3.0, 2.0])
    assert nearest_rank_percentile(vals, 50) == 2.0
    assert nearest_rank_percentile(vals, 75) == 3.0
    assert nearest_rank_percentile(vals, 76) == 4.0
    assert nearest_rank_percentile(vals, 100) == 4.0


# -- privacy report -------------------------------------------------------------


def test_single_release_reports_rounds_shared_one():
    released = {5: np.array([1.0, 0.0])}
    rep = privacy_report(released, {5: 1}, NoiseConfig(sigma0=1.0), k=50)
    assert rep.rounds_shared == 1
    assert not rep.empty


def test_no_releases_gives_empty_report():
    rep = privacy_report({}, {}, NoiseConfig(sigma0=1.0))
    assert rep.empty


def test_doubling_sigma_strictly_decreases_every_epsilon():
    rng = stream(16, 0)
    released = {i: rng.normal(size=4) for i in range(30)}
    counts = {i: int(rng.integers(1, 6)) for i in range(30)}
    lo = privacy_report(released, counts, NoiseConfig(sigma0=0.5), k=5)
    hi = privacy_report(released, counts, NoiseConfig(sigma0=1.0), k=5)
    for a, b in zip(lo.rows, hi.rows):
        if a["rho"] > 0:
            assert b["epsilon"] < a["epsilon"]


def test_report_composes_verified_operations():
    rng = stream(17, 0)
    released = {i: rng.normal(size=4) for i in range(40)}
    counts = {i: 10 for i in range(40)}
    noise = NoiseConfig(sigma0=0.7, delta=1e-4)
    rep = privacy_report(released, counts, noise, k=5, percentiles=(50, 90))
    emb = np.vstack([released[i] for i in sorted(released)])
    rhos = rho_percentiles(emb, 5, (50, 90))
    for row, (q, rho) in zip(rep.rows, ((50, rhos[0]), (90, rhos[1]))):
        assert row["percentile"] == q
        assert row["rho"] == pytest.approx(rho)
        assert row["epsilon"] == pytest.approx(mdp_epsilon(rho, 0.7, 10, 1e-4))
    assert rep.headline()["percentile"] == 90


def test_report_shrinks_k_when_few_releases():
    rng = stream(18, 0)
    released = {i: rng.normal(size=3) for i in range(4)}
    with pytest.warns(UserWarning, match="reducing k"):
        rep = privacy_report(released, {i: 1 for i in range(4)},
                             NoiseConfig(sigma0=1.0), k=50)
    assert rep.knn_k == 3


# -- attribute-inference attack --------------------------------------------------


def single_node_setup(seed, d=4):
    rng = stream(seed, 5)
    x = rng.uniform(-0.5, 0.5, size=d)
    g = build_graph([NodeRecord(0, 0, x)], [], 1)
    w = np.eye(d) + 0.1 * rng.normal(size=(d, d))
    params = M.ModelParams(layers=[w], task_head=np.zeros((2, d)))
    return g, params, x, w


def test_attack_from_truth_is_immediately_converged():
    g, params, x, _ = single_node_setup(21)
    view = g.view(0)
    obs = M.compute_stack(params, view).top()[0]
    res = aia_attack(params, view, 0, obs, init=x, true_features=x, iterations=50)
    assert res.objective == 0.0
    assert res.mse == 0.0
    assert res.converged


def test_invertible_single_node_matches_closed_form():
    g, params, x, w = single_node_setup(22)
    view = g.view(0)
    obs = M.compute_stack(params, view).top()[0]
    closed = np.linalg.solve(w, np.arctanh(obs))
    res = aia_attack(params, view, 0, obs, iterations=3000, step_size=0.5,
                     true_features=x)
    assert np.max(np.abs(res.reconstructed - closed)) <= 1e-6
    assert res.mse <= 1e-12


def test_non_convergence_flagged_with_best_iterate():
    g, params, x, _ = single_node_setup(23)
    view = g.view(0)
    obs = M.compute_stack(params, view).top()[0]
    res = aia_attack(params, view, 0, obs, iterations=2, step_size=0.01)
    assert not res.converged
    assert res.iterations == 2
    assert np.isfinite(res.objective)


def attack_mse_at_fanout(fanout, seed):
    rng = stream(seed, 6)
    d = 5
    x = rng.uniform(-0.8, 0.8, size=d)
    nodes = [NodeRecord(0, 0, x)]
    edges = []
    for i in range(1, fanout + 1):
        nodes.append(NodeRecord(i, 0, rng.uniform(-0.8, 0.8, size=d)))
        edges.append(EdgeRecord(i - 1, 0, i))
    g = build_graph(nodes, edges, 1)
    view = g.view(0)
    w = np.eye(d) + 0.1 * rng.normal(size=(d, d))
    params = M.ModelParams(layers=[w], task_head=np.zeros((2, d)))
    obs = M.compute_stack(params, view).top()[view.row_of(0)]
    res = aia_attack(params, view, 0, obs, iterations=400, step_size=0.8,
                     true_features=x)
    return res.mse


def test_larger_neighborhoods_are_harder_to_reconstruct():
    small = [attack_mse_at_fanout(3, s) for s in range(5)]
    large = [attack_mse_at_fanout(10, s) for s in range(5)]
    assert np.median(large) > np.median(small)
