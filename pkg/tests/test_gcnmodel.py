from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from utils import autodiff as ad
from utils.gcnmodel import (GCNConfig, embed, init_mlp_params, init_params, midpoint_taus, mlp_q_values,
                            q_from_quantiles, q_values, quantile_embedding, z_values)
from utils.obsgraph import NODE_TYPES, build_state_graph, receptive_field, scale_features, subgraph
from utils.roadnet import generate_grid_network
from utils.simcore import PROLONG, Simulator, generate_trips, initial_state

SMALL = GCNConfig(layers=2, hidden=4, quantile_embedding=3, quantile_samples=2, target_quantile_samples=2,
                  eval_quantiles=4)


def _graph(network, steps=90, seed=2):
    sim = Simulator(network, generate_trips(network, period=2.0, horizon=steps, seed=seed))
    for _ in range(steps):
        sim.step({t: PROLONG for t in network.tsc_ids})
    return scale_features(build_state_graph(sim.state, network))


def _psi_by_tsc(graph, params):
    psi = embed(graph, params).value
    return {graph.node_ids[row].split(":", 1)[1]: psi[k] for k, row in enumerate(graph.focus_rows)}


def _permuted(graph, rng):
    """Same graph with nodes shuffled inside each type block."""
    order = []
    features = {}
    for t in NODE_TYPES:
        rows = graph.rows(t)
        local = rng.permutation(len(rows))
        features[t] = graph.features[t][local]
        order.extend(rows[local].tolist())
    order = np.array(order, dtype=int)
    return replace(graph, node_ids=[graph.node_ids[i] for i in order], features=features,
                   a_hat=graph.a_hat[order][:, order].tocsr(),
                   tsc_ids=[graph.node_ids[i].split(":", 1)[1] for i in order[:graph.count("tsc")]],
                   vehicle_lane_length=graph.vehicle_lane_length[order[graph.offset("vehicle"):] - graph.offset("vehicle")],
                   edges=np.zeros((0, 2), dtype=int), focus=None)


def test_config_validation():
    with pytest.raises(ValueError):
        GCNConfig(layers=1)
    with pytest.raises(ValueError):
        GCNConfig(hidden=0)
    assert GCNConfig.from_config({"model": {"hidden": 8, "unrelated": 1}}).hidden == 8


def test_parameters_are_shared_across_network_sizes(grid2):
    params = init_params(SMALL, seed=0)
    big = generate_grid_network(3, 3)
    assert embed(_graph(grid2), params).shape == (4, 4)
    assert embed(_graph(big), params).shape == (9, 4)


def test_single_isolated_tsc(single_tsc_graph):
    params = init_params(SMALL, seed=1)
    for t in NODE_TYPES:
        params[f"enc.{t}.W"].value[:] = 0.0
    psi = embed(single_tsc_graph(seconds=0.4), params).value
    h = np.full((1, 4), 0.5)
    for n in range(SMALL.layers):
        h = expit(h @ params[f"gcn.W{n}"].value)
    np.testing.assert_allclose(psi, h)


def test_permutation_invariance(grid2, rng):
    graph = _graph(grid2)
    params = init_params(SMALL, seed=3)
    before = _psi_by_tsc(graph, params)
    after = _psi_by_tsc(_permuted(graph, rng), params)
    for tsc in grid2.tsc_ids:
        np.testing.assert_allclose(after[tsc], before[tsc], atol=1e-12)


def test_subgraph_matches_full_graph(grid2):
    config = GCNConfig(layers=3, hidden=5)
    graph = _graph(grid2)
    params = init_params(config, seed=4)
    full = _psi_by_tsc(graph, params)
    for tsc in grid2.tsc_ids:
        local = embed(subgraph(graph, tsc, config.layers), params).value[0]
        np.testing.assert_allclose(local, full[tsc], atol=1e-12)


def test_far_vehicle_does_not_change_embedding(grid2):
    config = GCNConfig(layers=2, hidden=5)
    graph = _graph(grid2)
    params = init_params(config, seed=5)
    base = _psi_by_tsc(graph, params)
    checked = 0
    for tsc, row in zip(graph.tsc_ids, graph.rows("tsc")):
        near = set(receptive_field(graph, row, config.layers).tolist())
        far = [r for r in graph.rows("vehicle") if r not in near]
        if not far:
            continue
        features = dict(graph.features)
        features["vehicle"] = graph.features["vehicle"].copy()
        features["vehicle"][far[0] - graph.offset("vehicle")] += 0.7
        moved = _psi_by_tsc(replace(graph, features=features), params)
        np.testing.assert_array_equal(moved[tsc], base[tsc])
        checked += 1
    assert checked > 0


def test_twin_intersections_share_embedding(grid2):
    graph = scale_features(build_state_graph(initial_state(grid2), grid2))
    params = init_params(SMALL, seed=6)
    psi = _psi_by_tsc(graph, params)
    np.testing.assert_allclose(psi["I0_0"], psi["I1_1"], atol=1e-10)


def test_bias_only_head(grid2):
    params = init_params(SMALL, seed=7)
    params["head.W"].value[:] = 0.0
    params["head.b"].value[:] = [[0.3, -0.2]]
    q = q_values(embed(_graph(grid2), params), params).value
    np.testing.assert_allclose(q, np.tile([0.3, -0.2], (4, 1)))


def test_feature_width_mismatch(single_tsc_graph):
    graph = single_tsc_graph()
    graph.features["tsc"] = np.zeros((1, 2))
    with pytest.raises(ValueError):
        embed(graph, init_params(SMALL, seed=0))


def test_quantile_embedding_bounds():
    params = init_params(SMALL, seed=0)
    with pytest.raises(ValueError):
        quantile_embedding([1.2], params)
    params["quantile.w"].value[:] = 0.0
    params["quantile.b"].value[:] = -1.0
    assert not quantile_embedding([0.0, 0.5, 1.0], params).value.any()


def test_unit_quantile_embedding_reduces_to_q(grid2):
    params = init_params(SMALL, seed=8)
    params["quantile.w"].value[:] = 0.0
    params["quantile.b"].value[:] = 1.0
    psi = embed(_graph(grid2), params)
    z, taus = z_values(psi, [0.1, 0.9], params)
    assert taus.shape == (4, 2)
    np.testing.assert_allclose(z.value, np.repeat(q_values(psi, params).value, 2, axis=0))


def test_midpoint_grid_is_deterministic(grid2):
    params = init_params(SMALL, seed=9)
    psi = embed(_graph(grid2), params)
    a = q_from_quantiles(psi, params, 8).value
    b = q_from_quantiles(psi, params, 8).value
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(q_from_quantiles(psi, params, 1).value, z_values(psi, [0.5], params)[0].value)
    np.testing.assert_allclose(midpoint_taus(4), [0.125, 0.375, 0.625, 0.875])


def test_sampled_mean_approaches_grid_mean(grid2):
    params = init_params(SMALL, seed=10)
    psi = embed(_graph(grid2), params)
    sampled = q_from_quantiles(psi, params, 10_000, rng=np.random.default_rng(0)).value
    grid = q_from_quantiles(psi, params, 1000).value
    np.testing.assert_allclose(sampled, grid, atol=2e-2)


def test_end_to_end_gradients(grid2, rng):
    graph = _graph(grid2, steps=40)
    params = init_params(SMALL, seed=11)
    weights = rng.normal(size=(4 * 2, 2))
    taus = np.array([0.2, 0.7])

    def fn():
        psi = embed(graph, params)
        z, _ = z_values(psi, taus, params)
        return ad.add(ad.sum(ad.mul(z, weights)), ad.sum(q_values(psi, params)))

    with ad.Tape() as tape:
        loss = fn()
    ad.backward(tape, loss, params)
    for name, p in params.items():
        np.testing.assert_allclose(p.grad, ad.numeric_gradient(fn, p), rtol=1e-4, atol=1e-7, err_msg=name)


def test_mlp_head(rng):
    params = init_mlp_params(18, SMALL, seed=0)
    assert mlp_q_values(rng.normal(size=(3, 18)), params).shape == (3, 2)
