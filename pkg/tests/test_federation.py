import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flt import federation as F
from flt import nn
from flt.data import gen_gaussian_mixture, partition_pathological
from flt.relatedness import RelatednessGraph, row_normalize

finite = st.floats(-1e3, 1e3, allow_nan=False)


def _setup(M=10, C=5, seed=0, dims=4):
    means = np.random.default_rng(seed).standard_normal((10, dims)) * 3
    ds = gen_gaussian_mixture(10, dims, means, 1.0, 40, seed=seed)
    clients, truth = partition_pathological(ds, M, C, 2, seed=seed)
    return clients, truth, nn.mlp((dims,), 10, hidden=8, dropout=0.0, seed=seed)


def _graph(At, clients, clusters=None):
    p = np.array([c.p for c in clients])
    At = np.asarray(At, dtype=float)
    return RelatednessGraph(np.zeros_like(At), At, row_normalize(At, p), clusters)


# -- selection ----------------------------------------------------------------------

def test_full_participation_and_size():
    np.testing.assert_array_equal(F.select_clients(7, 1.0, 0), np.arange(7))
    assert len(F.select_clients(100, 0.2, 0)) == 20
    assert len(F.select_clients(10, 0.25, 0)) == 3  # round half up
    assert len(F.select_clients(3, 0.01, 0)) == 1
    assert F.FederationConfig().rho == 0.2


def test_selection_replays_per_seed_and_round():
    a = F.select_clients(50, 0.2, np.random.default_rng([1, 4, 9]))
    b = F.select_clients(50, 0.2, np.random.default_rng([1, 4, 9]))
    np.testing.assert_array_equal(a, b)
    assert len(set(a)) == len(a)


# -- aggregation examples --------------------------------------------------------------

def test_row_normalize_examples():
    np.testing.assert_allclose(row_normalize(np.ones((4, 4)), np.full(4, 0.25)), np.full((4, 4), 0.25))
    np.testing.assert_array_equal(row_normalize(np.eye(3), [0.2, 0.3, 0.5]), np.eye(3))
    Ab = row_normalize(np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]]), [0.5, 0.3, 0.2])
    np.testing.assert_allclose(Ab[0], [0.625, 0.375, 0.0])


def test_full_graph_gives_the_global_weighted_mean():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((5, 4))
    p = np.array([0.1, 0.2, 0.3, 0.4])
    out = F.aggregate_full(W, row_normalize(np.ones((4, 4)), p))
    np.testing.assert_allclose(out, np.repeat((W @ p)[:, None], 4, axis=1), rtol=1e-12)
    np.testing.assert_allclose(F.aggregate_fedavg(W, p), out, rtol=1e-12)


def test_identity_graph_is_a_no_op():
    W = np.random.default_rng(1).standard_normal((5, 3))
    np.testing.assert_array_equal(F.aggregate_full(W, np.eye(3)), W)


def test_block_graph_scalar_example():
    At = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]], dtype=float)
    out = F.aggregate_full(np.array([[0.0, 2.0, 5.0]]), row_normalize(At, np.full(3, 1 / 3)))
    np.testing.assert_allclose(out, [[1.0, 1.0, 5.0]])


def test_clustered_examples():
    W = np.array([[0.0, 2.0, 5.0]])
    u = np.full(3, 1 / 3)
    np.testing.assert_allclose(F.aggregate_clustered(W, [0, 0, 1], u), [[1.0, 1.0, 5.0]])
    np.testing.assert_array_equal(F.aggregate_clustered(W, [0, 1, 2], u), W)
    p = np.array([0.5, 0.3, 0.2])
    np.testing.assert_allclose(F.aggregate_clustered(W, [0, 0, 0], p), F.aggregate_fedavg(W, p))
    with pytest.raises(ValueError):
        F.aggregate_clustered(W, [0, -1, 0], u)


def test_only_participants_are_mixed():
    W = np.array([[0.0, 2.0, 5.0, 7.0]])
    p = np.full(4, 0.25)
    out = F.aggregate_clustered(W, [0, 0, 1, 1], p, participants=[0, 1])
    # cluster 1 has nobody this round and keeps its columns
    np.testing.assert_allclose(out, [[1.0, 1.0, 5.0, 7.0]])
    out = F.aggregate_fedavg(W, p, participants=[1, 3])
    np.testing.assert_allclose(out, [[4.5] * 4])
    mask = np.array([False, True, False, True])
    np.testing.assert_array_equal(F.aggregate_fedavg(W, p, participants=mask), out)
    np.testing.assert_array_equal(F.aggregate_clustered(W, [0, 0, 1, 1], p, participants=mask),
                                  F.aggregate_clustered(W, [0, 0, 1, 1], p, participants=[1, 3]))


def test_literal_forms_do_not_reduce_to_averaging():
    W = np.array([[1.0, 1.0, 1.0, 1.0]])
    out = F.aggregate_full_literal(W, np.ones((4, 4)), np.full(4, 0.25))
    np.testing.assert_allclose(out, [[0.25] * 4])  # sum / M^2 * M: shrinks a consensus model
    out = F.aggregate_clustered_literal(W, [0, 0, 1, 1], np.full(4, 0.25))
    np.testing.assert_allclose(out, [[0.25] * 4])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**16), finite, finite)
def test_aggregation_commutes_with_affine_maps(M, d, seed, scale, shift):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((d, M))
    At = (rng.random((M, M)) < 0.5).astype(float)
    At = np.maximum(At, At.T)
    np.fill_diagonal(At, 1.0)
    Ab = row_normalize(At, rng.random(M) + 0.1)
    f = lambda X: scale * X + shift
    np.testing.assert_allclose(F.aggregate_full(f(W), Ab), f(F.aggregate_full(W, Ab)), rtol=1e-9, atol=1e-7)
    cl = rng.integers(0, 3, size=M)
    p = rng.random(M) + 0.1
    np.testing.assert_allclose(F.aggregate_clustered(f(W), cl, p), f(F.aggregate_clustered(W, cl, p)),
                               rtol=1e-9, atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)), elements=finite),
       st.integers(0, 2**16))
def test_aggregation_never_grows_the_max_norm(W, seed):
    rng = np.random.default_rng(seed)
    M = W.shape[1]
    At = np.maximum((rng.random((M, M)) < 0.5), np.eye(M)).astype(float)
    At = np.maximum(At, At.T)
    Ab = row_normalize(At, rng.random(M) + 0.1)
    S = rng.choice(M, size=int(rng.integers(1, M + 1)), replace=False)
    assert np.abs(F.aggregate_full(W, Ab, S)).max() <= np.abs(W).max() * (1 + 1e-12) + 1e-300


# -- dynamic trigger -------------------------------------------------------------------

def test_recluster_trigger():
    z = F.ChangeFlags.zeros(5)
    assert F.dynamic_recluster_check(z, 1, 4, 4)
    assert not F.dynamic_recluster_check(F.ChangeFlags([1, 1, 1, 1, 1]), 5, 0, 7)
    assert F.dynamic_recluster_check(F.ChangeFlags([1, 1, 1, 0, 0]), 2, 0, 13)
    assert not F.dynamic_recluster_check(F.ChangeFlags([1, 1, 0, 0, 0]), 2, 0, 13)
    with pytest.raises(ValueError):
        F.ChangeFlags([0, 2])


def test_config_validation():
    with pytest.raises(ValueError):
        F.FederationConfig(method="fedprox")
    with pytest.raises(ValueError):
        F.FederationConfig(rho=0.0)
    with pytest.raises(ValueError):
        F.FederationConfig(T=0)
    cfg = F.FederationConfig(umap={"n_neighbors": 5}, dynamic={"lam": 1.0})
    assert cfg.umap.n_neighbors == 5 and cfg.dynamic.tau == 0


# -- full runs --------------------------------------------------------------------------

def _run(method, clients, model, graph=None, seed=0, T=4, **kw):
    cfg = F.FederationConfig(method=method, T=T, rho=0.5, E=1, batch_size=8, lr=0.05, **kw)
    return F.run_federation(cfg, clients, graph, model, seed=seed, keep_trajectory=True)


def test_local_equals_independent_training():
    clients, _, model = _setup()
    res = _run("local", clients, model, seed=3)
    W = np.repeat(nn.flatten_params(model)[:, None], len(clients), axis=1)
    for t in range(1, 5):
        S = F.select_clients(len(clients), 0.5, np.random.default_rng([3, t, F._SELECT_STREAM]))
        for i in S:
            m = nn.train_local(nn.unflatten_params(model, W[:, i]), clients[i], epochs=1, batch_size=8,
                               lr=0.05, rng=F.client_rng(3, i, t))
            W[:, i] = nn.flatten_params(m)
    np.testing.assert_array_equal(res.W, W)


def test_complete_graph_reproduces_fedavg():
    clients, _, model = _setup()
    a = _run("flt_full", clients, model, _graph(np.ones((10, 10)), clients))
    b = _run("fedavg", clients, model)
    for wa, wb in zip(a.trajectory, b.trajectory):
        assert np.linalg.norm(wa - wb) <= 1e-9 * np.linalg.norm(wb)


def test_identity_graph_reproduces_local_bit_for_bit():
    clients, _, model = _setup()
    a = _run("flt_full", clients, model, _graph(np.eye(10), clients))
    b = _run("local", clients, model)
    for wa, wb in zip(a.trajectory, b.trajectory):
        np.testing.assert_array_equal(wa, wb)


def test_metrics_csv_independent_of_workers():
    clients, truth, model = _setup()
    g = _graph(np.kron(np.eye(5), np.ones((2, 2))), clients, truth.assignment)
    cfg = lambda w: F.FederationConfig(method="flt_clustered", T=3, rho=0.5, E=1, lr=0.05, workers=w)
    one = F.run_federation(cfg(1), clients, g, model, seed=2, ground_truth=truth.assignment)
    four = F.run_federation(cfg(4), clients, g, model, seed=2, ground_truth=truth.assignment)
    assert F.metrics_csv(one.history) == F.metrics_csv(four.history)
    assert one.history[0].ari == 1.0


def test_history_contents_and_traffic():
    clients, _, model = _setup()
    res = _run("fedavg", clients, model, T=3)
    d = model.num_params
    units = [rm.comm_units_cumulative for rm in res.history]
    assert units == [2 * 5 * d * t for t in (1, 2, 3)]
    assert res.history[-1].comm_bytes_cumulative == units[-1] * 8
    assert all(rm.optimality_gap >= 0 and rm.test_acc_variance >= 0 for rm in res.history)
    text = F.metrics_csv(res.history)
    lines = text.strip().split("\n")
    assert lines[0].split(",") == F.CSV_COLUMNS and len(lines) == 4


def test_flt_needs_a_graph():
    clients, _, model = _setup()
    with pytest.raises(ValueError, match="graph"):
        _run("flt_full", clients, model)
    with pytest.raises(ValueError, match="cluster"):
        _run("flt_clustered", clients, model, _graph(np.eye(10), clients))


def test_drift_raises_flags_and_triggers_reclustering():
    clients, truth, model = _setup()
    g = _graph(np.ones((10, 10)), clients, truth.assignment)
    calls = []

    def recluster(current, t):
        calls.append(t)
        return g, 123.0

    drift = {2: {0: clients[9], 9: clients[0]}}
    cfg = F.FederationConfig(method="flt_full", T=4, rho=0.5, E=1, lr=0.05, dynamic={"lam": 1.0})
    res = F.run_federation(cfg, clients, g, model, seed=0, drift=drift, recluster=recluster)
    assert calls == [2]
    assert [rm.reclustered for rm in res.history] == [False, True, False, False]
    d = model.num_params
    assert res.history[1].comm_units_cumulative == 2 * 2 * 5 * d + 123.0


def test_ari_follows_ground_truth_schedule():
    clients, truth, model = _setup()
    g = _graph(np.kron(np.eye(5), np.ones((2, 2))), clients, truth.assignment)
    swapped = truth.assignment.copy()
    swapped[[0, 9]] = swapped[[9, 0]]
    cfg = F.FederationConfig(method="flt_clustered", T=3, rho=0.5, E=1, lr=0.05)
    res = F.run_federation(cfg, clients, g, model, seed=2, ground_truth={1: truth.assignment, 3: swapped})
    assert [h.ari for h in res.history[:2]] == [1.0, 1.0]
    assert res.history[2].ari < 1.0
