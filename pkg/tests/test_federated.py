import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedglu.cgm_data import SampleSet
from fedglu.evaluation import region_rmse
from fedglu.federated import (ClientReturn, ClientState, FedConfig, NoClients, NoExcursionsInTrainData, ServerState,
                              ShapeMismatch, aggregate, client_update, derive_seed, local_finetune, run_federated,
                              select_alpha, train_central, train_local)
from fedglu.loss import MSE, HhParams
from fedglu.nn_core import EmptyDataset, MlpModel, TrainConfig, init_model, predict_mgdl, train
from oracles import naive_fedavg

DIMS = (4, 6, 1)
N = 6 * 4 + 6 + 6 + 1


def samples(n, seed, lo=40.0, hi=400.0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 4))
    y = lo + (hi - lo) * X.mean(axis=1)
    return SampleSet(X, y, np.arange(n) * 300)


def agg(vectors, counts, server_lr=1.0, start=None):
    server = ServerState(np.zeros_like(vectors[0]) if start is None else start, 0, server_lr)
    rets = [ClientReturn(f"p{i:02d}", k, v) for i, (v, k) in enumerate(zip(vectors, counts))]
    return aggregate(server, rets).params


vec = st.lists(st.floats(-100, 100), min_size=5, max_size=5).map(np.array)
counts = st.integers(1, 5000)


# -- aggregation algebra --------------------------------------------------------

def test_equal_weights_midpoint():
    p, q = np.array([1.0, 2.0]), np.array([3.0, -2.0])
    np.testing.assert_array_equal(agg([p, q], [10, 10]), (p + q) / 2)


def test_weighted_quarter():
    v = np.array([4.0, -8.0, 1.0])
    np.testing.assert_allclose(agg([np.zeros(3), v], [1, 3]), 0.75 * v, rtol=0, atol=1e-15)


@given(vec, counts)
def test_single_client_is_exact(v, k):
    np.testing.assert_array_equal(agg([v], [k]), v)


@given(st.lists(st.tuples(vec, counts), min_size=1, max_size=6))
def test_matches_naive_weighted_mean(pairs):
    vs, ks = [p[0] for p in pairs], [p[1] for p in pairs]
    np.testing.assert_allclose(agg(vs, ks), naive_fedavg(vs, ks), rtol=1e-12, atol=1e-12)


@given(vec, st.lists(counts, min_size=1, max_size=6))
def test_identical_vectors_fixed_point(v, ks):
    np.testing.assert_allclose(agg([v] * len(ks), ks), v, rtol=1e-12, atol=1e-12)


@given(st.lists(st.tuples(vec, counts), min_size=1, max_size=6), vec)
def test_affine_equivariance(pairs, delta):
    vs, ks = [p[0] for p in pairs], [p[1] for p in pairs]
    shifted = agg([v + delta for v in vs], ks)
    np.testing.assert_allclose(shifted, agg(vs, ks) + delta, rtol=1e-12, atol=1e-12)


@given(st.lists(st.tuples(vec, counts), min_size=1, max_size=6), vec, st.floats(0.1, 2.0))
def test_server_step(pairs, w, lr):
    vs, ks = [p[0] for p in pairs], [p[1] for p in pairs]
    avg = agg(vs, ks)
    np.testing.assert_allclose(agg(vs, ks, lr, w), w - lr * (w - avg), rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(agg(vs, ks, 1.0, w), avg)


def test_order_invariant_bitwise():
    rng = np.random.default_rng(0)
    rets = [ClientReturn(f"p{i}", int(rng.integers(1, 100)), rng.standard_normal(50)) for i in range(7)]
    server = ServerState(np.zeros(50))
    a = aggregate(server, rets).params
    b = aggregate(server, rets[::-1]).params
    np.testing.assert_array_equal(a, b)


def test_aggregate_errors():
    with pytest.raises(NoClients):
        aggregate(ServerState(np.zeros(3)), [])
    with pytest.raises(ShapeMismatch):
        aggregate(ServerState(np.zeros(3)), [ClientReturn("a", 1, np.zeros(4))])


# -- client update / rounds --------------------------------------------------------

def test_client_update_zero_epochs_is_identity():
    w = init_model(0, DIMS).params
    cfg = FedConfig(rounds=1, local_epochs=0)
    np.testing.assert_array_equal(client_update(ClientState("a", samples(20, 0)), w, cfg, 0, DIMS), w)


def test_client_update_moves_and_is_deterministic():
    w = init_model(0, DIMS).params
    cfg = FedConfig(rounds=1, local_epochs=1, batch_size=8)
    a = client_update(ClientState("a", samples(20, 0)), w, cfg, 0, DIMS)
    b = client_update(ClientState("a", samples(20, 0)), w, cfg, 0, DIMS)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, w)


def test_client_requires_data():
    with pytest.raises(EmptyDataset):
        ClientState("a", SampleSet.empty(4))


def test_one_client_equals_sequential_oracle():
    """R rounds of FedAvg with one client == R separate E-epoch trainings with fresh Adam."""
    data = samples(37, 1)
    cfg = FedConfig(rounds=4, local_epochs=2, batch_size=10, rng_seed=9)
    w0 = init_model(5, DIMS).params
    server, ledger = run_federated([ClientState("solo", data)], cfg, w0, DIMS)

    w = w0.copy()
    for t in range(cfg.rounds):
        tcfg = TrainConfig(cfg.client_lr, cfg.batch_size, cfg.local_epochs, cfg.local_epochs,
                           derive_seed(cfg.rng_seed, t, "solo"))
        w = train(MlpModel(DIMS, w), data, MSE, tcfg).model.params
        np.testing.assert_array_equal(ledger[t].aggregated, w)
    np.testing.assert_array_equal(server.params, w)


def test_identical_clients_equal_single_update():
    data = samples(30, 2)
    cfg = FedConfig(rounds=2, local_epochs=1, batch_size=8, rng_seed=1)
    w0 = init_model(1, DIMS).params
    # same patient id => same per-round seed; aggregate of equal vectors is that vector
    clients = [ClientState("same", data), ClientState("same", data)]
    server, ledger = run_federated(clients, cfg, w0, DIMS)
    solo, _ = run_federated([ClientState("same", data)], cfg, w0, DIMS)
    np.testing.assert_allclose(server.params, solo.params, rtol=1e-12, atol=1e-14)


def test_ledger_bookkeeping_and_snapshots(tmp_path):
    clients = [ClientState(f"p{i}", samples(10 + 5 * i, i)) for i in range(3)]
    cfg = FedConfig(rounds=3, local_epochs=1, batch_size=8)
    server, ledger = run_federated(clients[::-1], cfg, init_model(0, DIMS).params, DIMS, snapshot_dir=tmp_path)
    assert len(ledger) == 3 and server.round == 3
    for r in ledger.records:
        assert r.client_ids == ["p0", "p1", "p2"]
        assert r.n == sum(c.n_k for c in clients)
    assert sorted(p.name for p in (tmp_path / "rounds").iterdir()) == ["round_1.json", "round_2.json",
                                                                     "round_3.json"]
    last = json.loads((tmp_path / "rounds" / "round_3.json").read_text())
    np.testing.assert_array_equal(np.concatenate([np.ravel(last["layers"][0]["w"]), last["layers"][0]["b"],
                                                  np.ravel(last["layers"][1]["w"]), last["layers"][1]["b"]]),
                                  server.params)
    meta = json.loads((tmp_path / "ledger.json").read_text())
    assert [r["round"] for r in meta["rounds"]] == [1, 2, 3]


def test_client_order_and_threads_do_not_matter():
    clients = [ClientState(f"p{i}", samples(12 + i, i)) for i in range(4)]
    w0 = init_model(0, DIMS).params
    a, _ = run_federated(clients, FedConfig(rounds=2, batch_size=5), w0, DIMS)
    b, _ = run_federated(clients[::-1], FedConfig(rounds=2, batch_size=5, max_workers=3), w0, DIMS)
    np.testing.assert_array_equal(a.params, b.params)


# -- personalisation -------------------------------------------------------------

def test_finetune_shape_and_band_only_equals_mse():
    data = samples(30, 3, lo=80, hi=170)  # no excursions
    g = init_model(2, DIMS).params
    cfg = TrainConfig(max_epochs=3, batch_size=8)
    a = local_finetune(ClientState("a", data), g, HhParams(0.9), cfg, DIMS)
    b = train(MlpModel(DIMS, g), data, MSE, cfg).model.params
    assert a.shape == g.shape
    np.testing.assert_array_equal(a, b)


def test_finetune_improves_hypo_region():
    rng = np.random.default_rng(4)
    X = rng.random((300, 4))
    y = np.where(X[:, 0] < 0.3, 50.0, 150.0) + 10 * X[:, 1]
    data = SampleSet(X, y, np.arange(300))
    g = train(init_model(0, DIMS), data, MSE, TrainConfig(max_epochs=3, batch_size=50)).model
    tuned = MlpModel(DIMS, local_finetune(ClientState("a", data), g.params, HhParams(1.0),
                                          TrainConfig(max_epochs=30, batch_size=50), DIMS))
    before = region_rmse(y, predict_mgdl(g, X)).hypo
    after = region_rmse(y, predict_mgdl(tuned, X)).hypo
    assert after < before


def test_select_alpha_argmin_and_ties():
    scores = {0.1: 5.0, 0.5: 3.0, 0.9: 9.0}
    data = samples(50, 0)
    data.y[:5], data.y[5:10] = 50.0, 300.0  # both excursion sides present
    sel = select_alpha(lambda a: a, [0.1, 0.5, 0.9], data, score_fn=lambda m, s: scores[m])
    assert sel.alpha == 0.5 and sel.scores == scores
    tie = select_alpha(lambda a: a, [0.2, 0.8, 0.4], data, score_fn=lambda m, s: 1.0)
    assert tie.alpha == 0.8
    assert select_alpha(lambda a: a, [0.3], data, score_fn=lambda m, s: 1.0).alpha == 0.3


def test_select_alpha_fallback_without_excursions():
    data = samples(30, 0, lo=80, hi=170)
    calls = []
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        sel = select_alpha(lambda a: calls.append(a), [0.0, 1.0], data)
    assert sel.alpha == 0.5 and sel.fallback and not calls
    assert any(issubclass(x.category, NoExcursionsInTrainData) for x in w)


def test_central_single_patient_equals_local():
    data = samples(40, 5)
    cfg = TrainConfig(max_epochs=3, batch_size=8, rng_seed=2)
    init = init_model(7, DIMS)
    a = train_local(ClientState("a", data), MSE, cfg, init, DIMS)
    b = train_central([data], MSE, cfg, init, DIMS)
    np.testing.assert_array_equal(a.params, b.params)
    with pytest.raises(EmptyDataset):
        train_central([SampleSet.empty(4)], MSE, cfg, init, DIMS)


@settings(max_examples=30)
@given(st.integers(0, 2**40), st.text(max_size=8), st.integers(0, 99))
def test_derive_seed_stable(master, tag, k):
    s = derive_seed(master, tag, k)
    assert s == derive_seed(master, tag, k)
    assert 0 <= s < 2**63
