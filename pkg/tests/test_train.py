import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from stgcast import tensor as T
from stgcast.data import WindowedDataset, chronological_split, generate_synthetic, make_windows
from stgcast.errors import ContractError, DegenerateStatsError, NumericFaultError, ShapeError
from stgcast.graph import normalized_adjacency, ring_graph
from stgcast.nn import ModelConfig, build_model
from stgcast.train import (
    AdamState,
    NormStats,
    TrainConfig,
    adam_step,
    build_for,
    clip_by_global_norm,
    denormalize,
    expand_grid,
    fit,
    gradient_check_model,
    grid_search,
    holdout_metrics,
    loss_and_grads,
    normalize,
    regularized_loss,
    train_model,
    write_grid_csv,
    write_history_csv,
)

from oracles import loop_loss

SMALL = dict(hidden=4, gc_hidden=3, gc_out=2, t_in=6, t_out=3, batch_size=16,
             learning_rate=0.01, early_stop_patience=3)


@pytest.fixture(scope="module")
def small_data():
    g = ring_graph(4)
    table = generate_synthetic(4, 240, g, seed=3)
    return make_windows(table, 6, 3), g


# -- loss --------------------------------------------------------------------

def test_loss_trivial_cases(rng):
    y = rng.uniform(size=(2, 3, 4))
    zero_w = [T.param(np.zeros((3, 3)))]
    assert regularized_loss(y, T.constant(y.reshape(2, -1)), zero_w).value[0, 0] == 0.0
    assert regularized_loss(y, T.constant(y.reshape(2, -1) - 0.5), zero_w).value[0, 0] == 0.25


def test_loss_matches_loop_oracle():
    rng = np.random.default_rng(8)
    for _ in range(100):
        n, t, d = rng.integers(1, 5, 3)
        yt, yp = rng.normal(size=(n, t, d)), rng.normal(size=(n, t, d))
        ws = [rng.normal(size=tuple(rng.integers(1, 4, 2))) for _ in range(3)]
        lam = float(rng.uniform(0, 0.01))
        got = regularized_loss(yt, T.constant(yp.reshape(n, -1)), [T.param(w) for w in ws], lam)
        assert abs(got.value[0, 0] - loop_loss(yt, yp, ws, lam)) < 1e-12


def test_loss_shape_error(rng):
    with pytest.raises(ShapeError):
        regularized_loss(np.zeros((2, 3, 4)), T.constant(np.zeros((2, 11))))


@given(st.floats(0, 0.1), st.integers(0, 2**32 - 1))
def test_loss_nonnegative_and_linear_in_lambda(lam, seed):
    rng = np.random.default_rng(seed)
    yt, yp = rng.normal(size=(2, 3, 2)), T.constant(rng.normal(size=(2, 6)))
    ws = [T.param(rng.normal(size=(3, 2)))]
    l0 = regularized_loss(yt, yp, ws, 0.0).value[0, 0]
    l1 = regularized_loss(yt, yp, ws, lam).value[0, 0]
    l10 = regularized_loss(yt, yp, ws, 10 * lam).value[0, 0]
    mse = float(((yt.reshape(2, -1) - yp.value) ** 2).mean())
    assert l1 >= 0 and abs(l0 - mse) < 1e-15
    l1_norm = float(np.abs(ws[0].value).sum())
    assert abs((l10 - l1) - 9 * lam * l1_norm) < 1e-12


def test_l1_subgradient_zero_at_zero():
    w = T.param(np.array([[0.0, 2.0, -3.0]]))
    T.backward(regularized_loss(np.zeros((1, 1, 1)), T.constant([[0.0]]), [w], 0.5))
    assert np.array_equal(w.grad, [[0.0, 0.5, -0.5]])


# -- normalization -----------------------------------------------------------

def test_normalize_examples():
    s = NormStats(0.0, 100.0)
    assert normalize(50.0, s) == 0.5
    t = NormStats.from_arrays(np.array([10.0, 20.0, 40.0]))
    assert (t.min_v, t.max_v) == (10.0, 40.0)
    assert normalize(25.0, t) == 0.5
    assert normalize(70.0, t) == 2.0  # out of range stays unclipped
    with pytest.raises(DegenerateStatsError):
        NormStats(1.0, 1.0)


@given(arrays(np.float64, (3, 4, 2), elements=st.floats(-1e3, 1e3)), st.floats(-50, 50),
       st.floats(0.5, 500))
def test_normalize_roundtrip(x, lo, width):
    s = NormStats(lo, lo + width)
    assert np.abs(denormalize(normalize(x, s), s) - x).max() < 1e-12


# -- optimizer ---------------------------------------------------------------

def test_adam_zero_gradient_keeps_params(rng):
    p = {"w": rng.normal(size=(2, 2))}
    before = p["w"].copy()
    adam_step(p, {"w": np.zeros((2, 2))}, AdamState(), 0.1)
    assert np.array_equal(p["w"], before)


def test_adam_constant_gradient_descends():
    p = {"w": np.array([[1.0, 1.0]])}
    st_ = AdamState()
    for _ in range(50):
        adam_step(p, {"w": np.array([[0.3, -2.0]])}, st_, 0.01)
    assert p["w"][0, 0] < 1.0 and p["w"][0, 1] > 1.0


def test_adam_single_step_scalar_oracle():
    g, lr = 0.37, 0.001
    m = (1 - 0.9) * g
    v = (1 - 0.999) * g * g
    expect = 2.0 - lr * (m / (1 - 0.9)) / (math.sqrt(v / (1 - 0.999)) + 1e-8)
    p = {"w": np.array([[2.0]])}
    adam_step(p, {"w": np.array([[g]])}, AdamState(), lr)
    assert abs(p["w"][0, 0] - expect) < 1e-15
    assert abs(p["w"][0, 0] - (2.0 - lr)) < 1e-9  # ~ -lr * sign(g)


def test_adam_rejects_nan():
    with pytest.raises(NumericFaultError):
        adam_step({"w": np.ones((1, 1))}, {"w": np.array([[np.nan]])}, AdamState(), 0.1)
    with pytest.raises(ContractError):
        adam_step({"w": np.ones((1, 1))}, {"w": np.ones((1, 1))}, AdamState(), 0.1, t=0)


def test_clip_by_global_norm():
    grads = {"a": np.array([[3.0]]), "b": np.array([[4.0]])}
    assert clip_by_global_norm(grads, 1.0) == 5.0
    assert abs(math.hypot(grads["a"][0, 0], grads["b"][0, 0]) - 1.0) < 1e-15
    grads = {"a": np.array([[0.3]])}
    clip_by_global_norm(grads, 1.0)
    assert grads["a"][0, 0] == 0.3


# -- config ------------------------------------------------------------------

def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.learning_rate, c.batch_size, c.lambda_reg, c.early_stop_patience) == (1e-3, 32, 0.0015, 10)
    for bad in (dict(learning_rate=0), dict(split=1.0), dict(batch_size=0), dict(lambda_reg=-1),
                dict(hidden=0), dict(model_kind="rnn"), dict(readout="max")):
        with pytest.raises(ContractError):
            TrainConfig(**bad)


# -- fit ---------------------------------------------------------------------

def test_fit_zero_epochs(small_data):
    ds, g = small_data
    cfg = TrainConfig(**SMALL, epochs=0)
    model = build_for(ds, cfg, g)
    before = {k: v.copy() for k, v in model.params.items()}
    res = fit(model, ds, cfg)
    assert res.history == []
    for k in before:
        assert np.array_equal(res.model.params[k], before[k])


def test_fit_empty_dataset(small_data):
    ds, g = small_data
    cfg = TrainConfig(**SMALL, epochs=1)
    with pytest.raises(ContractError):
        fit(build_for(ds, cfg, g), ds.take(slice(0, 0)), cfg)


def test_fit_descends_and_is_deterministic(small_data):
    ds, g = small_data
    cfg = TrainConfig(**SMALL, epochs=6)
    a = train_model(ds, cfg, g)
    b = train_model(ds, cfg, g)
    assert a.history[-1].train_loss < a.history[0].train_loss
    assert [(r.train_loss, r.val_loss) for r in a.history] == \
           [(r.train_loss, r.val_loss) for r in b.history]
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])
    best = min(a.history, key=lambda r: r.val_loss)
    assert a.best_epoch == best.epoch


def test_fit_early_stops(small_data):
    ds, g = small_data
    cfg = TrainConfig(**{**SMALL, "early_stop_patience": 1, "learning_rate": 0.5}, epochs=30)
    res = train_model(ds, cfg, g)
    assert len(res.history) < 30
    assert len(res.history) - res.best_epoch == 1


def test_validation_targets_never_feed_gradients(small_data):
    ds, g = small_data
    cfg = TrainConfig(**SMALL, epochs=2)
    n_train = int(math.floor(cfg.split * len(ds)))
    y = np.array(ds.y)
    y[n_train:] = np.nan
    poisoned = WindowedDataset(ds.x, y, ds.x_mask, ds.y_mask, ds.starts, ds.detector_ids,
                               ds.t_in, ds.t_out)
    res = train_model(poisoned, cfg, g)  # would raise NumericFaultError on NaN gradients
    assert all(math.isfinite(r.train_loss) for r in res.history)
    assert all(np.isfinite(v).all() for v in res.model.params.values())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_reports_numeric_fault(small_data):
    ds, g = small_data
    cfg = TrainConfig(**SMALL, epochs=1)
    x = np.array(ds.x)
    x[0, 0, 0] = np.inf
    bad = WindowedDataset(x, ds.y, ds.x_mask, ds.y_mask, ds.starts, ds.detector_ids, 6, 3)
    with pytest.raises((NumericFaultError, ContractError)):
        train_model(bad, cfg, g)


def test_norm_stats_from_training_split_only(small_data):
    ds, g = small_data
    cfg = TrainConfig(**SMALL, epochs=1)
    res = train_model(ds, cfg, g)
    tr, _ = chronological_split(ds, cfg.split)
    assert res.norm == NormStats.from_arrays(tr.x, tr.y)


def test_history_csv(tmp_path, small_data):
    ds, g = small_data
    res = train_model(ds, TrainConfig(**SMALL, epochs=2), g)
    p = tmp_path / "h.csv"
    write_history_csv(res.history, p)
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "seconds"]
    assert rows[1][0] == "1" and rows[1][3] == ""
    assert float(rows[1][1]) == res.history[0].train_loss
    write_history_csv(res.history, p, record_timing=True)
    assert float(list(csv.reader(p.open()))[1][3]) >= 0


# -- gradient check ----------------------------------------------------------

def _toy(seed=2, kind="gcgru"):
    cfg = ModelConfig(d=4, t_in=3, t_out=2, hidden=3, gc_hidden=3, gc_out=2, kind=kind)
    return build_model(cfg, normalized_adjacency(ring_graph(4)), np.random.default_rng(seed))


def test_gradcheck_passes_and_has_both_passes(rng):
    m = _toy()
    r = gradient_check_model(m, rng.uniform(size=(2, 3, 4)), rng.uniform(size=(2, 2, 4)))
    assert r.passed and r.max_error < 1e-4
    assert set(r.errors) == {"lambda=0", "lambda=0.0015"}


def test_gradcheck_linear_head_only(rng):
    m = _toy()
    for k in m.params:
        if k not in ("w_out", "b_out"):
            m.params[k] = np.zeros_like(m.params[k])
    r = gradient_check_model(m, rng.uniform(size=(2, 3, 4)), rng.uniform(size=(2, 2, 4)))
    assert r.passed


def test_gradcheck_negative_control(rng, monkeypatch):
    good = T.BACKWARD_RULES["hadamard"]

    def broken(node, g):
        ga, gb = good(node, g)
        return ga, (None if gb is None else 1.1 * gb)

    monkeypatch.setitem(T.BACKWARD_RULES, "hadamard", broken)
    r = gradient_check_model(_toy(), rng.uniform(size=(2, 3, 4)), rng.uniform(size=(2, 2, 4)))
    assert not r.passed


# -- grid search -------------------------------------------------------------

def test_expand_grid_limits():
    assert expand_grid({"hidden": [2, 4], "learning_rate": [0.1]}) == \
        [{"hidden": 2, "learning_rate": 0.1}, {"hidden": 4, "learning_rate": 0.1}]
    with pytest.raises(ContractError):
        expand_grid({})
    with pytest.raises(ContractError):
        expand_grid({"bogus": [1]})
    with pytest.raises(ContractError):
        expand_grid({"hidden": list(range(1, 18)), "gc_out": list(range(1, 17))})


def test_grid_search_ranking_and_replay(small_data, tmp_path):
    ds, g = small_data
    cfg = TrainConfig(**SMALL, epochs=2)
    rows = grid_search({"hidden": [2, 4], "learning_rate": [0.01, 0.05]}, ds, cfg, g)
    assert len(rows) == 4
    assert [r.rank for r in rows] == [1, 2, 3, 4]
    assert [r.val_mape for r in rows] == sorted(r.val_mape for r in rows)
    best = rows[0]
    replay_cfg = replace(cfg, **best.params)
    replay = holdout_metrics(train_model(ds, replay_cfg, g).model, ds, replay_cfg)
    assert replay["val_mape"] == best.val_mape
    single = grid_search({"hidden": [4]}, ds, cfg, g)
    direct = holdout_metrics(train_model(ds, replace(cfg, hidden=4), g).model, ds, cfg)
    assert len(single) == 1 and single[0].val_mape == direct["val_mape"]
    p = tmp_path / "grid.csv"
    write_grid_csv(rows, p)
    table = list(csv.reader(p.open()))
    assert table[0] == ["combo_id", "hidden", "learning_rate", "val_mape", "val_mae",
                        "val_rmse", "train_seconds"]
    assert len(table) == 5 and all(r[-1] == "" for r in table[1:])


def test_grid_search_parallel_matches_serial(small_data):
    ds, g = small_data
    cfg = TrainConfig(**SMALL, epochs=1)
    grid = {"hidden": [2, 3]}
    serial = grid_search(grid, ds, cfg, g, jobs=1)
    parallel = grid_search(grid, ds, cfg, g, jobs=2)
    assert [(r.combo_id, r.val_mape) for r in serial] == [(r.combo_id, r.val_mape) for r in parallel]
