import json

import numpy as np
import pandas as pd
import pytest

from gdlqueue.dataset import Dataset
from gdlqueue.metrics import error_metrics, mad
from gdlqueue.model import ModelConfig, init_model
from gdlqueue.training import (
    DivergenceDetected, Predictor, TrainConfig, approach_lanes, evaluate, liu_windows,
    save_plot_rows, train,
)

TINY = ModelConfig(in_features=8, gat_width=4, dense_width=4, hidden=4)


def _toy(n_sims=10, lanes=3, t=5, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(n_sims, t, lanes, 8))
    X[..., 6] = 1.0
    X[:, ::2, :2, 6] = 0.0  # lanes 0 and 1 are signalised, lane 2 is an exit
    Y = np.stack([20 * X[..., 0] + 5 * X[..., 7], 3 * X[..., 3]], axis=-1)
    Y[:, :, 2] = 0.0
    return Dataset(X, Y, [f"l{i}" for i in range(lanes)], runs=[f"r{i}" for i in range(n_sims)])


A3 = np.array([[1.0, 0, 1], [0, 1, 1], [0, 0, 1]])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(split=(0.5, 0.2, 0.2))


def test_zero_learning_rate_keeps_parameters():
    ds = _toy()
    m = init_model(TINY, 1)
    before = m.params.copy()
    res = train(m, ds.subset(range(8)), ds.subset([8]), A3,
                TrainConfig(learning_rate=0.0, epochs=3, l2=0.0, dropout=0.0))
    assert len({h["val_loss"] for h in res.history}) == 1
    assert len({round(h["train_loss"], 12) for h in res.history}) == 1
    for name, t in res.predictor.model.params.items():
        np.testing.assert_array_equal(t.value, before[name].value)


def test_training_is_deterministic_and_lowers_loss():
    ds = _toy()
    cfg = TrainConfig(learning_rate=1e-2, epochs=6, seed=3)
    a = train(TINY, ds.subset(range(8)), ds.subset([8]), A3, cfg)
    b = train(TINY, ds.subset(range(8)), ds.subset([8]), A3, cfg)
    assert a.history == b.history
    assert a.history[-1]["train_loss"] < a.history[0]["train_loss"]
    assert 1 <= a.best_epoch <= 6
    best_val = min(h["val_loss"] for h in a.history)
    assert a.history[a.best_epoch - 1]["val_loss"] == best_val


def test_width_mismatch_rejected():
    ds = _toy()
    with pytest.raises(ValueError):
        train(ModelConfig(in_features=7, gat_width=4, dense_width=4, hidden=4),
              ds.subset(range(8)), ds.subset([8]), A3, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(TINY, ds.subset(range(8)), ds.subset([8]), np.eye(4), TrainConfig(epochs=1))


def test_divergence_restores_last_good_parameters():
    ds = _toy()
    ds.Y[3, 2, 0, 0] = np.nan
    m = init_model(TINY, 0)
    start = m.params.copy()
    with pytest.raises(DivergenceDetected) as info:
        train(m, ds.subset(range(8)), ds.subset([8]), A3, TrainConfig(epochs=2))
    assert info.value.checkpoint is not None
    for name, t in m.params.items():
        np.testing.assert_array_equal(t.value, start[name].value)


def test_checkpoint_round_trip(tmp_path):
    ds = _toy()
    res = train(TINY, ds.subset(range(8)), ds.subset([8]), A3, TrainConfig(epochs=2))
    res.predictor.save(tmp_path / "m.json", res.history)
    back, history = Predictor.load(tmp_path / "m.json")
    assert history == res.history
    assert back.features == res.predictor.features
    assert back.train_max_nveh == res.predictor.train_max_nveh
    np.testing.assert_allclose(back.predict(ds.X[:2], A3), res.predictor.predict(ds.X[:2], A3),
                               rtol=0, atol=1e-12)


# --------------------------------------------------------------------------
# evaluation


def test_approach_lanes_from_signal_feature():
    assert approach_lanes(_toy()) == [0, 1]


def test_oracle_predictions_have_zero_error():
    ds = _toy()
    rep = evaluate(ds.Y.copy(), ds, liu=ds.Y[..., 0])
    assert rep.lanes == ["l0", "l1"]
    assert rep.network_mae_dl == 0.0 and rep.network_mae_liu == 0.0
    assert rep.network_mae_nveh == 0.0
    assert rep.instability_count == 0


def test_report_matches_direct_metrics():
    ds = _toy()
    rng = np.random.default_rng(5)
    pred = ds.Y + rng.normal(0, 2, ds.Y.shape)
    liu = ds.Y[..., 0] + 4.0
    rep = evaluate(pred, ds, liu=liu)
    per_lane = [error_metrics(ds.Y[:, :, i, 0], pred[:, :, i, 0]).mae for i in (0, 1)]
    assert rep.network_mae_dl == pytest.approx(np.mean(per_lane))
    assert rep.mad_dl == pytest.approx(mad([row["dl_mae"] for row in rep.comparison()]))
    assert rep.network_mae_liu == pytest.approx(4.0)
    assert rep.mad_liu == pytest.approx(0.0, abs=1e-12)


def test_instability_counts_negative_and_runaway_counts():
    ds = _toy()
    pred = ds.Y.copy()
    pred[0, 0, 0, 1] = -1.0
    pred[0, 0, 1, 1] = 100.0
    pred[0, 0, 2, 1] = -5.0  # exit lane: not counted
    rep = evaluate(pred, ds, liu=ds.Y[..., 0], train_max_nveh=10.0)
    assert rep.instability_count == 2
    assert rep.unstable_lanes == ["l0", "l1"]
    assert evaluate(pred, ds, liu=ds.Y[..., 0]).instability_count == 1


def test_liu_windows_prefers_one_hertz_series():
    ds = _toy(n_sims=2, t=3)
    np.testing.assert_array_equal(liu_windows(ds), ds.X[..., 7])
    ds.window = 2
    ds.liu_1hz = np.arange(2 * 3 * 6, dtype=float).reshape(2, 3, 6)
    w = liu_windows(ds)
    assert w.shape == (2, 3, 3)
    assert w[1, 0, 2] == pytest.approx((ds.liu_1hz[1, 2, 0] + ds.liu_1hz[1, 2, 1]) / 2)


def test_report_and_plot_files(tmp_path):
    ds = _toy(n_sims=2)
    rep = evaluate(ds.Y, ds, liu=ds.Y[..., 0])
    rep.save(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["network"]["dl_queue_mae"] == 0.0
    assert [r["lane"] for r in d["lanes"]] == ["l0", "l1"]
    save_plot_rows(tmp_path / "p.csv", ds.Y, ds)
    df = pd.read_csv(tmp_path / "p.csv")
    assert len(df) == 2 * 2 * ds.Y.shape[1]
    np.testing.assert_allclose(df["queue_true"], df["queue_dl"])


def test_liu_as_prediction_matches_liu_columns():
    ds = _toy()
    rng = np.random.default_rng(8)
    liu = ds.Y[..., 0] + rng.normal(0, 3, ds.Y.shape[:3])
    pred = ds.Y.copy()
    pred[..., 0] = liu
    rep = evaluate(pred, ds, liu=liu)
    for row in rep.comparison():
        assert (row["dl_mae"], row["dl_mape"]) == (row["liu_mae"], row["liu_mape"])
