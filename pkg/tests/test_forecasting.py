import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dearfed import autodiff as ad
from dearfed import forecasting as fc
from dearfed.datagen import DataError, FleetSpec, LoadDataset, generate_fleet, seasonal_split


def make_dataset(hours, start="2023-03-06T00", seed=0, base=100.0):
    rng = np.random.default_rng(seed)
    ts = np.datetime64(start, "h") + np.arange(hours)
    loads = base * (1.0 + 0.3 * np.cos(2 * np.pi * np.arange(hours) / 24.0)) \
        + rng.normal(0, 1.0, hours)
    return LoadDataset("c", ts, np.maximum(loads, 1.0))


def test_25_points_make_exactly_one_window():
    ds = make_dataset(25)
    ws = fc.build_windows(ds, fc.WindowingConfig(l_back=24, l_ahead=1))
    assert len(ws) == 1
    assert ws[0].features.shape == (24, 5)
    assert ws[0].target_kw == ds.loads[24]


@settings(max_examples=30, deadline=None)
@given(extra=st.integers(1, 200), l_back=st.integers(1, 48), l_ahead=st.integers(1, 24))
def test_window_count_formula(extra, l_back, l_ahead):
    total = l_back + extra  # series length T+1 with T = l_back + extra - 1
    ds = make_dataset(total)
    ws = fc.build_windows(ds, fc.WindowingConfig(l_back=l_back, l_ahead=l_ahead))
    t_last = total - 1
    assert len(ws) == (t_last - l_back) // l_ahead + 1


def test_monday_day_of_week_encoding():
    ds = make_dataset(48, start="2023-03-06T00")  # a Monday
    ws = fc.build_windows(ds, fc.WindowingConfig(l_back=24, l_ahead=1))
    first = ws[0].features
    np.testing.assert_allclose(first[:, 2], 0.0, atol=1e-12)  # sin
    np.testing.assert_allclose(first[:, 3], 1.0, atol=1e-12)  # cos


def test_constant_series_normalizes_to_midpoint_with_warning():
    ts = np.datetime64("2023-03-06T00", "h") + np.arange(30)
    ds = LoadDataset("c", ts, np.full(30, 55.0))
    with pytest.warns(UserWarning, match="degenerates"):
        stats = fc.compute_norm_stats([ds])
    ws = fc.build_windows(ds, fc.WindowingConfig(), stats)
    np.testing.assert_array_equal(ws.features[:, :, 0], 0.5)


def test_gap_in_series_is_rejected():
    ts = np.concatenate([
        np.datetime64("2023-03-06T00", "h") + np.arange(24),
        np.datetime64("2023-03-07T02", "h") + np.arange(10),
    ])
    with pytest.raises(DataError, match="2023-03-07T00"):
        LoadDataset("c", ts, np.ones(34))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_feature_ranges_hold_on_random_fleets(seed):
    fleet = generate_fleet(FleetSpec(n_clients=1, span_days=10, noise_frac=0.05, seed=seed))
    ws = fc.build_windows(fleet[0], fc.WindowingConfig())
    f = ws.features
    assert np.all((f[:, :, 0] >= 0) & (f[:, :, 0] <= 1))   # load
    assert np.all((f[:, :, 1] >= 0) & (f[:, :, 1] <= 1))   # hour index
    assert np.all((f[:, :, 2] >= -1) & (f[:, :, 2] <= 1))  # dow sin
    assert np.all((f[:, :, 3] >= -1) & (f[:, :, 3] <= 1))  # dow cos
    assert set(np.unique(f[:, :, 4])) <= {0.0, 1.0}        # holiday mark


def test_frozen_stats_clip_out_of_range_test_data():
    train = make_dataset(100, seed=1)
    stats = fc.compute_norm_stats([train])
    hotter = LoadDataset("c", train.timestamps, train.loads * 2.0)
    ws = fc.build_windows(hotter, fc.WindowingConfig(), stats)
    assert ws.features[:, :, 0].max() == 1.0


def test_flatten_unflatten_round_trip_is_bit_identical():
    model = fc.ForecastModel(hidden=6, seed=3)
    params = model.to_model_params()
    other = fc.ForecastModel(hidden=6, seed=99)
    other.load_model_params(params)
    np.testing.assert_array_equal(other.net.get_vector(), params.values)
    np.testing.assert_array_equal(other.to_model_params().values, params.values)


def test_parameter_count_is_architecture_determined():
    a = fc.ForecastModel(hidden=8, seed=0)
    b = fc.ForecastModel(hidden=8, seed=12345)
    assert a.d == b.d
    assert a.to_model_params().layout == b.to_model_params().layout


def test_zero_epochs_leaves_model_unchanged():
    ds = make_dataset(26 + 24)
    ws = fc.build_windows(ds, fc.WindowingConfig())
    model = fc.ForecastModel(hidden=4, seed=0)
    before = model.net.get_vector()
    _, loss = fc.train_local(model, ws, epochs=0, lr=1e-4)
    assert np.isfinite(loss)
    np.testing.assert_array_equal(model.net.get_vector(), before)


def test_one_epoch_improves_easy_series():
    ds = make_dataset(24 * 14, seed=2)
    ws = fc.build_windows(ds, fc.WindowingConfig())
    model = fc.ForecastModel(hidden=8, seed=0)
    _, before = fc.train_local(model, ws, epochs=0, lr=1e-4)
    _, after = fc.train_local(model, ws, epochs=1, lr=1e-4, seed=1)
    assert after <= before


def test_training_is_bit_deterministic():
    ds = make_dataset(24 * 7, seed=3)
    ws = fc.build_windows(ds, fc.WindowingConfig())
    runs = []
    for _ in range(2):
        model = fc.ForecastModel(hidden=4, seed=7)
        model, loss = fc.train_local(model, ws, epochs=2, lr=1e-3, seed=11)
        runs.append((loss, model.net.get_vector()))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_zero_head_predicts_training_midpoint():
    ds = make_dataset(24 * 3, seed=4)
    ws = fc.build_windows(ds, fc.WindowingConfig())
    model = fc.ForecastModel(hidden=4, seed=0)
    model.head_w.data[...] = 0.0
    model.head_b.data[...] = 0.0
    preds = fc.predict(model, ws)
    midpoint = (ws.stats.load_min + ws.stats.load_max) / 2.0
    np.testing.assert_allclose(preds, midpoint, rtol=1e-12)
    single = fc.predict(model, ws[0])
    assert single == pytest.approx(midpoint, rel=1e-12)


def test_prediction_is_deterministic():
    ds = make_dataset(24 * 3, seed=5)
    ws = fc.build_windows(ds, fc.WindowingConfig())
    model = fc.ForecastModel(hidden=4, seed=1)
    np.testing.assert_array_equal(fc.predict(model, ws), fc.predict(model, ws))


def test_forward_rejects_bad_shapes():
    model = fc.ForecastModel(hidden=4, seed=0)
    with pytest.raises(ad.ShapeError):
        model.forward(np.zeros((2, 24, 4)))


def test_trained_model_beats_5_percent_on_noise_free_series():
    spec = FleetSpec(n_clients=1, span_days=30, noise_frac=0.0, seed=6)
    ds = generate_fleet(spec)[0]
    _, train, test = seasonal_split(ds)[0]
    stats = fc.compute_norm_stats([train])
    ws_tr = fc.build_windows(train, fc.WindowingConfig(), stats)
    ws_te = fc.build_windows(test, fc.WindowingConfig(), stats)
    model = fc.ForecastModel(hidden=16, seed=0)
    for epoch in range(40):
        fc.train_local(model, ws_tr, epochs=1, lr=1e-3, seed=epoch)
    assert fc.mape(ws_te.targets_kw, fc.predict(model, ws_te)) < 5.0


# -- metrics -------------------------------------------------------------------


def test_mape_exact_cases():
    assert fc.mape(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
    assert fc.mape(np.array([100.0, 200.0]), np.array([110.0, 180.0])) == pytest.approx(10.0)


def test_mape_rejects_zero_actuals():
    with pytest.raises(ZeroDivisionError):
        fc.mape(np.array([0.0, 1.0]), np.array([1.0, 1.0]))


def test_mape_rejects_length_mismatch_and_empty():
    with pytest.raises(ValueError):
        fc.mape(np.array([1.0]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        fc.mape(np.array([]), np.array([]))


def test_rmse_exact_cases():
    assert fc.rmse(np.array([1.0, 1.0]), np.array([1.0, 1.0])) == 0.0
    assert fc.rmse(np.array([1.0, 1.0]), np.array([2.0, 2.0])) == pytest.approx(1.0)


def test_rmse_rejects_empty():
    with pytest.raises(ValueError):
        fc.rmse(np.array([]), np.array([]))


@settings(max_examples=20, deadline=None)
@given(
    scale=st.floats(0.1, 50, allow_nan=False),
    data=st.data(),
)
def test_metric_scale_equivariance_and_positivity(scale, data):
    n = data.draw(st.integers(1, 8))
    y = np.array(data.draw(st.lists(st.floats(1, 100), min_size=n, max_size=n)))
    y_hat = np.array(data.draw(st.lists(st.floats(1, 100), min_size=n, max_size=n)))
    assert fc.rmse(scale * y, scale * y_hat) == pytest.approx(scale * fc.rmse(y, y_hat))
    assert fc.mape(scale * y, scale * y_hat) == pytest.approx(fc.mape(y, y_hat))
    assert fc.mape(y, y_hat) >= 0.0
    assert fc.rmse(y, y_hat) >= 0.0
    if not np.array_equal(y, y_hat):
        assert fc.rmse(y, y_hat) > 0.0


def test_metrics_zero_iff_equal():
    y = np.array([5.0, 6.0])
    assert fc.mape(y, y.copy()) == 0.0 and fc.rmse(y, y.copy()) == 0.0
    assert fc.mape(y, y + 0.1) > 0.0 and fc.rmse(y, y + 0.1) > 0.0
