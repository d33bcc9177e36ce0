import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dearfed import forecasting as fc
from dearfed.datagen import FleetSpec, LoadDataset, generate_fleet
from dearfed.defects import (DefectMark, DefectSpec, affected_clients, defect_mark,
                             inject_comm_noise, inject_dia, inject_mixed)
from dearfed.params import ModelParams, layout_from_shapes


def make_dataset(hours=1000, seed=0):
    ts = np.datetime64("2023-03-01T00", "h") + np.arange(hours)
    loads = np.random.default_rng(seed).uniform(50, 150, hours)
    return LoadDataset("c", ts, loads)


def vector_params(values):
    values = np.asarray(values, dtype=np.float64)
    return ModelParams(values, layout_from_shapes([("w", values.shape)]))


# -- data integrity attack -------------------------------------------------------


def test_dia_zero_percent_is_identity():
    ds = make_dataset()
    out = inject_dia(ds, 0.0, 30.0, 50.0, seed=1)
    np.testing.assert_array_equal(out.loads, ds.loads)


def test_dia_alters_exactly_floor_k_percent_points():
    ds = make_dataset(1000)
    out = inject_dia(ds, 30.0, 30.0, 50.0, seed=2)
    changed = np.flatnonzero(out.loads != ds.loads)
    assert changed.size == 300
    untouched = np.setdiff1d(np.arange(1000), changed)
    np.testing.assert_array_equal(out.loads[untouched], ds.loads[untouched])


def test_dia_multiplies_by_one_plus_percent():
    ts = np.datetime64("2023-03-01T00", "h") + np.arange(10)
    ds = LoadDataset("c", ts, np.full(10, 100.0))
    out = inject_dia(ds, 100.0, 30.0, 0.0, seed=3)  # sigma 0: p = 30 exactly
    np.testing.assert_allclose(out.loads, 130.0)


def test_dia_is_deterministic_and_pure():
    ds = make_dataset(500, seed=4)
    snapshot = ds.loads.copy()
    a = inject_dia(ds, 20.0, 30.0, 50.0, seed=5)
    b = inject_dia(ds, 20.0, 30.0, 50.0, seed=5)
    np.testing.assert_array_equal(a.loads, b.loads)
    np.testing.assert_array_equal(ds.loads, snapshot)


def test_dia_clamps_above_001():
    ts = np.datetime64("2023-03-01T00", "h") + np.arange(50)
    ds = LoadDataset("c", ts, np.full(50, 10.0))
    out = inject_dia(ds, 100.0, -200.0, 0.0, seed=6)  # factor -1: would go negative
    assert np.all(out.loads >= 0.01)


def test_dia_range_validation():
    with pytest.raises(ValueError):
        inject_dia(make_dataset(10), 150.0, 0.0, 0.0, seed=0)


# -- communication noise ----------------------------------------------------------


def test_comm_noise_at_zero_db_doubles():
    out = inject_comm_noise(vector_params([1.0]), 0.0)
    assert out.values[0] == 2.0


def test_comm_noise_at_30_db():
    out = inject_comm_noise(vector_params([1.0]), 30.0)
    assert out.values[0] == pytest.approx(1.001, abs=1e-15)


def test_comm_noise_keeps_zeros():
    out = inject_comm_noise(vector_params([0.0, 1.0, 0.0]), 10.0)
    assert out.values[0] == 0.0 and out.values[2] == 0.0


def test_comm_noise_infinite_snr_is_identity():
    w = vector_params([0.5, -1.25, 3.0])
    out = inject_comm_noise(w, math.inf)
    np.testing.assert_array_equal(out.values, w.values)


@settings(max_examples=30, deadline=None)
@given(snr=st.floats(0, 60, allow_nan=False), n=st.integers(1, 32), seed=st.integers(0, 999))
def test_comm_noise_relative_norm_is_exact(snr, n, seed):
    rng = np.random.default_rng(seed)
    w = vector_params(rng.normal(size=n))
    if np.linalg.norm(w.values) == 0.0:
        return
    out = inject_comm_noise(w, snr)
    rel = np.linalg.norm(out.values - w.values) / np.linalg.norm(w.values)
    assert rel == pytest.approx(10.0 ** (-snr / 10.0), abs=1e-15)


def test_comm_noise_rejects_non_finite():
    with pytest.raises(ValueError):
        inject_comm_noise(vector_params([np.inf]), 10.0)


# -- mixed -------------------------------------------------------------------------


def test_mixed_with_sentinels_is_identity():
    ds = make_dataset(100, seed=7)
    w = vector_params([1.0, 2.0])
    spec = DefectSpec(kind="mixed", p_m=0.5, k_percent=0.0, snr_db=math.inf)
    out_ds, out_w = inject_mixed(ds, w, spec, seed=8)
    np.testing.assert_array_equal(out_ds.loads, ds.loads)
    np.testing.assert_array_equal(out_w.values, w.values)


def test_mixed_equals_sequential_composition():
    ds = make_dataset(200, seed=9)
    w = vector_params(np.linspace(-1, 1, 11))
    spec = DefectSpec(kind="mixed", p_m=0.5, k_percent=30.0, mu_a=30.0, sigma_a=50.0, snr_db=30.0)
    out_ds, out_w = inject_mixed(ds, w, spec, seed=10)
    np.testing.assert_array_equal(
        out_ds.loads, inject_dia(ds, 30.0, 30.0, 50.0, seed=10).loads)
    np.testing.assert_array_equal(out_w.values, inject_comm_noise(w, 30.0).values)


def test_mixed_requires_mixed_kind():
    with pytest.raises(ValueError):
        inject_mixed(make_dataset(10), vector_params([1.0]), DefectSpec(kind="dia"), 0)


def test_defect_spec_validation():
    with pytest.raises(ValueError):
        DefectSpec(kind="weird")
    with pytest.raises(ValueError):
        DefectSpec(kind="dia", k_percent=120.0)
    with pytest.raises(ValueError):
        DefectSpec(kind="dia", p_m=1.5)


def test_affected_clients_size_and_stability():
    spec = DefectSpec(kind="dia", p_m=0.2, k_percent=30.0)
    got = affected_clients(spec, 20, seed=3)
    assert len(got) == 4
    assert got == affected_clients(spec, 20, seed=3)
    assert affected_clients(DefectSpec(), 20, seed=3) == frozenset()


# -- defect marks -------------------------------------------------------------------


def make_validation_set(target_kw, midpoint_kw, n=8):
    """Windows whose zero-head prediction is exactly `midpoint_kw`."""
    stats = fc.NormStats(load_min=0.0, load_max=2.0 * midpoint_kw, idx_min=0, idx_max=1)
    features = np.zeros((n, 4, 5))
    targets = np.full(n, target_kw)
    return fc.WindowSet(features, targets, stats)


def make_zero_head_model():
    model = fc.ForecastModel(hidden=4, cfg=fc.WindowingConfig(l_back=4), seed=0)
    model.head_w.data[...] = 0.0
    model.head_b.data[...] = 0.0
    return model


def test_mark_is_one_minus_accuracy():
    model = make_zero_head_model()
    # prediction 90 kW on targets 100 kW -> MAPE 10% -> acc 0.9 -> mark 0.1
    val = make_validation_set(target_kw=100.0, midpoint_kw=90.0)
    mark = defect_mark(model.to_model_params(), model, val)
    assert mark.value == pytest.approx(0.1, abs=1e-12)


def test_perfect_model_gets_mark_zero():
    model = make_zero_head_model()
    val = make_validation_set(target_kw=100.0, midpoint_kw=100.0)
    assert defect_mark(model.to_model_params(), model, val).value == 0.0


def test_mark_clamps_to_one_for_terrible_models():
    model = make_zero_head_model()
    val = make_validation_set(target_kw=10.0, midpoint_kw=100.0)  # MAPE 900%
    assert defect_mark(model.to_model_params(), model, val).value == 1.0


def test_non_finite_predictions_get_worst_mark():
    model = make_zero_head_model()
    val = make_validation_set(target_kw=100.0, midpoint_kw=90.0)
    broken = model.to_model_params().copy()
    broken.values[:] = 1e300
    assert defect_mark(broken, model, val).value == 1.0


def test_mark_restores_model_parameters():
    model = make_zero_head_model()
    val = make_validation_set(target_kw=100.0, midpoint_kw=90.0)
    before = model.net.get_vector()
    other = model.to_model_params().copy()
    other.values += 0.5
    defect_mark(other, model, val)
    np.testing.assert_array_equal(model.net.get_vector(), before)


def test_mark_range_is_enforced():
    with pytest.raises(ValueError):
        DefectMark(1.2)
    with pytest.raises(ValueError):
        DefectMark(-0.1)


def test_noised_model_marks_worse_than_clean_on_trained_forecaster():
    fleet = generate_fleet(FleetSpec(n_clients=1, span_days=20, noise_frac=0.01, seed=11))
    ws = fc.build_windows(fleet[0], fc.WindowingConfig())
    model = fc.ForecastModel(hidden=8, seed=2)
    for epoch in range(10):
        fc.train_local(model, ws, epochs=1, lr=1e-3, seed=epoch)
    clean = model.to_model_params()
    noised = inject_comm_noise(clean, 0.0)  # doubles every parameter
    clean_mark = defect_mark(clean, model, ws)
    noisy_mark = defect_mark(noised, model, ws)
    assert noisy_mark.value > clean_mark.value
