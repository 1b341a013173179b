import math

import numpy as np
import pandas as pd
import pytest

from src.evaluation import (
    EvaluationContext,
    MetricError,
    NoValidCellsError,
    SpectrumBandError,
    UndefinedCorrelationError,
    contingency,
    csi_from_counts,
    csi_sedi,
    day_of_cycle_climatology,
    energy_spectrum,
    evaluate_series,
    extreme_thresholds,
    latitude_weights,
    log_spectral_gap,
    mean_spectrum,
    scores_at_lead,
    sedi_from_rates,
    synthesize_power_law_field,
    weighted_acc,
    weighted_rmse_mae,
    write_extremes_csv,
    write_metrics_csv,
    write_spectrum_csv,
)

LATS = np.array([-67.5, -22.5, 22.5, 67.5])


def test_latitude_weights_worked_values(worked_values):
    case = worked_values["latitude_weights"]
    np.testing.assert_allclose(latitude_weights(case["latitudes"]), case["weights"])
    case = worked_values["latitude_weight_equator_three_rows"]
    assert latitude_weights(case["latitudes"])[1] == pytest.approx(case["equator_weight"])
    assert latitude_weights(LATS).mean() == pytest.approx(1.0)


def test_latitude_weights_reject_bad_input():
    with pytest.raises(MetricError):
        latitude_weights([90.0, -90.0])
    with pytest.raises(MetricError):
        latitude_weights([95.0])
    with pytest.raises(MetricError):
        latitude_weights([])


def test_rmse_mae_ignore_masked_cells():
    truth = np.zeros((4, 5))
    pred = truth + 2.0
    mask = np.ones((4, 5), dtype=bool)
    mask[0, 0] = False
    pred[0, 0] = 1e6
    rmse, mae = weighted_rmse_mae(pred, truth, np.ones(4), mask)
    assert rmse == pytest.approx(2.0) and mae == pytest.approx(2.0)
    with pytest.raises(NoValidCellsError):
        weighted_rmse_mae(pred, truth, np.ones(4), np.zeros((4, 5), dtype=bool))
    with pytest.raises(MetricError):
        weighted_rmse_mae(pred, truth[:3], np.ones(4))



def _nested_loop_scores(pred, truth, clim, threshold, latitudes, mask):
    cos = [math.cos(math.radians(lat)) for lat in latitudes]
    weights = [len(cos) * c / sum(cos) for c in cos]
    n = 0
    sq = absolute = ab = aa = bb = 0.0
    tp = fp = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if not mask[i, j]:
                continue
            w = weights[i]
            n += 1
            d = pred[i, j] - truth[i, j]
            sq += w * d * d
            absolute += w * abs(d)
            a, b = pred[i, j] - clim[i, j], truth[i, j] - clim[i, j]
            ab += w * a * b
            aa += w * a * a
            bb += w * b * b
            p_event, t_event = pred[i, j] > threshold[i, j], truth[i, j] > threshold[i, j]
            tp += p_event and t_event
            fp += p_event and not t_event
            fn += t_event and not p_event
    out = {"weights": weights, "rmse": math.sqrt(sq / n), "mae": absolute / n, "acc": ab / math.sqrt(aa * bb),
           "csi": None, "sedi": None}
    if tp + fp + fn:
        eps = 1e-6
        h = min(max(tp / (tp + fn) if tp + fn else 0.0, eps), 1 - eps)
        f = min(max(fp / (fp + tp) if fp + tp else 0.0, eps), 1 - eps)
        out["csi"] = tp / (tp + fp + fn)
        out["sedi"] = ((math.log(f) - math.log(h) - math.log(1 - f) + math.log(1 - h))
                       / (math.log(f) + math.log(h) + math.log(1 - f) + math.log(1 - h)))
    return out


def _masked_case(seed):
    rng = np.random.default_rng(seed)
    truth = rng.standard_normal((8, 16))
    pred = truth + 0.5 * rng.standard_normal((8, 16))
    clim = 0.3 * rng.standard_normal((8, 16))
    threshold = 0.8 + 0.2 * rng.standard_normal((8, 16))
    mask = rng.uniform(size=(8, 16)) > 0.25
    mask[0, 0] = True
    return pred, truth, clim, threshold, mask


GRID_LATS = np.linspace(-78.75, 78.75, 8)


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_nested_loops(seed):
    pred, truth, clim, threshold, mask = _masked_case(seed)
    expected = _nested_loop_scores(pred, truth, clim, threshold, GRID_LATS, mask)
    weights = latitude_weights(GRID_LATS)
    assert np.max(np.abs(weights - expected["weights"])) < 1e-10
    rmse, mae = weighted_rmse_mae(pred, truth, weights, mask)
    assert abs(rmse - expected["rmse"]) < 1e-10
    assert abs(mae - expected["mae"]) < 1e-10
    assert abs(weighted_acc(pred, truth, clim, weights, mask) - expected["acc"]) < 1e-10
    csi, sedi = csi_sedi(pred, truth, threshold, mask)
    if expected["csi"] is None:
        assert csi is None and sedi is None
    else:
        assert abs(csi - expected["csi"]) < 1e-10
        assert abs(sedi - expected["sedi"]) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_masked_cells_never_change_scores(seed):
    pred, truth, clim, threshold, mask = _masked_case(seed)
    weights = latitude_weights(GRID_LATS)
    noise = np.random.default_rng(seed + 50)
    edited = [a.copy() for a in (pred, truth, clim)]
    for a in edited:
        a[~mask] = 1e3 * noise.standard_normal(int((~mask).sum()))
    pred2, truth2, clim2 = edited
    assert weighted_rmse_mae(pred2, truth2, weights, mask) == weighted_rmse_mae(pred, truth, weights, mask)
    assert weighted_acc(pred2, truth2, clim2, weights, mask) == weighted_acc(pred, truth, clim, weights, mask)
    assert csi_sedi(pred2, truth2, threshold, mask) == csi_sedi(pred, truth, threshold, mask)

def test_acc_bounds_and_degenerate_anomaly(rng):
    truth = rng.standard_normal((4, 5))
    clim = np.zeros((4, 5))
    weights = latitude_weights(LATS)
    assert weighted_acc(truth, truth, clim, weights) == pytest.approx(1.0)
    assert weighted_acc(-truth, truth, clim, weights) == pytest.approx(-1.0)
    with pytest.raises(UndefinedCorrelationError):
        weighted_acc(clim, truth, clim, weights)


def test_csi_and_sedi_worked_values(worked_values):
    c = worked_values["csi"]
    assert csi_from_counts(c["tp"], c["fp"], c["fn"]) == pytest.approx(c["expected"])
    assert csi_from_counts(0, 0, 0) is None
    s = worked_values["sedi"]
    assert sedi_from_rates(s["hit_rate"], s["false_alarm"]) == pytest.approx(s["expected"], abs=1e-6)


def test_sedi_is_finite_at_perfect_rates():
    assert np.isfinite(sedi_from_rates(1.0, 0.0))
    assert sedi_from_rates(1.0, 0.0) == pytest.approx(1.0, abs=1e-3)


def test_contingency_counts():
    truth = np.array([[1.0, 1.0, 0.0, 0.0]])
    pred = np.array([[1.0, 0.0, 1.0, 0.0]])
    counts = contingency(pred, truth, np.full((1, 4), 0.5))
    assert counts == {"tp": 1, "fp": 1, "fn": 1, "tn": 1}
    assert csi_sedi(pred, truth, np.full((1, 4), 0.5))[0] == pytest.approx(1.0 / 3.0)
    assert csi_sedi(pred, truth, np.full((1, 4), 5.0)) == (None, None)


def test_extreme_thresholds_are_per_cell_quantiles():
    train = np.arange(101, dtype=np.float64)[:, None, None, None] * np.ones((1, 2, 3, 4))
    thresholds = extreme_thresholds(train, 0.95)
    assert thresholds.shape == (2, 3, 4)
    np.testing.assert_allclose(thresholds, 95.0)
    with pytest.raises(MetricError):
        extreme_thresholds(train, 1.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_power_law_field_recovers_slope(seed):
    field = synthesize_power_law_field(64, 64, slope=-3.0, seed=seed)
    assert np.max(np.abs(field)) > 0
    spectrum = energy_spectrum(field, band=(3, 16))
    assert spectrum.k[0] == 1 and spectrum.k_max == 32
    assert spectrum.slope == pytest.approx(-3.0, abs=0.15)
    np.testing.assert_allclose(spectrum.power[1:] / spectrum.power[:-1], (spectrum.k[1:] / spectrum.k[:-1]) ** -3.0, rtol=1e-8)


def test_spectrum_power_sums_to_variance(rng):
    field = rng.standard_normal((16, 32))
    spectrum = energy_spectrum(field)
    assert spectrum.total_power == pytest.approx(field.var(), rel=1e-10)
    assert np.all(spectrum.power >= 0)


def test_spectrum_rejects_small_fields_and_bad_bands(rng):
    with pytest.raises(MetricError):
        energy_spectrum(rng.standard_normal((4, 16)))
    with pytest.raises(SpectrumBandError):
        energy_spectrum(rng.standard_normal((16, 16)), band=(2, 9))
    with pytest.raises(SpectrumBandError):
        energy_spectrum(rng.standard_normal((16, 16)), band=(4, 4))


def test_mean_spectrum_and_gap(rng):
    field = rng.standard_normal((16, 16))
    single = energy_spectrum(field)
    mean = mean_spectrum([field, field])
    np.testing.assert_allclose(mean.power, single.power)
    assert log_spectral_gap(mean, single) == pytest.approx(0.0)
    assert log_spectral_gap(energy_spectrum(10.0 * field), single) == pytest.approx(2.0)
    with pytest.raises(MetricError):
        mean_spectrum([])
    with pytest.raises(SpectrumBandError):
        mean_spectrum([field], band=(1, 12))


def test_day_of_cycle_climatology():
    seq = np.stack([np.full((1, 2, 2), float(t % 2)) for t in range(6)])
    clim = day_of_cycle_climatology(seq, cycle_length=2, start_day=1)
    assert np.all(clim[1] == 0.0) and np.all(clim[0] == 1.0)


def make_context(n_vars=1, thresholds=10.0):
    return EvaluationContext(
        variables=tuple(f"A{v}" for v in range(n_vars)),
        latitudes=LATS,
        masks=np.ones((n_vars, 4, 5), dtype=bool),
        climatology=np.zeros((2, n_vars, 4, 5)),
        thresholds=np.full((n_vars, 4, 5), thresholds),
    )


def test_truncated_traces_drop_out_of_lead_averages(rng):
    truth = rng.standard_normal((3, 1, 4, 5))
    perfect = truth.copy()
    truncated = truth[:2] + 1.0
    report = evaluate_series([perfect, truncated], [truth, truth], [0, 1], make_context(), horizon=2, label="coupled")
    np.testing.assert_allclose(report.rmse[0], [0.5, 0.5, 0.0])
    assert report.acc[0, 2] == pytest.approx(1.0)
    assert np.all(np.isnan(report.csi))
    assert report.n_ics == 2
    assert report.mean_rmse() == pytest.approx(0.25)
    assert report.mean_rmse(max_lead=1) == pytest.approx(0.5)



def test_scores_at_lead_average_variables_and_reaching_traces():
    truth = np.zeros((3, 2, 4, 5))
    offset = np.array([1.0, 3.0])[None, :, None, None]
    reaching = truth + offset
    truncated = truth[:2] + 10.0
    context = make_context(n_vars=2)
    assert scores_at_lead([reaching, truncated], [truth, truth], context, 2, [1]) == pytest.approx((3.0, 3.0))
    assert scores_at_lead([reaching, truncated], [truth, truth], context, 2) == pytest.approx((2.0, 2.0))
    assert scores_at_lead([reaching, truncated], [truth, truth], context, 1)[1] == pytest.approx(6.0)
    assert all(math.isnan(v) for v in scores_at_lead([truncated], [truth], context, 2))

def test_extreme_scores_use_pooled_counts(rng):
    truth = np.zeros((2, 1, 4, 5))
    truth[:, 0, 0, :2] = 1.0
    pred = np.zeros_like(truth)
    pred[:, 0, 0, :1] = 1.0
    report = evaluate_series([pred], [truth], [0], make_context(thresholds=0.5), horizon=1)
    assert report.csi[0, 1] == pytest.approx(0.5)
    assert np.isfinite(report.sedi[0, 1])


def test_csv_writers(tmp_path, rng):
    truth = rng.standard_normal((3, 2, 4, 5))
    report = evaluate_series([truth + 0.1], [truth], [0], make_context(n_vars=2), horizon=2, label="uncorrected")
    metrics = pd.read_csv(write_metrics_csv([report], str(tmp_path / "metrics.csv")))
    assert list(metrics.columns) == ["series", "variable", "lead", "rmse", "mae", "acc"]
    assert len(metrics) == 2 * 3
    assert set(metrics["series"]) == {"uncorrected"}

    extremes = pd.read_csv(write_extremes_csv([report], str(tmp_path / "extremes.csv")))
    assert list(extremes.columns) == ["series", "variable", "threshold_quantile", "lead", "csi", "sedi"]
    assert (extremes["lead"].astype(str) == "mean").sum() == 2

    spectrum = energy_spectrum(rng.standard_normal((16, 16)))
    frame = pd.read_csv(write_spectrum_csv({"truth": spectrum}, str(tmp_path / "spectrum.csv")))
    assert list(frame.columns) == ["k", "power", "series"]
    assert frame["k"].tolist() == list(range(1, 9))
