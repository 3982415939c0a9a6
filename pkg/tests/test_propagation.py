from __future__ import annotations

import math
import random

import pytest

from meterbeacon.propagation import (
    BuildingGeometry, CalibrationError, FitError, IndoorSample, PathLossModel,
    attenuation_over, calibrate_outdoor, fit_model, fit_snr_model,
    load_indoor_dataset, max_floors, max_range_m, predict_rssi, reachable,
)

# Least-squares oracle (normal equations run on the fixture before the
# main build) froze these values:
SF7_SLOPE = -2.505120
SF7_INTERCEPT = -65.6414
SF7_RMSE = 4.1577


@pytest.fixture(scope="module")
def dataset():
    return load_indoor_dataset()


@pytest.fixture(scope="module")
def sf7_fit(dataset):
    return fit_model(dataset.select(7), kind="linear")


# ------------------------------------------------------------------ dataset

def test_dataset_shape(dataset):
    assert len(dataset.samples) == 57
    assert dataset.spreading_factors == (7, 9, 11)
    for sf in (7, 9, 11):
        rows = dataset.select(sf)
        assert len(rows) == 19
        assert {r.floor for r in rows} == set("XABCDEF")


def test_dataset_survey_endpoints(dataset):
    sf7 = {r.distance_m: r.rssi_dbm for r in dataset.select(7)}
    assert sf7[0.0] == -61.16
    assert sf7[20.0] == -112.10


# ------------------------------------------------------------------ fitting

def test_sf7_linear_fit_matches_oracle(sf7_fit):
    assert sf7_fit.slope_db_per_m == pytest.approx(SF7_SLOPE, abs=1e-4)
    assert sf7_fit.intercept_dbm == pytest.approx(SF7_INTERCEPT, abs=1e-3)
    assert sf7_fit.residual_rmse_db == pytest.approx(SF7_RMSE, abs=1e-3)


def test_fit_two_collinear_points_zero_residual():
    samples = (IndoorSample(0.0, "X", 7, -60.0, 8.0), IndoorSample(10.0, "C", 7, -85.0, 8.0))
    model = fit_model(samples, kind="linear")
    assert model.residual_rmse_db == pytest.approx(0.0, abs=1e-9)
    assert model.slope_db_per_m == pytest.approx(-2.5)


def test_sf9_fit_rmse_under_5db(dataset):
    assert fit_model(dataset.select(9), kind="linear").residual_rmse_db < 5.0


def test_fit_degenerate_distances(dataset):
    same = tuple(IndoorSample(5.0, "B", 7, r, 8.0) for r in (-70.0, -75.0, -80.0))
    with pytest.raises(FitError):
        fit_model(same, kind="linear")
    with pytest.raises(FitError):
        fit_model(dataset.select(7)[:1], kind="linear")


def test_fit_optimality_perturbation_never_improves(dataset, sf7_fit):
    points = [(s.distance_m, s.rssi_dbm) for s in dataset.select(7)]

    def ssr(intercept, slope):
        return sum((r - (intercept + slope * d)) ** 2 for d, r in points)

    best = ssr(sf7_fit.intercept_dbm, sf7_fit.slope_db_per_m)
    for di in (-0.01, 0.01):
        for ds in (-0.01, 0.0, 0.01):
            if di == 0 and ds == 0:
                continue
            perturbed = ssr(sf7_fit.intercept_dbm * (1 + di), sf7_fit.slope_db_per_m * (1 + ds))
            assert perturbed >= best


def test_log_distance_fit_recovers_synthetic_exponent():
    samples = tuple(IndoorSample(d, "A", 7, -40.0 - 10 * 3.2 * math.log10(d), 8.0)
                    for d in (1.0, 2.0, 4.0, 8.0, 16.0))
    model = fit_model(samples, kind="log-distance")
    assert model.exponent == pytest.approx(3.2, abs=1e-9)
    assert model.intercept_dbm == pytest.approx(-40.0, abs=1e-9)
    assert model.residual_rmse_db == pytest.approx(0.0, abs=1e-9)


def test_log_distance_fit_drops_zero_distance(dataset):
    model = fit_model(dataset.select(7), kind="log-distance")
    assert model.exponent > 0


def test_slopes_agree_across_spreading_factors(dataset):
    # SF has no significant effect on the indoor profile: pairwise slope
    # differences stay below 15% relative.
    slopes = {sf: fit_model(dataset.select(sf), kind="linear").slope_db_per_m
              for sf in (7, 9, 11)}
    for a in slopes:
        for b in slopes:
            rel = abs(slopes[a] - slopes[b]) / min(abs(slopes[a]), abs(slopes[b]))
            assert rel < 0.15


# ------------------------------------------------------------------ prediction

def test_predict_at_survey_far_end(sf7_fit):
    assert predict_rssi(sf7_fit, 20.0) == pytest.approx(-112.10, abs=6.0)
    assert predict_rssi(sf7_fit, 10.5) == pytest.approx(-87.72, abs=6.0)
    assert predict_rssi(sf7_fit, 0.0) == sf7_fit.intercept_dbm


def test_predict_monotone_non_increasing(sf7_fit):
    values = [predict_rssi(sf7_fit, d) for d in range(0, 40)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_attenuation_full_height_is_about_50db(sf7_fit):
    drop = attenuation_over(sf7_fit, 0.0, 20.0)
    assert drop == pytest.approx(50.0, abs=6.0)
    assert drop == pytest.approx(50.102, abs=1e-2)   # oracle value


def test_attenuation_telescopes(sf7_fit):
    assert attenuation_over(sf7_fit, 0, 10) + attenuation_over(sf7_fit, 10, 20) \
        == pytest.approx(attenuation_over(sf7_fit, 0, 20), abs=1e-12)
    assert attenuation_over(sf7_fit, 7.5, 7.5) == 0.0


def test_snr_drop_over_building_for_sf9(dataset):
    rows = dataset.select(9)
    near = [r.snr_db for r in rows if r.floor in "XABC"]
    far = [r.snr_db for r in rows if r.distance_m == 20.0]
    drop = sum(near) / len(near) - far[0]
    assert drop == pytest.approx(15.0, abs=3.0)


# ------------------------------------------------------------------ floors

def test_max_floors_band(sf7_fit):
    floors = max_floors(sf7_fit, start_rssi_dbm=-61.16, sensitivity_dbm=(-140.0, -126.0))
    assert isinstance(floors, tuple)
    low, high = floors
    assert low <= high
    # the recommendation band: the returned range straddles 8-10 floors
    assert set(range(low, high + 1)) & {8, 9, 10}
    assert (low, high) == (7, 9)    # oracle: 64.84/8.350 -> 7, 78.84/8.350 -> 9


def test_max_floors_scalar_and_guards(sf7_fit):
    assert max_floors(sf7_fit, -61.16, -126.0) == 7
    assert max_floors(sf7_fit, -61.16, -55.0) == 0          # sensitivity above start
    assert max_floors(sf7_fit, -61.16, -10_000.0, cap=40) == 40
    flat = PathLossModel(kind="linear", intercept_dbm=-60.0, slope_db_per_m=0.0)
    assert max_floors(flat, -60.0, -126.0) is None


def test_max_floors_with_explicit_geometry(sf7_fit):
    geometry = BuildingGeometry(heights_m=(3.0, 6.0, 9.0, 12.0, 15.0, 18.0))
    floors = max_floors(sf7_fit, -61.16, -126.0, geometry=geometry)
    assert floors == 8      # 3.0 m storeys: 64.84 dB margin / 7.515 dB per floor


def test_building_geometry_validation():
    with pytest.raises(ValueError):
        BuildingGeometry(heights_m=(3.0, 3.0))
    geometry = BuildingGeometry.uniform(floors=6, total_height_m=20.0)
    assert geometry.distance_to_floor(6) == pytest.approx(20.0)
    assert geometry.distance_to_floor(9) == pytest.approx(30.0)   # extrapolated


# ------------------------------------------------------------------ outdoor calibration

def test_calibrate_outdoor_exponent():
    model = calibrate_outdoor(eirp_dbm=16.15, sensitivity_dbm=-126.0, observed_range_m=360.0)
    assert model.exponent == pytest.approx(3.996, abs=0.001)
    assert 3.5 <= model.exponent <= 4.5
    assert model.intercept_dbm == pytest.approx(16.15 - 40.0)


def test_calibrate_outdoor_round_trip():
    model = calibrate_outdoor(16.15, -126.0, 360.0)
    assert max_range_m(model, -126.0) == pytest.approx(360.0, abs=1.0)


def test_calibrate_outdoor_monotone_in_range():
    near = calibrate_outdoor(16.15, -126.0, 360.0)
    far = calibrate_outdoor(16.15, -126.0, 3600.0)
    assert far.exponent < near.exponent


def test_calibrate_outdoor_inconsistent_inputs():
    with pytest.raises(CalibrationError):
        calibrate_outdoor(eirp_dbm=10.0, sensitivity_dbm=-20.0, observed_range_m=360.0)
    with pytest.raises(CalibrationError):
        calibrate_outdoor(16.15, -126.0, observed_range_m=0.5)


# ------------------------------------------------------------------ reachability

def test_reachable_convention():
    assert reachable(-100.0, 7)
    assert not reachable(-150.0, 7)
    assert not reachable(-150.0, 12)
    assert reachable(-124.0, 7)        # boundary inclusive
    with pytest.raises(ValueError):
        reachable(-100.0, 6)


# ------------------------------------------------------------------ snr model

def test_snr_model_fit_and_clamp(dataset):
    rows = dataset.select(9)
    model = fit_snr_model(rows)
    # noise floor equals mean(rssi - snr); prediction clamps at the ceiling
    expected_floor = sum(r.rssi_dbm - r.snr_db for r in rows) / len(rows)
    assert model.noise_floor_dbm == pytest.approx(expected_floor)
    assert model.predict(-50.0) == model.ceiling_db
    assert model.predict(-105.0) == pytest.approx(-105.0 - model.noise_floor_dbm)
    errors = [abs(model.predict(r.rssi_dbm) - r.snr_db) for r in rows]
    assert sum(errors) / len(errors) < 6.0    # crude by construction: flat noise floor


def test_random_linear_fit_matches_normal_equations():
    rng = random.Random(5)
    for _ in range(20):
        xs = sorted(rng.uniform(0, 20) for _ in range(rng.randrange(3, 12)))
        ys = [-60 - 2.5 * x + rng.uniform(-3, 3) for x in xs]
        samples = tuple(IndoorSample(x, "A", 7, max(min(y, -50.0), -120.0), 8.0)
                        for x, y in zip(xs, ys))
        model = fit_model(samples, kind="linear")
        # independent oracle: closed-form normal equations
        n = len(samples)
        mx = sum(s.distance_m for s in samples) / n
        my = sum(s.rssi_dbm for s in samples) / n
        sxx = sum((s.distance_m - mx) ** 2 for s in samples)
        sxy = sum((s.distance_m - mx) * (s.rssi_dbm - my) for s in samples)
        assert model.slope_db_per_m == pytest.approx(sxy / sxx, rel=1e-9)
        assert model.intercept_dbm == pytest.approx(my - sxy / sxx * mx, rel=1e-9)
