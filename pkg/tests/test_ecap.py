import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import oracles
from synthguard.ecap import (
    CalibrationError,
    EcapIndeterminateError,
    EcapQuery,
    Neighbors,
    NoiseCalibrator,
    NoiseSpec,
    PopulationModel,
    _combine,
    apply_noise,
    calibrate_noise,
    default_grid,
    ecap,
    ecap_curve,
    ecap_result,
    estimate_neighbors,
    msd,
)
from synthguard.tabular import Dataset, Kind, Schema, Variable

HEIGHTS = PopulationModel.normal(1500, 170, 12)
PLATEAU = 1 - (1499 / 1500) ** 25


class TestMsd:
    def test_examples(self):
        assert msd(0, 10, 11) == 1
        assert msd(5, 5, 100) == 0
        assert msd(-3, 4, 2) == 7

    def test_errors(self):
        with pytest.raises(ValueError):
            msd(0, 1, 1)
        with pytest.raises(ValueError):
            msd(2, 1, 10)


class TestTypes:
    def test_population_invariants(self):
        with pytest.raises(ValueError):
            PopulationModel.normal(1, 0, 1)
        with pytest.raises(ValueError):
            PopulationModel.normal(10, 0, 0)
        assert HEIGHTS.to_dict() == {"N": 1500, "law": "normal", "mean": 170.0, "sd": 12.0}

    def test_noise_spec(self):
        with pytest.raises(ValueError):
            NoiseSpec(-0.1)
        assert NoiseSpec(0.3).to_dict() == {"law": "normal", "mean": 0.0, "sigma": 0.3}

    def test_query_invariants(self):
        nb = Neighbors(177.9, 178.1)
        with pytest.raises(ValueError):
            EcapQuery(179.0, 25, HEIGHTS, NoiseSpec(0.1), nb)
        with pytest.raises(ValueError):
            EcapQuery(178.0, 2000, HEIGHTS, NoiseSpec(0.1), nb)


class TestEstimateNeighbors:
    def test_uniform_gap(self):
        # nearest of 1000 uniforms below 0.5 sits 1/1001 away on average
        model = PopulationModel(1001, stats.uniform(0, 1))
        nb = estimate_neighbors(0.5, model, replicates=2000, seed=1)
        assert abs(nb.x_minus - (0.5 - 1 / 1001)) <= 3 * nb.se_minus
        assert abs(nb.x_plus - (0.5 + 1 / 1001)) <= 3 * nb.se_plus
        assert nb.gap == pytest.approx(1 / 500, rel=0.1)

    def test_order_statistics_match_brute_force_draws(self):
        model = PopulationModel.normal(300, 0, 1)
        fast = estimate_neighbors(1.3, model, replicates=3000, seed=2)
        slow = estimate_neighbors(1.3, model, replicates=3000, seed=3, method="draw")
        assert abs(fast.x_minus - slow.x_minus) <= 3 * math.hypot(fast.se_minus, slow.se_minus)
        assert abs(fast.x_plus - slow.x_plus) <= 3 * math.hypot(fast.se_plus, slow.se_plus)

    def test_tail_gap_wider(self):
        centre = estimate_neighbors(170.0, HEIGHTS, seed=4)
        tail = estimate_neighbors(178.0, HEIGHTS, seed=4)
        assert tail.gap > centre.gap

    def test_single_replicate_reproducible(self):
        a = estimate_neighbors(178.0, HEIGHTS, replicates=1, seed=9)
        b = estimate_neighbors(178.0, HEIGHTS, replicates=1, seed=9)
        assert a == b

    def test_empty_side_extrapolated(self):
        nb = estimate_neighbors(5.0, PopulationModel.normal(3, 0, 1), replicates=100, seed=0)
        assert nb.extrapolated > 90
        assert nb.x_minus < 5.0 < nb.x_plus

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            estimate_neighbors(0.0, HEIGHTS, replicates=0)
        with pytest.raises(ValueError):
            estimate_neighbors(0.0, HEIGHTS, method="magic")


class TestEcap:
    @settings(max_examples=50, deadline=None)
    @given(
        st.floats(-5, 5),
        st.integers(2, 10_000),
        st.floats(1e-4, 2),
        st.floats(1e-4, 2),
        st.data(),
    )
    def test_zero_noise_is_one(self, x_a, N, left, right, data):
        n = data.draw(st.integers(1, N))
        q = EcapQuery(x_a, n, PopulationModel.normal(N, 0, 1), NoiseSpec(0.0), Neighbors(x_a - left, x_a + right))
        assert ecap(q) == 1.0
        assert ecap_result(q).value == 1.0

    def test_plateau_constant(self):
        assert PLATEAU == pytest.approx(0.016534, abs=1e-6)

    def test_large_noise_reaches_plateau(self):
        nb = estimate_neighbors(178.0, HEIGHTS, seed=1)
        res = ecap_result(EcapQuery(178.0, 25, HEIGHTS, NoiseSpec(5.0), nb, seed=2))
        assert abs(res.value - PLATEAU) <= 0.005 + 3 * res.stderr

    def test_stable_form_matches_literal_expression(self):
        for N, n, p_in, p_dp in [(1500, 25, 0.3, 0.001), (50, 10, 0.9, 0.05), (200, 3, 0.01, 0.2)]:
            value, p_out = _combine(N, n, p_in, p_dp)
            assert value == pytest.approx(oracles.ecap_formula(N, n, p_out, 1 - p_in), rel=1e-10)

    @pytest.mark.parametrize(
        "N,n,x_a,sigma",
        [(50, 10, 0.0, 0.02), (100, 10, -0.5, 0.03), (20, 3, 0.3, 0.1), (150, 8, 2.0, 0.2), (10, 2, 0.0, 0.3)],
    )
    def test_agrees_with_attack_simulation(self, N, n, x_a, sigma):
        model = PopulationModel.normal(N, 0, 1)
        nb = estimate_neighbors(x_a, model, seed=1)
        res = ecap_result(EcapQuery(x_a, n, model, NoiseSpec(sigma), nb, mc_samples=200_000, seed=2))
        p, se, _ = oracles.simulate_attack(
            x_a, nb.x_minus, nb.x_plus, N, n, sigma, stats.norm(), 200_000, np.random.default_rng(3)
        )
        assert abs(res.value - p) <= 3 * math.hypot(res.stderr, se)

    def test_clamped_to_unit_interval(self):
        nb = estimate_neighbors(170.0, HEIGHTS, seed=0)
        for s in (1e-3, 0.01, 0.1, 1.0, 10.0):
            v = ecap(EcapQuery(170.0, 25, HEIGHTS, NoiseSpec(s), nb, mc_samples=2000))
            assert 0.0 <= v <= 1.0

    def test_indeterminate(self):
        with pytest.raises(EcapIndeterminateError) as err:
            _combine(10**9, 1, 1e-9, 0.0)
        assert err.value.p_out_i1 > 0.999

    def test_deterministic_given_seed(self):
        nb = Neighbors(177.97, 178.03)
        q = EcapQuery(178.0, 25, HEIGHTS, NoiseSpec(0.05), nb, seed=5)
        assert ecap(q) == ecap(q)


@pytest.fixture(scope="module")
def curve():
    grid = np.concatenate([[0.0], np.geomspace(0.005, 5, 40)])
    return ecap_curve(178.0, HEIGHTS, 25, grid, seed=1)


class TestEcapCurve:
    def test_starts_at_one(self, curve):
        assert curve.ecap[0] == 1.0

    def test_monotone_within_mc_error(self, curve):
        se = np.hypot(curve.stderr[:-1], curve.stderr[1:])
        assert np.all(curve.ecap[:-1] - curve.ecap[1:] > -3 * se)

    def test_plateau(self, curve):
        assert abs(curve.ecap[-1] - PLATEAU) <= 0.005 + 3 * curve.stderr[-1]

    def test_difference_quotients(self, curve):
        dq = curve.difference_quotients
        assert dq.shape == (40,)
        np.testing.assert_allclose(dq, np.diff(curve.ecap) / np.diff(curve.sigma))

    def test_single_point_grid(self):
        c = ecap_curve(178.0, HEIGHTS, 25, [0.1], seed=1)
        assert c.sigma.shape == c.ecap.shape == (1,)

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            ecap_curve(178.0, HEIGHTS, 25, [0.2, 0.1])
        with pytest.raises(ValueError):
            ecap_curve(178.0, HEIGHTS, 25, [])


class TestCalibrateNoise:
    def test_single_value_near_published_sigma(self):
        cal = calibrate_noise([178.0], HEIGHTS, 25, target_ecap=0.2, seed=1)
        assert 0.05 <= cal.noise.sigma <= 0.12
        assert cal.worst_curve[cal.chosen_index] <= 0.2
        assert cal.chosen_index == 0 or cal.worst_curve[cal.chosen_index - 1] > 0.2

    def test_vacuous_target_takes_smallest_grid_value(self):
        cal = calibrate_noise([178.0, 150.0], HEIGHTS, 25, target_ecap=1.0, seed=1)
        assert cal.noise.sigma == cal.grid[0]

    def test_unreachable_target_reports_best(self):
        with pytest.raises(CalibrationError) as err:
            calibrate_noise([178.0], HEIGHTS, 25, target_ecap=0.001, seed=1)
        assert err.value.best_ecap > 0.001
        assert err.value.best_sigma > 0

    def test_binding_value_in_tail(self):
        values = [150.0, 165.0, 170.0, 172.0, 199.0]
        cal = calibrate_noise(values, HEIGHTS, 25, target_ecap=0.2, seed=2)
        assert cal.binding_value == 199.0

    def test_recommendation_not_below_minimum(self):
        cal = calibrate_noise([178.0], HEIGHTS, 25, seed=3)
        assert cal.recommended_sigma >= cal.noise.sigma

    def test_private_report_flagged(self):
        report = calibrate_noise([178.0], HEIGHTS, 25, seed=3).to_private_dict()
        assert report["publishable"] is False
        assert "max_ecap" in report["curve"]

    def test_default_grid_span(self):
        nb = estimate_neighbors(178.0, HEIGHTS, seed=0)
        grid = default_grid(HEIGHTS, [nb])
        assert len(grid) == 50
        assert grid[-1] == pytest.approx(10 * nb.gap)

    def test_thread_count_independent(self):
        a = calibrate_noise([150.0, 178.0, 190.0], HEIGHTS, 25, seed=4, threads=1)
        b = calibrate_noise([150.0, 178.0, 190.0], HEIGHTS, 25, seed=4, threads=3)
        np.testing.assert_array_equal(a.table, b.table)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            calibrate_noise([np.nan], HEIGHTS, 25)
        with pytest.raises(ValueError):
            calibrate_noise([178.0], HEIGHTS, 25, target_ecap=0)


class TestApplyNoise:
    @pytest.fixture
    def data(self):
        schema = Schema(
            (Variable("h", Kind.QUANTITATIVE, missing_allowed=True), Variable("b", Kind.BINARY))
        )
        rng = np.random.default_rng(0)
        h = rng.normal(170, 12, 600)
        h[::50] = np.nan
        return Dataset(schema, {"h": h, "b": rng.integers(0, 2, 600)})

    def test_zero_sigma_identity(self, data):
        assert apply_noise(data, "h", NoiseSpec(0.0)).equals(data)

    def test_mean_preserved_clt_bound(self, data):
        base = np.nanmean(data["h"])
        n = int((~np.isnan(data["h"])).sum())
        for seed in range(100):
            out = apply_noise(data, "h", NoiseSpec(0.1), seed)
            assert abs(np.nanmean(out["h"]) - base) <= 4 * 0.1 / math.sqrt(n)

    def test_missing_and_other_columns_untouched(self, data):
        out = apply_noise(data, "h", NoiseSpec(1.0), 3)
        np.testing.assert_array_equal(np.isnan(out["h"]), np.isnan(data["h"]))
        assert out["b"].tobytes() == data["b"].tobytes()
        assert not np.array_equal(out["h"], data["h"], equal_nan=True)

    def test_non_quantitative_rejected(self, data):
        with pytest.raises(ValueError):
            apply_noise(data, "b", NoiseSpec(0.1))

    def test_estimator(self, data):
        cal = NoiseCalibrator("h", 60000, 170, 12, target_ecap=0.2, random_state=1)
        out = cal.fit_transform(data)
        assert cal.noise_.sigma > 0
        assert out.n_rows == data.n_rows
        assert cal.get_params()["population_size"] == 60000
