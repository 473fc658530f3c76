"""Tests for the simulation module.

Inversion goldens are computed by hand from the piece-wise linear
cumulative hazard.  Distributional checks compare seeded samples against
closed-form survival functions, and the AR(2) exposure process against its
stationary moments.  All statistical assertions run on fixed seeds.
"""

import numpy as np
import pandas as pd
import pytest
from scipy import stats

import pammkit.formula as F
from pammkit import errors
from pammkit.ped import split_tcc
from pammkit.simulate import (
    PexpDist,
    add_tdc,
    eval_cumulative_node,
    f_dlnm,
    f_elra,
    f_wce,
    hazard_rates,
    rpexp_inverse,
    sim_pexp,
    subject_rng,
)


class TestRpexpInverse:
    def test_hand_computed_values(self):
        cuts = [0.0, 1.0, 2.0]
        rates = [0.5, 2.0]
        # Lambda(1) = 0.5, Lambda(2) = 2.5
        assert rpexp_inverse(np.exp(-0.25), cuts, rates) == pytest.approx(0.5)
        assert rpexp_inverse(np.exp(-0.5), cuts, rates) == pytest.approx(1.0)
        assert rpexp_inverse(np.exp(-1.5), cuts, rates) == pytest.approx(1.5)
        assert rpexp_inverse(np.exp(-3.0), cuts, rates) == np.inf

    def test_zero_rate_interval_is_skipped(self):
        t = rpexp_inverse(np.exp(-0.5), [0.0, 1.0, 2.0], [0.0, 1.0])
        assert t == pytest.approx(1.5)

    def test_vector_and_per_row_rates(self):
        u = np.exp([-0.25, -0.25])
        rates = np.array([[0.5, 2.0], [1.0, 1.0]])
        t = rpexp_inverse(u, [0.0, 1.0, 2.0], rates)
        np.testing.assert_allclose(t, [0.5, 0.25])

    def test_shape_and_sign_validation(self):
        with pytest.raises(errors.DegenerateDataError):
            rpexp_inverse(0.5, [0.0, 1.0], [[0.5, 0.5]])
        with pytest.raises(errors.DegenerateDataError):
            rpexp_inverse(0.5, [0.0, 1.0], [-1.0])


class TestPexpDist:
    def test_cumulative_hazard_piecewise_linear(self):
        dist = PexpDist([0.0, 1.0, 3.0], [1.0, 0.5])
        np.testing.assert_allclose(
            dist.cumulative_hazard([0.0, 0.5, 1.0, 2.0, 3.0, 5.0]),
            [0.0, 0.5, 1.0, 1.5, 2.0, 2.0],
        )

    def test_survival_matches_cumulative_hazard(self):
        dist = PexpDist([0.0, 2.0], [0.3])
        t = np.linspace(0, 2, 7)
        np.testing.assert_allclose(
            dist.survival(t), np.exp(-dist.cumulative_hazard(t))
        )

    def test_sample_matches_closed_form(self):
        # final interval long enough that no draw escapes
        dist = PexpDist([0.0, 1.0, 3.0, 50.0], [0.3, 0.8, 2.0])
        rng = np.random.default_rng(42)
        draws = np.sort(dist.sample(5000, rng))
        assert np.isfinite(draws).all()
        cdf = 1.0 - dist.survival(draws)
        n = draws.size
        upper = np.arange(1, n + 1) / n - cdf
        lower = cdf - np.arange(0, n) / n
        ks = max(upper.max(), lower.max())
        assert ks < 0.03

    def test_inverse_round_trip(self):
        dist = PexpDist([0.0, 1.0, 4.0], [0.2, 1.5])
        u = np.array([0.9, 0.5, 0.2])
        t = rpexp_inverse(u, dist.cuts, dist.rates)
        np.testing.assert_allclose(dist.survival(t), u, rtol=1e-12)


class TestHazardRates:
    def test_constant_expression(self):
        data = pd.DataFrame({"x": [0.0, 1.0]})
        rates = hazard_rates(data, "~ -1", [0.0, 1.0, 2.0])
        np.testing.assert_allclose(rates, np.exp(-1.0) * np.ones((2, 2)))

    def test_covariates_and_time(self):
        data = pd.DataFrame({"x": [0.0, 2.0]})
        rates = hazard_rates(data, "~ -1 + 0.5*x + log(t)", [0.0, 1.0, 3.0])
        expected = np.exp(
            -1.0
            + 0.5 * np.array([[0.0], [2.0]])
            + np.log(np.array([1.0, 3.0]))[None, :]
        )
        np.testing.assert_allclose(rates, expected)

    def test_cumulative_term_matches_manual_sum(self):
        data = pd.DataFrame({"id": [1, 2]})
        grid = np.array([-1.0, 0.0, 1.0, 2.0])
        tdc = pd.DataFrame(
            {
                "id": np.repeat([1, 2], 4),
                "tz": np.tile(grid, 2),
                "z": [0.5, 1.0, -0.5, 2.0, 1.5, 0.0, 1.0, -1.0],
            }
        )
        cuts = np.array([0.0, 1.0, 2.0, 4.0])
        ll = F.WindowLagLead(0.0, 12.0)
        got = hazard_rates(
            data,
            "~ -2 | fcumu(t, tz, z, f_xyz=f_wce, ll_fun=window(0, 12))",
            cuts,
            tdc=tdc,
        )
        steps = np.array([1.0, 1.0, 1.0, 1.0])
        expected = np.empty((2, 3))
        for i, sid in enumerate([1, 2]):
            zrow = tdc.loc[tdc["id"] == sid, "z"].to_numpy()
            for j in range(3):
                g = 0.0
                for q, tzq in enumerate(grid):
                    if ll.active(cuts[j], cuts[j + 1], tzq):
                        g += steps[q] * f_wce(cuts[j + 1], tzq, zrow[q])
                expected[i, j] = np.exp(-2.0 + g)
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_unknown_weight_function(self):
        data = pd.DataFrame({"id": [1]})
        tdc = pd.DataFrame({"id": [1], "tz": [0.0], "z": [1.0]})
        with pytest.raises(errors.UnknownFunctionError):
            hazard_rates(
                data,
                "~ -2 | fcumu(t, tz, z, f_xyz=f_nope)",
                [0.0, 1.0],
                tdc=tdc,
            )


class TestSimPexp:
    def test_exponential_mean(self):
        data = pd.DataFrame({"x": np.zeros(2000)})
        out = sim_pexp(data, "~ -1", [0.0, 100.0], seed=7)
        # rate exp(-1), so the mean is e; censoring at 100 is negligible
        assert out["status"].mean() > 0.99
        assert abs(out["time"].mean() - np.e) < 0.2

    def test_deterministic_and_subject_stable(self):
        data = pd.DataFrame({"x": np.linspace(0, 1, 10)})
        a = sim_pexp(data, "~ -1 + x", [0.0, 5.0, 10.0], seed=3)
        b = sim_pexp(data, "~ -1 + x", [0.0, 5.0, 10.0], seed=3)
        pd.testing.assert_frame_equal(a, b)
        c = sim_pexp(data.head(3), "~ -1 + x", [0.0, 5.0, 10.0], seed=3)
        pd.testing.assert_frame_equal(a.head(3), c)
        d = sim_pexp(data, "~ -1 + x", [0.0, 5.0, 10.0], seed=4)
        assert not a["time"].equals(d["time"])

    def test_administrative_censoring(self):
        data = pd.DataFrame({"x": np.zeros(50)})
        out = sim_pexp(data, "~ -20", [0.0, 1.0], seed=1)
        assert (out["status"] == 0).all()
        assert (out["time"] == 1.0).all()

    def test_covariate_raises_hazard(self):
        data = pd.DataFrame({"x": np.repeat([0.0, 1.0], 800)})
        out = sim_pexp(data, "~ -1 + 2*x", [0.0, 50.0], seed=11)
        high = out.loc[out["x"] == 1.0, "time"].mean()
        low = out.loc[out["x"] == 0.0, "time"].mean()
        assert high < low / 3

    def test_interval_rate_recovery(self):
        # draws, split to PED, then per-interval occurrence/exposure rates
        cuts = np.array([0.0, 1.0, 2.0, 3.0])
        truth = np.array([0.2, 0.5, 0.9])
        dist = PexpDist(cuts, truth)
        rng = np.random.default_rng(2026)
        t = dist.sample(50_000, rng)
        data = pd.DataFrame(
            {
                "time": np.minimum(t, cuts[-1]),
                "status": (t <= cuts[-1]).astype(int),
            }
        )
        ped = split_tcc(data, "Surv(time, status) ~ .", cuts=cuts).data
        grouped = ped.groupby("tstart", sort=True)
        est = grouped["ped_status"].sum() / grouped["offset"].apply(
            lambda o: np.exp(o).sum()
        )
        np.testing.assert_allclose(est.to_numpy(), truth, rtol=0.1)


class TestSubjectRng:
    def test_streams_differ_by_subject_and_purpose(self):
        a = subject_rng(1, 0).uniform()
        b = subject_rng(1, 1).uniform()
        c = subject_rng(1, 0, purpose=1).uniform()
        d = subject_rng(2, 0).uniform()
        assert len({a, b, c, d}) == 4

    def test_streams_reproducible(self):
        assert subject_rng(9, 4).uniform() == subject_rng(9, 4).uniform()


class TestAddTdc:
    def test_shape_and_layout(self):
        data = pd.DataFrame({"id": [10, 20], "x": [0.0, 1.0]})
        grid = np.array([-2.0, 0.0, 2.0])
        out = add_tdc(data, grid, seed=5)
        assert list(out.columns) == ["id", "tz", "z"]
        assert out["id"].tolist() == [10, 10, 10, 20, 20, 20]
        np.testing.assert_array_equal(out["tz"].to_numpy(), np.tile(grid, 2))

    def test_deterministic_and_subject_stable(self):
        data = pd.DataFrame({"x": np.zeros(6)})
        grid = np.linspace(-5, 5, 41)
        a = add_tdc(data, grid, seed=8)
        b = add_tdc(data, grid, seed=8)
        pd.testing.assert_frame_equal(a, b)
        c = add_tdc(data.head(2), grid, seed=8)
        pd.testing.assert_frame_equal(a.head(2 * 41), c)

    def test_independent_from_survival_draws(self):
        data = pd.DataFrame({"x": [0.0]})
        z0 = add_tdc(data, [0.0], seed=13)["z"].iloc[0]
        u0 = subject_rng(13, 0).uniform()
        assert z0 != u0

    def test_stationary_start(self):
        # across many subjects the first two values follow the stationary
        # distribution: var gamma0, lag-1 correlation rho1
        data = pd.DataFrame({"x": np.zeros(4000)})
        out = add_tdc(data, [0.0, 1.0], seed=21)
        z = out["z"].to_numpy().reshape(-1, 2)
        gamma0 = 1.1 / (0.9 * (1.1**2 - 0.8**2))
        rho1 = 0.8 / 1.1
        assert z[:, 0].var() == pytest.approx(gamma0, rel=0.08)
        assert z[:, 1].var() == pytest.approx(gamma0, rel=0.08)
        assert np.corrcoef(z[:, 0], z[:, 1])[0, 1] == pytest.approx(
            rho1, abs=0.04
        )

    def test_long_run_autocorrelation(self):
        data = pd.DataFrame({"x": [0.0]})
        q = 20_000
        z = add_tdc(data, np.arange(q), seed=31)["z"].to_numpy()
        zc = z - z.mean()
        rho = np.array(
            [np.dot(zc[:-k], zc[k:]) / np.dot(zc, zc) for k in (1, 2)]
        )
        rho1 = 0.8 / 1.1
        rho2 = 0.8 * rho1 - 0.1
        assert rho[0] == pytest.approx(rho1, abs=0.03)
        assert rho[1] == pytest.approx(rho2, abs=0.03)


class TestWeightFunctions:
    def test_dlnm_anchored_at_minus_one(self):
        t = np.linspace(0, 10, 7)
        np.testing.assert_allclose(f_dlnm(t, t - 3.0, -1.0), 0.0, atol=1e-15)

    def test_elra_anchored_at_five(self):
        tz = np.linspace(-5, 5, 9)
        np.testing.assert_allclose(f_elra(5.0, tz, 2.0), 0.0, atol=1e-15)

    def test_wce_peaks_at_latency_six(self):
        assert f_wce(6.0, 0.0, 1.0) > f_wce(3.0, 0.0, 1.0)
        assert f_wce(6.0, 0.0, 1.0) > f_wce(9.5, 0.0, 1.0)

    def test_wce_linear_in_exposure(self):
        assert f_wce(7.0, 1.0, 2.0) == pytest.approx(
            2.0 * f_wce(7.0, 1.0, 1.0)
        )

    def test_elra_non_negative_for_positive_exposure(self):
        t = np.linspace(0, 10, 21)[:, None]
        tz = np.linspace(-5, 5, 11)[None, :]
        assert (f_elra(t, tz, 1.0) >= 0).all()


class TestEvalCumulativeNode:
    def test_converges_to_integral(self):
        # one interval ending at 10, constant exposure 1, default window
        # keeps the whole grid active; the weighted sum approximates the
        # integral of the weight function over the grid span
        lo, hi = -5.0, 5.0
        truth = 0.5 * (
            stats.norm.cdf(10.0 - lo, 6.0, 2.5)
            - stats.norm.cdf(10.0 - hi, 6.0, 2.5)
        )
        errs = {}
        for h in (0.5, 0.05):
            grid = np.arange(lo, hi + h / 2, h)
            g = eval_cumulative_node(
                f_wce,
                [9.0, 10.0],
                grid,
                np.ones((1, grid.size)),
                F.DefaultLagLead(),
            )
            errs[h] = abs(g[0, 0] - truth)
        assert errs[0.5] < 0.03
        assert errs[0.05] < 0.004
        assert errs[0.5] / errs[0.05] > 4

    def test_window_masks_inactive_points(self):
        grid = np.array([0.0, 1.0, 2.0])
        g = eval_cumulative_node(
            lambda t, tz, z: np.ones(np.broadcast_shapes(
                np.shape(t), np.shape(tz), np.shape(z)
            )),
            [0.0, 1.0, 2.0],
            grid,
            np.ones((1, 3)),
            F.DefaultLagLead(),
        )
        # interval (0,1]: only tz=0 active; interval (1,2]: tz in {0,1}
        np.testing.assert_allclose(g, [[1.0, 2.0]])
