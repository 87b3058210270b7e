import math

import numpy as np
import pytest

from sigcal.market_sim import (
    SVParams,
    estimate_spot_qv,
    extract_drivers,
    heston_call_price,
    simulate,
)

HESTON = SVParams(model="heston", s0=1.0, v0=0.08, mu=0.001,
                  kappa=0.5, theta=0.15, sigma=0.25, rho=-0.5)


class TestParams:
    def test_rejects_negative_kappa(self):
        with pytest.raises(ValueError):
            SVParams(model="heston", s0=1.0, v0=0.1, kappa=-1.0)

    def test_rejects_bad_rho(self):
        with pytest.raises(ValueError):
            SVParams(model="sabr", s0=1.0, v0=0.1, rho=1.5)

    def test_rejects_asymmetric_cov(self):
        with pytest.raises(ValueError):
            SVParams(model="multibs", s0_vec=[1, 1], mu_vec=[0, 0],
                     cov=[[0.1, 0.01], [0.02, 0.1]])

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            SVParams(model="rough")


class TestSimulate:
    def test_degenerate_heston_is_black_scholes(self):
        p = SVParams(model="heston", s0=1.0, v0=0.04, mu=0.0,
                     kappa=0.0, theta=0.0, sigma=0.0, rho=0.0)
        times = np.linspace(0, 1, 251)
        S, V = simulate(p, times, 20_000, seed=1)
        np.testing.assert_array_equal(V, np.full_like(V, 0.04))
        logret = np.log(S[:, -1] / S[:, 0])
        # terminal log-variance matches v0 * T
        var = logret.var(ddof=1)
        se = var * math.sqrt(2.0 / (len(logret) - 1))
        assert abs(var - 0.04) < 3 * se
        assert abs(logret.mean() + 0.5 * 0.04) < 3 * logret.std() / math.sqrt(len(logret))

    def test_heston_driver_correlation(self):
        times = np.linspace(0, 1, 201)
        S, V = simulate(HESTON, times, 20_000, seed=2)
        ds = np.diff(np.log(S), axis=1)
        dv = np.diff(V, axis=1)
        c = np.corrcoef(ds.ravel(), dv.ravel())[0, 1]
        assert abs(c - HESTON.rho) < 0.02

    def test_heston_variance_stays_tracked(self):
        times = np.linspace(0, 2, 401)
        S, V = simulate(HESTON, times, 5_000, seed=3)
        # mean reversion pulls E[V_t] toward theta
        ev = V[:, -1].mean()
        want = HESTON.theta + (HESTON.v0 - HESTON.theta) * math.exp(-HESTON.kappa * 2)
        assert ev == pytest.approx(want, rel=0.05)

    def test_multibs_covariance(self):
        rng = np.random.default_rng(0)
        sig = rng.uniform(0.15, 0.34, size=5)
        corr = np.full((5, 5), 0.6) + 0.4 * np.eye(5)
        cov = np.outer(sig, sig) * corr
        p = SVParams(model="multibs", s0_vec=np.ones(5),
                     mu_vec=rng.uniform(-0.003, 0.001, size=5), cov=cov)
        times = np.linspace(0, 1, 366)
        S, V = simulate(p, times, 2_000, seed=4)
        assert V is None
        rets = np.diff(np.log(S), axis=1)
        dt = 1.0 / 365
        emp = np.cov(rets.reshape(-1, 5).T) / dt
        n_obs = rets.shape[0] * rets.shape[1]
        for i in range(5):
            for j in range(5):
                se = cov[i, j] * math.sqrt(2.0 / n_obs) + 1e-9
                assert abs(emp[i, j] - cov[i, j]) < 5 * se + 0.002

    def test_deterministic_across_workers(self):
        times = np.linspace(0, 1, 101)
        S1, V1 = simulate(HESTON, times, 10_000, seed=5, workers=1)
        S2, V2 = simulate(HESTON, times, 10_000, seed=5, workers=4)
        np.testing.assert_array_equal(S1, S2)
        np.testing.assert_array_equal(V1, V2)


class TestSpotQv:
    def test_constant_vol_tracks_sigma2_s2(self):
        # minute-class sampling of a BS path
        sigma = 0.2
        p = SVParams(model="heston", s0=1.0, v0=sigma**2, mu=0.0,
                     kappa=0.0, theta=0.0, sigma=0.0, rho=0.0)
        M = 480 * 40  # 40 trading days of 1-minute ticks
        times = np.linspace(0, 40 / 365, M + 1)
        S, _ = simulate(p, times, 1, seed=6)
        est = estimate_spot_qv(S[0], times, window=60)
        target = sigma**2 * S[0] ** 2
        rel = np.abs(est[60:] - target[60:]) / target[60:]
        assert np.quantile(rel, 0.9) < 0.5
        assert abs(np.mean(est[60:] / target[60:]) - 1.0) < 0.15

    def test_linear_series_vanishes_with_refinement(self):
        errs = []
        for M in (400, 1600):
            t = np.linspace(0, 1, M + 1)
            est = estimate_spot_qv(2.0 + 3.0 * t, t, window=50)
            errs.append(est.max())
        assert errs[1] < errs[0]
        assert errs[1] < 1e-2

    def test_heston_tracking(self):
        # 4-second class frequency over two trading days
        M = 7200 * 2
        times = np.linspace(0, 2 / 365, M + 1)
        S, V = simulate(HESTON, times, 1, seed=7)
        est = estimate_spot_qv(S[0], times, window=60)
        target = V[0] * S[0] ** 2
        rel_rmse = math.sqrt(np.mean((est[60:] / target[60:] - 1.0) ** 2))
        assert rel_rmse < 0.25

    def test_window_validation(self):
        t = np.linspace(0, 1, 11)
        with pytest.raises(ValueError):
            estimate_spot_qv(np.ones(11), t, window=20)
        with pytest.raises(ValueError):
            estimate_spot_qv(np.ones(11), t, window=1)


class TestExtractDrivers:
    def test_unit_vol_oracle_recovers_increments(self):
        rng = np.random.default_rng(8)
        t = np.linspace(0, 1, 301)
        s = np.concatenate([[0.0], np.cumsum(rng.standard_normal(300) * math.sqrt(1 / 300))])
        v = np.ones_like(s)
        ones = np.ones_like(s)
        path = extract_drivers(s, v, ones, ones, t)
        np.testing.assert_allclose(np.diff(path.values[:, 0]), np.diff(s), atol=1e-15)

    def test_oracle_sigma_on_heston(self):
        M = 20_000
        times = np.linspace(0, 1, M + 1)
        S, V = simulate(HESTON, times, 1, seed=9)
        vp = np.maximum(V[0], 0.0)
        qv_s = vp * S[0] ** 2
        qv_v = HESTON.sigma**2 * vp
        path = extract_drivers(S[0], V[0], qv_s, qv_v, times)
        db = np.diff(path.values[:, 0])
        dw = np.diff(path.values[:, 1])
        dt = 1.0 / M
        # unit variance per unit time, within 3 standard errors
        for dx in (db, dw):
            v = dx.var(ddof=1) / dt
            assert abs(v - 1.0) < 3 * math.sqrt(2.0 / M) + 0.01
        c = np.corrcoef(db, dw)[0, 1]
        assert abs(c - HESTON.rho) < 3 * (1 - HESTON.rho**2) / math.sqrt(M)

    def test_nonpositive_estimate_rejected(self):
        t = np.linspace(0, 1, 11)
        s = np.linspace(1, 2, 11)
        qv = np.ones(11)
        qv[3] = 0.0
        with pytest.raises(ValueError):
            extract_drivers(s, s, qv, np.ones(11), t)


class TestHestonAnalytic:
    def test_against_monte_carlo(self):
        p = SVParams(model="heston", s0=1.0, v0=0.08, mu=0.0,
                     kappa=0.1, theta=0.1, sigma=0.4, rho=-0.5)
        T = 0.5
        times = np.linspace(0, T, 251)
        S, _ = simulate(p, times, 200_000, seed=10)
        for K in (0.9, 1.0, 1.1):
            payoff = np.maximum(S[:, -1] - K, 0.0)
            se = payoff.std(ddof=1) / math.sqrt(len(payoff))
            closed = heston_call_price(p, T, K)
            assert abs(closed - payoff.mean()) < 3 * se + 5e-4

    def test_martingale_variance_case(self):
        # kappa = theta = 0 keeps the variance a martingale; price must stay
        # inside the no-arbitrage band and above intrinsic
        p = SVParams(model="heston", s0=1.0, v0=0.12, mu=0.0,
                     kappa=0.0, theta=0.0, sigma=0.55, rho=-0.5)
        c = heston_call_price(p, 1.0, 1.0)
        assert 0.0 < c < 1.0
        assert c == pytest.approx(0.1195, abs=0.003)  # frozen from a 2e5-path MC run

    def test_wrong_tag(self):
        with pytest.raises(ValueError):
            heston_call_price(SVParams(model="sabr", s0=1.0, v0=0.1), 1.0, 1.0)
