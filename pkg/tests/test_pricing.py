import math
import os
import subprocess
import sys

import numpy as np
import pytest

from sigcal.expected_signature import CorrelationSpec
from sigcal.models import MARTINGALE, ModelSpec
from sigcal.pricing import (
    SigPayoff,
    bs_price,
    bs_vega,
    cv_price,
    fit_sig_payoff,
    implied_vol,
    mc_price,
    mc_price_gradient,
    model_sig_samples,
    payoff_lift_vector,
    precompute_features,
    sig_payoff_price,
    simulate_drivers,
    simulate_features,
    terminal_samples,
)

RHO2 = CorrelationSpec(2, np.array([[1.0, -0.5], [-0.5, 1.0]]))


def bachelier_call(s0, K, T, sigma):
    """Oracle: closed-form call price for an arithmetic Brownian asset."""
    v = sigma * math.sqrt(T)
    d = (s0 - K) / v
    Phi = 0.5 * math.erfc(-d / math.sqrt(2))
    phi = math.exp(-0.5 * d * d) / math.sqrt(2 * math.pi)
    return (s0 - K) * Phi + v * phi


@pytest.fixture(scope="module")
def features():
    times = np.linspace(0.0, 1.0, 201)
    return simulate_features(
        2, RHO2, times, 40_000, seed=11, n=2, maturities=[0.5, 1.0], raw_level=4
    )


@pytest.fixture(scope="module")
def spec():
    return ModelSpec(
        d=2, n=2, rho=RHO2, s0=1.0,
        ell={(): 0.2, (0,): 0.05, (1,): 0.1, (2,): -0.07}, basis=MARTINGALE,
    )


class TestBlackScholes:
    def test_reference_price(self):
        assert bs_price(100.0, 120.0, 0.5, 0.25) == pytest.approx(1.5155, abs=1e-4)

    def test_deep_itm_limit(self):
        assert bs_price(100.0, 1e-8, 1.0, 0.2) == pytest.approx(100.0, rel=1e-9)

    def test_implied_vol_roundtrip(self):
        # lattice spans the quoted region (the time value must stay above
        # float rounding for sigma to be recoverable at all)
        for K in (80, 90, 100, 110, 120):
            for T in (0.25, 0.5, 2.0):
                for sigma in (0.1, 0.25, 0.6):
                    p = bs_price(100.0, K, T, sigma)
                    assert implied_vol(p, 100.0, K, T) == pytest.approx(sigma, abs=1e-8)

    def test_bounds_rejected(self):
        with pytest.raises(ValueError):
            implied_vol(101.0, 100.0, 90.0, 1.0)
        with pytest.raises(ValueError):
            implied_vol(9.0, 100.0, 90.0, 1.0)

    def test_vega_matches_finite_difference(self):
        h = 1e-6
        v = (bs_price(100, 105, 0.7, 0.3 + h) - bs_price(100, 105, 0.7, 0.3 - h)) / (2 * h)
        assert bs_vega(100, 105, 0.7, 0.3) == pytest.approx(v, rel=1e-6)


class TestSimulateDrivers:
    def test_marginal_variance(self):
        drv = simulate_drivers(1, CorrelationSpec.identity(1), np.linspace(0, 2, 101),
                               50_000, seed=1)
        wT = drv.values[:, -1, 0] / math.sqrt(2.0)
        se = math.sqrt(2.0 / len(wT))  # SE of a unit-variance sample variance
        assert abs(wT.var(ddof=1) - 1.0) < 3 * se

    def test_terminal_correlation(self):
        drv = simulate_drivers(2, RHO2, np.linspace(0, 1, 51), 50_000, seed=2)
        c = np.corrcoef(drv.values[:, -1, 0], drv.values[:, -1, 1])[0, 1]
        se = (1 - 0.25) / math.sqrt(len(drv.values))
        assert abs(c - (-0.5)) < 3 * se

    def test_deterministic_across_workers(self):
        times = np.linspace(0, 1, 21)
        a = simulate_drivers(2, RHO2, times, 20_000, seed=3, workers=1)
        b = simulate_drivers(2, RHO2, times, 20_000, seed=3, workers=4)
        np.testing.assert_array_equal(a.values, b.values)

    def test_batch_split_invariance(self):
        times = np.linspace(0, 1, 21)
        small = simulate_drivers(2, RHO2, times, 9000, seed=4)
        large = simulate_drivers(2, RHO2, times, 30_000, seed=4)
        np.testing.assert_array_equal(small.values, large.values[:9000])

    def test_invalid_rho(self):
        with pytest.raises(ValueError):
            simulate_drivers(3, RHO2, np.linspace(0, 1, 11), 10, seed=0)


class TestFeatures:
    def test_empty_word_column_is_driver(self, features):
        drv = simulate_drivers(2, RHO2, np.linspace(0.0, 1.0, 201), 1000, seed=11)
        col = features.at(1.0)[:1000, features.words.index(())]
        np.testing.assert_allclose(col, drv.values[:, -1, 0], atol=1e-12)

    def test_time_word_column_is_sig_coefficient(self, features):
        drv = simulate_drivers(2, RHO2, np.linspace(0.0, 1.0, 201), 500, seed=11)
        from sigcal.signature import path_signature

        col = features.at(1.0)[:500, features.words.index((0,))]
        for i in (0, 123, 499):
            sig = path_signature(drv.path(i), 2).terminal()
            assert col[i] == pytest.approx(sig.coeff((0, 1)), abs=1e-12)

    def test_correction_block_is_difference(self, features):
        blk = features.correction_block(1.0, 0.5)
        np.testing.assert_array_equal(blk, features.at(1.0) - features.at(0.5))

    def test_fused_equals_two_step(self):
        times = np.linspace(0.0, 1.0, 51)
        drv = simulate_drivers(2, RHO2, times, 12_000, seed=9)
        two_step = precompute_features(drv, 2, RHO2, [0.5, 1.0], raw_level=3)
        fused = simulate_features(2, RHO2, times, 12_000, seed=9, n=2,
                                  maturities=[0.5, 1.0], raw_level=3)
        # the two routes differ only by a cumsum/diff round trip of increments
        np.testing.assert_allclose(two_step.feats, fused.feats, atol=1e-12)
        np.testing.assert_allclose(two_step.raw, fused.raw, atol=1e-12)
        # a repeated fused run is bitwise identical regardless of workers
        again = simulate_features(2, RHO2, times, 12_000, seed=9, n=2,
                                  maturities=[0.5, 1.0], raw_level=3, workers=3)
        np.testing.assert_array_equal(fused.feats, again.feats)

    def test_off_grid_maturity_rejected(self):
        times = np.linspace(0.0, 1.0, 51)
        drv = simulate_drivers(2, RHO2, times, 100, seed=9)
        with pytest.raises(ValueError):
            precompute_features(drv, 2, RHO2, [0.123456])


class TestMcPrice:
    def test_degenerate_model(self, features):
        spec0 = ModelSpec(d=2, n=2, rho=RHO2, s0=1.0, ell={}, basis=MARTINGALE)
        p, se = mc_price(spec0, features, "call", 1.0, 0.9)
        assert p == pytest.approx(0.1, abs=1e-15)
        assert se == pytest.approx(0.0, abs=1e-12)

    def test_bachelier_oracle(self, features):
        spec = ModelSpec(d=2, n=2, rho=RHO2, s0=1.0, ell={(): 0.25}, basis=MARTINGALE)
        p, se = mc_price(spec, features, "call", 1.0, 1.05)
        assert abs(p - bachelier_call(1.0, 1.05, 1.0, 0.25)) < 3 * se + 2e-4

    def test_put_call_parity(self, spec, features):
        c, _ = mc_price(spec, features, "call", 1.0, 1.02)
        p, _ = mc_price(spec, features, "put", 1.0, 1.02)
        s = terminal_samples(spec, features, 1.0)
        assert c - p == pytest.approx(float(s.mean()) - 1.02, abs=1e-12)

    def test_unknown_maturity(self, spec, features):
        with pytest.raises(ValueError):
            mc_price(spec, features, "call", 0.75, 1.0)

    def test_correction_blocks_enter_pricing(self, features):
        base = ModelSpec(d=2, n=2, rho=RHO2, s0=1.0, ell={(): 0.2}, basis=MARTINGALE)
        corr = ModelSpec(
            d=2, n=2, rho=RHO2, s0=1.0, ell={(): 0.2}, basis=MARTINGALE,
            corrections=((0.5, {(): 0.1}),),
        )
        s_base = terminal_samples(base, features, 1.0)
        s_corr = terminal_samples(corr, features, 1.0)
        blk = features.correction_block(1.0, 0.5)[:, features.words.index(())]
        np.testing.assert_allclose(s_corr, s_base + 0.1 * blk, atol=1e-14)
        # at the activation maturity itself the correction contributes nothing
        np.testing.assert_array_equal(
            terminal_samples(base, features, 0.5), terminal_samples(corr, features, 0.5)
        )


class TestGradient:
    def test_all_itm(self, spec, features):
        g = mc_price_gradient(spec, features, 1.0, -10.0)
        np.testing.assert_allclose(g, features.at(1.0).mean(axis=0), atol=1e-14)

    def test_all_otm(self, spec, features):
        g = mc_price_gradient(spec, features, 1.0, 10.0)
        np.testing.assert_array_equal(g, np.zeros(len(features.words)))

    def test_finite_difference(self, spec, features):
        # place the strike inside the widest inter-sample gap near the money
        # so no sample crosses the kink within the finite-difference step
        h = 1e-5
        T = 1.0
        s = np.sort(terminal_samples(spec, features, T))
        window = s[(s > 0.95) & (s < 1.15)]
        gaps = np.diff(window)
        j_gap = int(np.argmax(gaps))
        K = float(0.5 * (window[j_gap] + window[j_gap + 1]))
        assert gaps[j_gap] > 10 * h  # kink-free margin for the FD step
        g = mc_price_gradient(spec, features, T, K)
        theta = spec.coeff_vector()
        for j in range(len(theta)):
            up = dict(zip(spec.words(), theta))
            dn = dict(zip(spec.words(), theta))
            up[spec.words()[j]] += h
            dn[spec.words()[j]] -= h
            pu, _ = mc_price(ModelSpec(d=2, n=2, rho=RHO2, s0=1.0, ell=up,
                                       basis=MARTINGALE), features, "call", T, K)
            pd, _ = mc_price(ModelSpec(d=2, n=2, rho=RHO2, s0=1.0, ell=dn,
                                       basis=MARTINGALE), features, "call", T, K)
            assert abs((pu - pd) / (2 * h) - g[j]) < 1e-6


class TestSigPayoffPricing:
    def test_constant(self, spec):
        assert sig_payoff_price(SigPayoff({(): 3.25}), spec, 1.0) == 3.25

    def test_martingale_letter(self, spec):
        assert sig_payoff_price(SigPayoff({(1,): 1.0}), spec, 1.0) == pytest.approx(0.0, abs=1e-14)

    def test_asian_forward_vs_mc(self, spec):
        # trapezoid time-average over simulated model paths
        T, K = 1.0, 0.97
        times = np.linspace(0, T, 201)
        drv = simulate_drivers(2, RHO2, times, 20_000, seed=21)
        from sigcal.models import eval_model
        from sigcal.signature import SigStream, batch_signatures
        from sigcal.tensor_algebra import series_dim

        sigs = batch_signatures(drv.increments(), 2, store_all=True)
        from sigcal.pricing import tilde_projection

        _, P = tilde_projection(2, RHO2)
        paths = spec.s0 + sigs[:, :, : series_dim(3, 2)] @ (P.T @ spec.coeff_vector())
        avg = np.trapezoid(paths, times, axis=1) / T - K
        closed = sig_payoff_price(SigPayoff.asian_forward(spec.s0, K, T), spec, T)
        se = avg.std(ddof=1) / math.sqrt(len(avg))
        assert abs(closed - avg.mean()) < 3 * se + 1e-4

    def test_bad_letters_rejected(self):
        with pytest.raises(ValueError):
            SigPayoff({(2,): 1.0})


class TestFitSigPayoff:
    def test_constant_payoff(self, spec, features):
        sig_rows = model_sig_samples(spec, features, 1.0, 2)
        f = fit_sig_payoff(np.full(features.n_paths, 2.5), sig_rows, 2)
        assert f.coeffs[()] == pytest.approx(2.5, abs=1e-7)
        for w, c in f.coeffs.items():
            if w:
                assert abs(c) < 1e-7

    def test_exact_representability_of_asian(self, spec, features):
        T = 1.0
        sig_rows = model_sig_samples(spec, features, T, 2)
        asian = SigPayoff.asian_forward(spec.s0, 0.97, T)
        target = sig_rows @ asian.flat(2)
        f = fit_sig_payoff(target, sig_rows, 2)
        # the payoff functional is recovered (coefficients only up to shuffle
        # collinearity at a fixed maturity): values and price both match
        np.testing.assert_allclose(sig_rows @ f.flat(2), target, atol=1e-8)
        assert sig_payoff_price(f, spec, T) == pytest.approx(
            sig_payoff_price(asian, spec, T), abs=1e-8
        )


class TestControlVariate:
    def test_zero_cv_equals_plain(self, spec, features):
        p0, se0 = mc_price(spec, features, "call", 1.0, 1.02)
        p1, se1 = cv_price(spec, features, SigPayoff({}), 1.0, 1.02)
        assert (p1, se1) == (pytest.approx(p0, abs=1e-15), pytest.approx(se0, rel=1e-12))

    def test_variance_reduction_and_unbiasedness(self, spec, features):
        T, K = 1.0, 1.02
        sig_rows = model_sig_samples(spec, features, T, 2)
        s = terminal_samples(spec, features, T)
        f = fit_sig_payoff(np.maximum(s - K, 0.0), sig_rows, 2)
        p_cv, se_cv = cv_price(spec, features, f, T, K)
        p, se = mc_price(spec, features, "call", T, K)
        assert se_cv < se
        # the control variate itself is centered
        phi = f.coeffs.get((), 0.0) + features.raw_at(T) @ payoff_lift_vector(f, spec) \
            - sig_payoff_price(f, spec, T)
        assert abs(phi.mean()) < 3 * phi.std(ddof=1) / math.sqrt(len(phi))

    def test_missing_raw_features(self, spec):
        times = np.linspace(0.0, 1.0, 51)
        feats = simulate_features(2, RHO2, times, 1000, seed=1, n=2, maturities=[1.0])
        with pytest.raises(ValueError):
            cv_price(spec, feats, SigPayoff({(1, 1): 1.0}), 1.0, 1.0)
