import math

import numpy as np
import pytest

from sigcal.expected_signature import CorrelationSpec, expected_sig
from sigcal.models import (
    MARTINGALE,
    PLAIN,
    ModelSpec,
    eval_model,
    model_sig_lift,
    model_variance,
    sabr_taylor_coefficients,
    tilde_basis,
    to_plain,
)
from sigcal.pricing import simulate_drivers
from sigcal.signature import SamplePath, batch_signatures, path_signature
from sigcal.tensor_algebra import TensorSeries, inner, max_abs_diff

RHO2 = CorrelationSpec(2, np.array([[1.0, -0.5], [-0.5, 1.0]]))


def bm_stream(rng, d=2, M=400, T=1.0, N=4, rho=None):
    rho = rho or CorrelationSpec.identity(d)
    L = rho.cholesky()
    inc = rng.standard_normal((M, d)) @ L.T * math.sqrt(T / M)
    vals = np.vstack([np.zeros(d), np.cumsum(inc, axis=0)])
    return path_signature(SamplePath(np.linspace(0, T, M + 1), vals), N)


def random_spec(rng, d=2, n=2, rho=RHO2, s0=1.0):
    from sigcal.tensor_algebra import iter_words

    ell = {w: 0.15 * rng.standard_normal() for w in iter_words(n - 1, d)}
    ell[()] = 0.2 + 0.05 * rng.standard_normal()
    return ModelSpec(d=d, n=n, rho=rho, s0=s0, ell=ell, basis=MARTINGALE)


class TestTildeBasis:
    def test_empty_word(self):
        got = tilde_basis((), 1, RHO2)
        assert max_abs_diff(got, TensorSeries.basis((1,), 2, 1)) == 0

    def test_time_last_letter_no_correction(self):
        got = tilde_basis((0,), 1, RHO2)
        assert max_abs_diff(got, TensorSeries.basis((0, 1), 2, 2)) == 0

    def test_brownian_last_letter(self):
        got = tilde_basis((2,), 1, RHO2)
        want = TensorSeries.from_dict({(2, 1): 1.0, (0,): 0.25}, 2, 2)
        assert max_abs_diff(got, want) == 0

    def test_time_letter_is_not_a_driver(self):
        with pytest.raises(ValueError):
            tilde_basis((1,), 0, RHO2)


class TestEvalModel:
    def test_zero_coefficients_constant(self):
        rng = np.random.default_rng(0)
        st = bm_stream(rng, rho=RHO2)
        spec = ModelSpec(d=2, n=2, rho=RHO2, s0=1.7, ell={}, basis=MARTINGALE)
        np.testing.assert_array_equal(eval_model(spec, st), np.full(len(st), 1.7))

    def test_sigma_only_is_scaled_driver(self):
        rng = np.random.default_rng(1)
        st = bm_stream(rng, rho=RHO2)
        spec = ModelSpec(d=2, n=1, rho=RHO2, s0=1.0, ell={(): 0.3}, basis=MARTINGALE)
        w1 = np.concatenate([[0.0], np.cumsum(st.increments[:, 1])])
        np.testing.assert_allclose(eval_model(spec, st), 1.0 + 0.3 * w1, atol=1e-12)

    def test_constant_correction_adds_shifted_driver(self):
        rng = np.random.default_rng(2)
        st = bm_stream(rng, M=100)
        T1 = st.times[40]
        spec = ModelSpec(
            d=2, n=2, rho=CorrelationSpec.identity(2), s0=1.0, ell={(): 0.2},
            basis=MARTINGALE, corrections=((T1, {(): 0.5}),),
        )
        w1 = np.concatenate([[0.0], np.cumsum(st.increments[:, 1])])
        want = 1.0 + 0.2 * w1 + 0.5 * np.where(st.times >= T1, w1 - w1[40], 0.0)
        np.testing.assert_allclose(eval_model(spec, st), want, atol=1e-12)

    def test_correction_continuity_at_activation(self):
        rng = np.random.default_rng(3)
        st = bm_stream(rng, M=100)
        T1 = st.times[50]
        base = dict(d=2, n=2, rho=CorrelationSpec.identity(2), s0=1.0,
                    ell={(): 0.2, (1,): 0.1}, basis=MARTINGALE)
        with_corr = ModelSpec(**base, corrections=((T1, {(): 0.4, (0,): 0.3}),))
        without = ModelSpec(**base)
        pa = eval_model(with_corr, st)
        pb = eval_model(without, st)
        assert pa[50] == pb[50]  # correction vanishes at its own activation

    def test_off_grid_maturity_rejected(self):
        rng = np.random.default_rng(4)
        st = bm_stream(rng, M=50)
        spec = ModelSpec(
            d=2, n=2, rho=CorrelationSpec.identity(2), s0=1.0, ell={(): 0.2},
            basis=MARTINGALE, corrections=((0.123456789, {(): 0.1}),),
        )
        with pytest.raises(ValueError):
            eval_model(spec, st)


class TestBasisTransform:
    def test_driver_constant(self):
        spec = ModelSpec(d=2, n=1, rho=RHO2, s0=0.0, ell={(): 1.0}, basis=MARTINGALE)
        plain = to_plain(spec)
        assert plain.basis == PLAIN
        assert plain.ell == {(1,): 1.0}

    def test_correlated_word(self):
        spec = ModelSpec(d=2, n=2, rho=RHO2, s0=0.0, ell={(2,): 1.0}, basis=MARTINGALE)
        plain = to_plain(spec)
        assert plain.ell[(2, 1)] == pytest.approx(1.0)
        assert plain.ell[(0,)] == pytest.approx(0.25)

    def test_roundtrip_path_equality(self):
        rng = np.random.default_rng(5)
        st = bm_stream(rng, N=3, rho=RHO2)
        spec = random_spec(rng, n=3)
        plain = to_plain(spec)
        np.testing.assert_allclose(
            eval_model(spec, st), eval_model(plain, st), atol=1e-12
        )


class TestLift:
    def test_time_letter(self):
        spec = random_spec(np.random.default_rng(6))
        got = model_sig_lift(spec, (0,))
        assert max_abs_diff(got, TensorSeries.basis((0,), 2, got.N)) == 0

    def test_price_letter_is_driver_block(self):
        spec = random_spec(np.random.default_rng(7))
        got = model_sig_lift(spec, (1,))
        assert max_abs_diff(got, spec.driver_block().truncated(got.N)) == 0

    def test_letters_outside_alphabet(self):
        spec = random_spec(np.random.default_rng(8))
        with pytest.raises(ValueError):
            model_sig_lift(spec, (2,))

    def test_pathwise_identity_against_direct_signature(self):
        rng = np.random.default_rng(9)
        spec = random_spec(rng, n=2)
        st = bm_stream(rng, M=3000, N=4, rho=RHO2)
        S = eval_model(spec, st)
        model_sig = path_signature(SamplePath(st.times, S[:, None]), 2).terminal()
        for J in [(1,), (1, 1)]:
            lhs = inner(model_sig_lift(spec, J), st.terminal())
            assert lhs == pytest.approx(model_sig.coeff(J), rel=1e-10, abs=1e-12)
        # time-integral words acquire only discretization error
        for J in [(1, 0), (0, 1)]:
            lhs = inner(model_sig_lift(spec, J), st.terminal())
            assert lhs == pytest.approx(model_sig.coeff(J), rel=2e-3, abs=1e-5)

    def test_integral_lift_against_quadrature(self):
        rng = np.random.default_rng(10)
        spec = random_spec(rng, n=2)
        errs = []
        for M in (200, 800):
            st = bm_stream(np.random.default_rng(11), M=M, N=4, rho=RHO2)
            S = eval_model(spec, st)
            quad = np.trapezoid(S - spec.s0, st.times)
            lift_val = inner(model_sig_lift(spec, (1, 0)), st.terminal())
            errs.append(abs(lift_val - quad) / max(abs(quad), 1e-12))
        assert errs[0] < 1e-3 and errs[1] < errs[0]


class TestVariance:
    def test_scaled_driver(self):
        spec = ModelSpec(d=1, n=1, rho=CorrelationSpec.identity(1), s0=1.0,
                         ell={(): 0.3}, basis=MARTINGALE)
        assert model_variance(spec, 2.0) == pytest.approx(0.09 * 2.0, rel=1e-12)

    def test_zero(self):
        spec = ModelSpec(d=2, n=2, rho=RHO2, s0=1.0, ell={}, basis=MARTINGALE)
        assert model_variance(spec, 1.0) == 0.0

    def test_against_mc(self):
        rng = np.random.default_rng(12)
        spec = random_spec(rng, n=2)
        t = 1.0
        drv = simulate_drivers(2, RHO2, np.linspace(0, t, 201), 100_000, seed=5)
        sigs = batch_signatures(drv.increments(), 2)
        from sigcal.pricing import tilde_projection

        _, P = tilde_projection(2, RHO2)
        samples = sigs @ P.T @ spec.coeff_vector()
        var_mc = samples.var(ddof=1)
        se = var_mc * math.sqrt(2.0 / (len(samples) - 1))
        assert abs(model_variance(spec, t) - var_mc) < 3 * se

    def test_martingale_mean(self):
        rng = np.random.default_rng(13)
        spec = random_spec(rng, n=2)
        drv = simulate_drivers(2, RHO2, np.linspace(0, 1.0, 201), 100_000, seed=6)
        sigs = batch_signatures(drv.increments(), 2)
        from sigcal.pricing import tilde_projection

        _, P = tilde_projection(2, RHO2)
        samples = sigs @ P.T @ spec.coeff_vector()
        se = samples.std(ddof=1) / math.sqrt(len(samples))
        assert abs(samples.mean()) < 3 * se


class TestSabrCoefficients:
    def test_literal_values(self):
        spec = sabr_taylor_coefficients(1.0, 0.2, 0.3)
        assert spec.s0 == 1.0
        assert spec.ell[()] == pytest.approx(0.2)
        assert spec.ell[(0,)] == pytest.approx(-0.5 * 0.2**3 - 0.5 * 0.3**2 * 0.2)
        assert spec.ell[(1,)] == pytest.approx(0.2**2)
        assert spec.ell[(2,)] == pytest.approx(0.3 * 0.2)

    def test_no_vol_of_vol(self):
        spec = sabr_taylor_coefficients(1.0, 0.2, 0.0)
        assert spec.ell[(2,)] == 0.0


class TestSpecValidationAndIO:
    def test_degree_bound(self):
        with pytest.raises(ValueError):
            ModelSpec(d=2, n=2, rho=RHO2, s0=1.0, ell={(1, 1): 0.1}, basis=MARTINGALE)

    def test_plain_constant_rejected(self):
        with pytest.raises(ValueError):
            ModelSpec(d=2, n=2, rho=RHO2, s0=1.0, ell={(): 0.1}, basis=PLAIN)

    def test_correction_ordering(self):
        with pytest.raises(ValueError):
            ModelSpec(
                d=2, n=2, rho=RHO2, s0=1.0, ell={(): 0.1}, basis=MARTINGALE,
                corrections=((0.5, {(): 0.1}), (0.25, {(): 0.1})),
            )

    def test_corrections_need_martingale(self):
        with pytest.raises(ValueError):
            ModelSpec(
                d=2, n=2, rho=RHO2, s0=1.0, ell={(1,): 0.1}, basis=PLAIN,
                corrections=((0.5, {(): 0.1}),),
            )

    def test_json_roundtrip(self, tmp_path):
        spec = ModelSpec(
            d=2, n=2, rho=RHO2, s0=1.1, ell={(): 0.2, (0,): -0.05}, basis=MARTINGALE,
            corrections=((0.25, {(): 0.01}), (0.5, {(1,): -0.02})),
        )
        f = tmp_path / "model.json"
        spec.save(f)
        back = ModelSpec.load(f)
        assert back.ell == spec.ell
        assert back.corrections == spec.corrections
        assert back.s0 == spec.s0
        np.testing.assert_array_equal(back.rho.rho, spec.rho.rho)
