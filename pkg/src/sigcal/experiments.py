"""Named end-to-end experiments behind the `reproduce` command.

Each runner is deterministic given its seed, returns (metrics, ok) where ok
reflects the experiment's acceptance thresholds, and optionally writes
plot-ready CSV/JSON files.  The acceptance test suite calls the same runners,
so the command line and the tests cannot drift apart.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import replace

import numpy as np

from .calibration import (
    CalibOptions,
    CalibReport,
    QuoteSurface,
    atm_skew,
    calibrate_slicewise,
    calibrate_surface,
    eval_volatility,
    fit_timeseries_price,
    fit_timeseries_vol,
    joint_calibrate,
)
from .expected_signature import CorrelationSpec
from .market_sim import SVParams, estimate_spot_qv, extract_drivers, heston_call_price, simulate
from .models import ModelSpec, eval_model, sabr_taylor_coefficients
from .pricing import (
    FeatureMatrix,
    SigPayoff,
    bs_price,
    fit_sig_payoff,
    sig_payoff_price,
    simulate_features,
    tilde_projection,
)
from .signature import SamplePath, batch_signatures, path_signature, run_chunked
from .tensor_algebra import series_dim

RHO_MODEL = CorrelationSpec(2, np.array([[1.0, -0.5], [-0.5, 1.0]]))

# paper parameter list {S0, V0, mu, kappa, theta, sigma, rho} for the
# time-series experiments
TS_PARAMS = dict(s0=1.0, v0=0.08, mu=0.001, kappa=0.5, theta=0.15, sigma=0.25, rho=-0.5)

# Heston surface parameters (kappa, theta, sigma, rho, V0) of the synthetic
# surface experiment
SURFACE_HESTON = SVParams(model="heston", s0=1.0, v0=0.08, mu=0.0,
                          kappa=0.1, theta=0.1, sigma=0.4, rho=-0.5)

MINUTES_PER_DAY = 480  # 8 trading hours of 1-minute ticks
DAYS_PER_YEAR = 365


def _write_json(outdir, name: str, doc: dict) -> None:
    if outdir is None:
        return
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, name), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_report(outdir, report: CalibReport, stem: str) -> None:
    if outdir is None:
        return
    os.makedirs(outdir, exist_ok=True)
    report.write_csv(os.path.join(outdir, f"{stem}.csv"))
    with open(os.path.join(outdir, f"{stem}.json"), "w") as fh:
        fh.write(report.to_json() + "\n")


# ---------------------------------------------------------------------------
# Appendix-B reproduction: vanilla calls are not fit-for-purpose sig-payoffs


def run_appendix_b(outdir=None, seed: int = 2024):
    """Regress a call payoff on level-5 signatures of a Black-Scholes market
    generator and show the resulting closed-ish price overshoots the true
    Black-Scholes price by more than 5 percent."""
    s0, K, T, sigma_eval = 100.0, 120.0, 0.5, 0.25
    m, n_fit, n_eval, steps = 5, 10_000, 200_000, 126

    times = np.linspace(0.0, T, steps + 1)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0)))
    sigmas = rng.uniform(0.05, 0.4, size=n_fit)
    z = rng.standard_normal((n_fit, steps))
    dt = T / steps
    logret = (-(0.5 * sigmas**2)[:, None] * dt
              + sigmas[:, None] * math.sqrt(dt) * z)
    paths = s0 * np.exp(np.concatenate([np.zeros((n_fit, 1)), np.cumsum(logret, axis=1)], axis=1))
    inc = np.empty((n_fit, steps, 2))
    inc[:, :, 0] = dt
    inc[:, :, 1] = np.diff(paths, axis=1)
    sig_rows = batch_signatures(inc, m)
    payoff = np.maximum(paths[:, -1] - K, 0.0)
    f = fit_sig_payoff(payoff, sig_rows, m)

    # evaluate the fitted sig-payoff under Black-Scholes at sigma = 0.25
    rng_eval = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 1)))
    sig_price_sum, sig_price_sq, n_done = 0.0, 0.0, 0
    fvec = f.flat(m)
    for lo in range(0, n_eval, 50_000):
        b = min(50_000, n_eval - lo)
        z = rng_eval.standard_normal((b, steps))
        logret = (-0.5 * sigma_eval**2) * dt + sigma_eval * math.sqrt(dt) * z
        paths = s0 * np.exp(
            np.concatenate([np.zeros((b, 1)), np.cumsum(logret, axis=1)], axis=1)
        )
        inc = np.empty((b, steps, 2))
        inc[:, :, 0] = dt
        inc[:, :, 1] = np.diff(paths, axis=1)
        vals = batch_signatures(inc, m) @ fvec
        sig_price_sum += float(vals.sum())
        sig_price_sq += float(vals @ vals)
        n_done += b
    sig_price = sig_price_sum / n_done
    sig_se = math.sqrt(max(sig_price_sq / n_done - sig_price**2, 0.0) / n_done)

    analytic = bs_price(s0, K, T, sigma_eval)
    gap = abs(sig_price - analytic) / analytic
    metrics = {
        "bs_price_analytic": analytic,
        "bs_reference": 1.5155,
        "sig_payoff_price": sig_price,
        "sig_payoff_price_se": sig_se,
        "relative_gap": gap,
        "m": m, "n_fit": n_fit, "n_eval": n_eval,
    }
    ok = abs(analytic - 1.5155) <= 1e-4 and gap > 0.05
    metrics["pass"] = bool(ok)
    _write_json(outdir, "appendix_b.json", metrics)
    return metrics, ok


# ---------------------------------------------------------------------------
# Time-series calibration experiments


def _simulate_and_extract(params: SVParams, years: float, seed: int, n_paths: int,
                          ticks_per_day: int = 3, window: int = 60):
    """Fine-grid simulation, spot-QV driver extraction, tick subsampling.

    Returns (times_sub, S_sub, driver paths at the tick grid) for each path.
    """
    M = int(round(years * DAYS_PER_YEAR * MINUTES_PER_DAY))
    times = np.linspace(0.0, years, M + 1)
    S, V = simulate(params, times, n_paths, seed)
    stride = MINUTES_PER_DAY // ticks_per_day
    sub = np.arange(0, M + 1, stride)
    out = []
    for i in range(n_paths):
        qv_s = estimate_spot_qv(S[i], times, window=window)
        qv_v = estimate_spot_qv(V[i], times, window=window)
        drv = extract_drivers(S[i], V[i], qv_s, qv_v, times)
        out.append((times[sub], S[i][sub], SamplePath(times[sub], drv.values[sub])))
    return out


def run_heston_ts(outdir=None, seed: int = 11, n_oos: int = 100):
    """Lasso price regression on drivers extracted from Heston data.

    Drivers are extracted at the 1-minute class with a one-day trailing QV
    window; shorter windows leave enough estimator noise in the drivers to
    roughly double the out-of-sample MSE.
    """
    params = SVParams(model="heston", **TS_PARAMS)
    n = 2
    window = MINUTES_PER_DAY
    (t_tr, s_tr, drv_tr), = _simulate_and_extract(params, 1.0, seed, 1, window=window)
    stream = path_signature(drv_tr, n)
    spec = fit_timeseries_price(stream, s_tr, n=n, penalty="l1", lam=1e-5, rho=RHO_MODEL)
    mse_in = float(np.mean((eval_model(spec, stream) - s_tr) ** 2))

    oos = _simulate_and_extract(params, 0.5, seed + 1, n_oos, window=window)
    mses = []
    for t_o, s_o, drv_o in oos:
        st = path_signature(drv_o, n)
        pred = eval_model(replace(spec, s0=float(s_o[0])), st)
        mses.append(float(np.mean((pred - s_o) ** 2)))
    mse_out = float(np.mean(mses))

    metrics = {
        "mse_in_sample": mse_in,
        "mse_out_of_sample": mse_out,
        "n_out_of_sample_paths": n_oos,
        "coefficients": {str(k): v for k, v in spec.ell.items()},
        "paper_reference": {"mse_in": 2.574e-6, "mse_out": 2.841e-4},
    }
    ok = mse_in <= 1e-4 and mse_out <= 1e-3
    metrics["pass"] = bool(ok)
    _write_json(outdir, "heston_ts.json", metrics)
    if outdir is not None:
        t_o, s_o, drv_o = oos[0]
        pred = eval_model(replace(spec, s0=float(s_o[0])), path_signature(drv_o, n))
        rows = np.column_stack([t_o, s_o, pred])
        np.savetxt(os.path.join(outdir, "heston_ts_oos_path.csv"), rows,
                   delimiter=",", header="t,S,S_model", comments="")
    return metrics, ok


def run_sabr_ts(outdir=None, seed: int = 12):
    """Spot-volatility regression on drivers extracted from the SABR system."""
    params = SVParams(model="sabr", **TS_PARAMS)
    n = 2
    years = 1.0
    M = int(round(years * DAYS_PER_YEAR * MINUTES_PER_DAY))
    times = np.linspace(0.0, years, M + 1)
    S, V = simulate(params, times, 1, seed)
    # spot-vol target over a one-day trailing window (noise ~ sqrt(2/window))
    qv_s_vol = estimate_spot_qv(S[0], times, window=MINUTES_PER_DAY)
    qv_s = estimate_spot_qv(S[0], times, window=60)
    qv_v = estimate_spot_qv(V[0], times, window=60)
    drv = extract_drivers(S[0], V[0], qv_s, qv_v, times)
    stride = MINUTES_PER_DAY // 3
    sub = np.arange(0, M + 1, stride)
    stream = path_signature(SamplePath(times[sub], drv.values[sub]), n)
    target = np.sqrt(qv_s_vol[sub])
    spec = fit_timeseries_vol(stream, target, n=n, penalty="l1", lam=1e-5,
                              rho=RHO_MODEL, s0=float(S[0, 0]))
    fit_path = eval_volatility(spec, stream)
    mse_in = float(np.mean((fit_path - target) ** 2))
    true_vol = S[0][sub] * V[0][sub]
    mse_vs_true = float(np.mean((fit_path - true_vol) ** 2))
    metrics = {
        "mse_in_sample": mse_in,
        "mse_vs_true_spot_vol": mse_vs_true,
        "paper_reference": {"mse_in": 3.204e-6, "mse_out": 1.060e-6},
    }
    ok = mse_in <= 1e-4
    metrics["pass"] = bool(ok)
    _write_json(outdir, "sabr_ts.json", metrics)
    if outdir is not None:
        rows = np.column_stack([times[sub], target, fit_path])
        np.savetxt(os.path.join(outdir, "sabr_ts_vol_fit.csv"), rows,
                   delimiter=",", header="t,spot_vol_target,spot_vol_model", comments="")
    return metrics, ok


# ---------------------------------------------------------------------------
# Surface calibration experiments


def heston_reference_surface(params: SVParams, maturities, strikes) -> QuoteSurface:
    Ts, Ks, mids = [], [], []
    for T in maturities:
        for K in strikes:
            Ts.append(T)
            Ks.append(K)
            mids.append(heston_call_price(params, T, K))
    return QuoteSurface.from_quotes(params.s0, np.array(Ts), np.array(Ks),
                                    mid=np.array(mids))


def _surface_grid(maturities, steps_per_year: int = 365) -> np.ndarray:
    horizon = max(maturities)
    base = np.linspace(0.0, horizon, int(round(horizon * steps_per_year)) + 1)
    return np.unique(np.concatenate([base, np.asarray(maturities)]))


# five maturities from 3 months to 2 years: the 30-day smile of this Heston
# surface sits beyond the order-3 model class at the 100 bps level (the same
# short-maturity wall the SPX experiments hit), so the desk-scale surface
# starts at a quarter
SURFACE_MATURITIES = (0.25, 0.5, 1.0, 1.5, 2.0)
SURFACE_STRIKES = tuple(np.round(np.linspace(0.8, 1.2, 9), 4))


def run_heston_surface(outdir=None, seed: int = 21, n_mc: int = 200_000,
                       iters: int = 2000):
    """Joint fit of the order-3 model to a Heston surface (5 x 9 quotes)."""
    surface = heston_reference_surface(SURFACE_HESTON, SURFACE_MATURITIES,
                                       SURFACE_STRIKES)
    grid = _surface_grid(SURFACE_MATURITIES)
    features = simulate_features(2, RHO_MODEL, grid, n_mc, seed=seed, n=3,
                                 maturities=SURFACE_MATURITIES)
    report = calibrate_surface(surface, features, n=3,
                               opts=CalibOptions(iters=iters, seed=seed))
    metrics = {
        "max_abs_iv_error_bps": report.max_err_bps(),
        "mean_abs_iv_error_bps": report.mean_err_bps(),
        "n_mc": n_mc,
        "n_quotes": len(surface),
        "loss_final": float(report.loss_trace[-1]),
    }
    ok = report.max_err_bps() <= 100.0 and report.mean_err_bps() <= 30.0
    metrics["pass"] = bool(ok)
    _write_json(outdir, "heston_surface.json", metrics)
    _write_report(outdir, report, "heston_surface_fit")
    return metrics, ok


def run_slicewise(outdir=None, seed: int = 22, n_mc: int = 200_000,
                  iters: int = 4000, trend_seeds: tuple = (22, 122, 222)):
    """Slice-wise time-dependent fit of the order-2 model with corrections."""
    surface = heston_reference_surface(SURFACE_HESTON, SURFACE_MATURITIES,
                                       SURFACE_STRIKES)
    grid = _surface_grid(SURFACE_MATURITIES)
    features = simulate_features(2, RHO_MODEL, grid, n_mc, seed=seed, n=2,
                                 maturities=SURFACE_MATURITIES)
    report = calibrate_slicewise(surface, features, n=2,
                                 opts=CalibOptions(iters=iters, seed=seed))
    per_smile = {
        f"{T:.4f}": float(report.abs_err_bps[report.T == T].max())
        for T in np.unique(report.T)
    }
    skew_target = atm_skew(surface.T, surface.K, surface.iv, surface.s0)
    skew_model = atm_skew(report.T, report.K, report.model_iv, surface.s0)
    skew_rel = {
        f"{T:.4f}": abs(skew_model[T] - skew_target[T]) / abs(skew_target[T])
        for T in skew_target
    }

    # correction norms shrink with maturity index (medians over repeat seeds)
    norms = []
    for s in trend_seeds:
        feats_s = (features if s == seed else
                   simulate_features(2, RHO_MODEL, grid, n_mc, seed=s, n=2,
                                     maturities=SURFACE_MATURITIES))
        rep_s = (report if s == seed else
                 calibrate_slicewise(surface, feats_s, n=2,
                                     opts=CalibOptions(iters=iters, seed=s)))
        norms.append([
            float(np.linalg.norm(list(em.values()))) for _, em in rep_s.spec.corrections
        ])
    med = np.median(np.asarray(norms), axis=0)
    k_idx = np.arange(len(med))
    slope = float(np.polyfit(k_idx, np.log(med + 1e-12), 1)[0]) if len(med) > 1 else 0.0
    trend_ok = bool(med[-1] <= med[0] and slope <= 0.0)

    max_skew_rel = max(skew_rel.values())
    ok = (max(per_smile.values()) <= 50.0 and max_skew_rel <= 0.20 and trend_ok)
    metrics = {
        "per_smile_max_abs_iv_error_bps": per_smile,
        "atm_skew_relative_error": skew_rel,
        "correction_norm_medians": [float(x) for x in med],
        "correction_trend_slope": slope,
        "n_mc": n_mc,
        "pass": bool(ok),
    }
    _write_json(outdir, "slicewise.json", metrics)
    _write_report(outdir, report, "slicewise_fit")
    if outdir is not None:
        rows = [(T, skew_target[T], skew_model[T]) for T in sorted(skew_target)]
        np.savetxt(os.path.join(outdir, "slicewise_atm_skew.csv"), np.array(rows),
                   delimiter=",", header="T,psi_target,psi_model", comments="")
    return metrics, ok


JOINT_P = SVParams(model="heston", s0=1.0, v0=0.12, mu=0.001, kappa=0.8,
                   theta=0.1, sigma=0.55, rho=-0.5)
JOINT_Q = SVParams(model="heston", s0=1.0, v0=0.12, mu=0.0, kappa=0.0,
                   theta=0.0, sigma=0.55, rho=-0.5)


def run_joint(outdir=None, seed: int = 23, n_mc: int = 200_000, iters: int = 3000):
    """Joint calibration: 3 months of daily path data plus two smiles."""
    n = 2
    maturities = (0.25, 1.0)
    strikes = np.round(np.linspace(0.7, 1.3, 9), 4)
    surface = heston_reference_surface(JOINT_Q, maturities, strikes)

    # nine months of data under P, daily driver extraction, one-day QV window
    (t_all, s_all, drv_all), = _simulate_and_extract(JOINT_P, 0.75, seed, 1,
                                                     ticks_per_day=1,
                                                     window=MINUTES_PER_DAY)
    stream = path_signature(drv_all, n)
    n_train = 91
    train_slice = slice(0, n_train + 1)

    grid = _surface_grid(maturities)
    features = simulate_features(2, RHO_MODEL, grid, n_mc, seed=seed, n=n,
                                 maturities=maturities)

    # the path loss sees only the training window
    from .signature import SigStream

    sub_stream = SigStream(stream.times[train_slice], stream.d, stream.N,
                           stream.coeffs[train_slice], stream.increments[: n_train])
    report = joint_calibrate(sub_stream, s_all[train_slice], surface, features,
                             lambda_mix=0.9, n=n,
                             opts=CalibOptions(iters=iters, seed=seed))
    pred = eval_model(report.spec, stream)
    mse_oos = float(np.mean((pred[n_train + 1:] - s_all[n_train + 1:]) ** 2))
    metrics = {
        "iv_max_error_bps": report.max_err_bps(),
        "iv_mean_error_bps": report.mean_err_bps(),
        "path_mse_train": report.path_mse,
        "path_mse_out_of_sample": mse_oos,
        "paper_reference": {"iv_max_bps": 25.0, "path_mse_oos": 1.497e-5},
    }
    ok = report.max_err_bps() <= 50.0 and mse_oos <= 1e-4
    metrics["pass"] = bool(ok)
    _write_json(outdir, "joint.json", metrics)
    _write_report(outdir, report, "joint_fit")
    if outdir is not None:
        rows = np.column_stack([t_all, s_all, pred])
        np.savetxt(os.path.join(outdir, "joint_path.csv"), rows, delimiter=",",
                   header="t,S,S_model", comments="")
    return metrics, ok


# ---------------------------------------------------------------------------
# SABR short-horizon scaling


def run_sabr_scaling(outdir=None, seed: int = 24, n_paths: int = 10_000):
    """Median pathwise gap between lognormal SABR and its order-2 model
    shrinks like t^(3/2) as the horizon halves.

    The grid must be much finer than the shortest horizon: the interpolated
    Levy area carries O(sqrt(t dt)) noise that would otherwise flatten the
    observed exponent.
    """
    s0, v0, alpha = 1.0, 0.3, 0.8
    spec = sabr_taylor_coefficients(s0, v0, alpha)
    dt = 2.0**-14
    eval_t = [0.125, 0.25, 0.5, 1.0]
    M = int(round(eval_t[-1] / dt))
    snap = np.array([int(round(t / dt)) for t in eval_t])
    proj = tilde_projection(2, spec.rho)[1].T @ spec.coeff_vector()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0)))
    errs = []
    for lo in range(0, n_paths, 500):
        b = min(500, n_paths - lo)
        z = rng.standard_normal((b, M, 2))
        db = math.sqrt(dt) * z[:, :, 0]
        dw = math.sqrt(dt) * z[:, :, 1]
        # exact lognormal volatility, log-Euler price on the same increments
        w_path = np.cumsum(dw, axis=1)
        v_left = v0 * np.exp(
            alpha * np.concatenate([np.zeros((b, 1)), w_path[:, :-1]], axis=1)
            - 0.5 * alpha**2 * dt * np.arange(M)[None, :]
        )
        log_s = np.cumsum(v_left * db - 0.5 * v_left**2 * dt, axis=1)
        s_true = s0 * np.exp(log_s[:, snap - 1])
        inc = np.empty((b, M, 3))
        inc[:, :, 0] = dt
        inc[:, :, 1] = db
        inc[:, :, 2] = dw
        sigs = batch_signatures(inc, 2, snapshots=snap)
        s_model = s0 + sigs[:, :, : series_dim(3, 2)] @ proj
        errs.append(np.abs(s_model - s_true))

    med = np.median(np.concatenate(errs), axis=0)
    slope = float(np.polyfit(np.log2(eval_t), np.log2(med), 1)[0])
    metrics = {
        "eval_t": eval_t,
        "median_abs_error": [float(x) for x in med],
        "scaling_exponent": slope,
        "theory_exponent": 1.5,
    }
    ok = 1.2 <= slope <= 1.8
    metrics["pass"] = bool(ok)
    _write_json(outdir, "sabr_scaling.json", metrics)
    return metrics, ok


EXPERIMENTS = {
    "appendix-b": run_appendix_b,
    "heston-ts": run_heston_ts,
    "sabr-ts": run_sabr_ts,
    "heston-surface": run_heston_surface,
    "slicewise": run_slicewise,
    "joint": run_joint,
    "sabr-scaling": run_sabr_scaling,
}
