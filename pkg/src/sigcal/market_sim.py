"""Synthetic market data: stochastic-volatility simulation, spot
quadratic-variation estimation, and Brownian driver extraction.

The simulators cover a Heston model (full-truncation Euler), the
mean-reverting lognormal-vol system used for time-series experiments
(kappa = 0 gives plain lognormal SABR with beta = 1), and a correlated
multi-dimensional Black-Scholes model.  Driver extraction divides price and
volatility increments by the square root of the estimated spot quadratic
variation, which removes the physical drift and yields the risk-neutral
Brownian paths used as the primary process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .pricing import _chunk_normals
from .signature import SamplePath, run_chunked

_TIME_BLOCK = 4096  # normals are drawn per chunk in fixed time blocks


@dataclass(frozen=True)
class SVParams:
    """Parameters of one of the synthetic market models.

    model is "heston", "sabr" or "multibs".  For the scalar models the
    fields are (s0, v0, mu, kappa, theta, sigma, rho); multibs uses
    s0_vec, mu_vec and the covariance matrix cov.
    """

    model: str
    s0: float = 1.0
    v0: float = 0.0
    mu: float = 0.0
    kappa: float = 0.0
    theta: float = 0.0
    sigma: float = 0.0
    rho: float = 0.0
    s0_vec: np.ndarray | None = None
    mu_vec: np.ndarray | None = None
    cov: np.ndarray | None = None

    def __post_init__(self):
        if self.model in ("heston", "sabr"):
            if self.kappa < 0 or self.theta < 0:
                raise ValueError("need kappa, theta >= 0")
            if abs(self.rho) > 1:
                raise ValueError("need |rho| <= 1")
            if self.v0 < 0 or self.s0 <= 0:
                raise ValueError("need v0 >= 0 and s0 > 0")
        elif self.model == "multibs":
            cov = np.asarray(self.cov, dtype=float)
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError("cov must be symmetric")
            np.linalg.cholesky(cov + 1e-14 * np.eye(len(cov)))
            object.__setattr__(self, "cov", cov)
            object.__setattr__(self, "s0_vec", np.asarray(self.s0_vec, dtype=float))
            object.__setattr__(self, "mu_vec", np.asarray(self.mu_vec, dtype=float))
        else:
            raise ValueError(f"unknown model tag {self.model!r}")


def simulate(
    params: SVParams, times: np.ndarray, n_paths: int, seed: int,
    workers: int | None = None,
):
    """Simulate (S, V) paths on the grid; V is None for multibs.

    Heston uses full-truncation Euler (variance clamped at zero inside the
    coefficients), the sabr system uses Euler for the volatility and
    log-Euler for the price, multibs is exact log-Euler.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    M = len(times) - 1
    dt = np.diff(times)

    if params.model == "multibs":
        d = len(params.s0_vec)
        L = np.linalg.cholesky(params.cov + 1e-14 * np.eye(d))
        drift = (params.mu_vec - 0.5 * np.diag(params.cov))[None, None, :]
        S = np.empty((n_paths, M + 1, d))

        def fill(lo: int, hi: int, ci: int) -> None:
            z = _chunk_normals(seed, ci, (hi - lo, M, d))
            steps = drift * dt[None, :, None] + (z @ L.T) * np.sqrt(dt)[None, :, None]
            logs = np.cumsum(steps, axis=1)
            S[lo:hi, 0, :] = params.s0_vec
            S[lo:hi, 1:, :] = params.s0_vec[None, None, :] * np.exp(logs)

        run_chunked(n_paths, fill, workers=workers)
        return S, None

    heston = params.model == "heston"
    c2 = math.sqrt(1.0 - params.rho**2)
    S = np.empty((n_paths, M + 1))
    V = np.empty((n_paths, M + 1))

    def fill(lo: int, hi: int, ci: int) -> None:
        B = hi - lo
        logs = np.full(B, math.log(params.s0))
        v = np.full(B, params.v0)
        S[lo:hi, 0] = params.s0
        V[lo:hi, 0] = params.v0
        ss = np.random.SeedSequence(entropy=(int(seed), int(ci)))
        rng = np.random.default_rng(ss)
        for start in range(0, M, _TIME_BLOCK):
            stop = min(start + _TIME_BLOCK, M)
            z = rng.standard_normal((B, stop - start, 2))
            for m in range(start, stop):
                z1 = z[:, m - start, 0]
                z2 = params.rho * z1 + c2 * z[:, m - start, 1]
                h = dt[m]
                sq = math.sqrt(h)
                vp = np.maximum(v, 0.0)
                if heston:
                    logs += (params.mu - 0.5 * vp) * h + np.sqrt(vp) * sq * z1
                    v = v + params.kappa * (params.theta - vp) * h \
                        + params.sigma * np.sqrt(vp) * sq * z2
                else:
                    logs += (params.mu - 0.5 * vp * vp) * h + vp * sq * z1
                    v = v + params.kappa * (params.theta - vp) * h \
                        + params.sigma * vp * sq * z2
                S[lo:hi, m + 1] = np.exp(logs)
                V[lo:hi, m + 1] = v

    run_chunked(n_paths, fill, workers=workers)
    return S, V


def estimate_spot_qv(series: np.ndarray, times: np.ndarray, window: int = 60) -> np.ndarray:
    """Rolling spot quadratic variation: trailing realized variance over
    `window` increments divided by the window duration.

    The first `window` entries are backfilled with the first valid value.
    """
    x = np.asarray(series, dtype=float)
    t = np.asarray(times, dtype=float)
    M = len(x) - 1
    if window < 2:
        raise ValueError("need window >= 2")
    if window > M:
        raise ValueError(f"window {window} longer than series ({M} increments)")
    d2 = np.diff(x) ** 2
    csum = np.concatenate([[0.0], np.cumsum(d2)])
    out = np.empty(M + 1)
    idx = np.arange(window, M + 1)
    out[window:] = (csum[idx] - csum[idx - window]) / (t[idx] - t[idx - window])
    out[:window] = out[window]
    return out


def extract_drivers(
    s: np.ndarray, v: np.ndarray, qv_s: np.ndarray, qv_v: np.ndarray,
    times: np.ndarray,
) -> SamplePath:
    """Recover the risk-neutral Brownian drivers from price and vol series.

    Each increment is divided by the square root of the trailing spot QV
    estimate at the left endpoint; cumulative sums give the 2-d driver path
    fed to the signature machinery.
    """
    s = np.asarray(s, dtype=float)
    v = np.asarray(v, dtype=float)
    qs = np.asarray(qv_s, dtype=float)[:-1]
    qv = np.asarray(qv_v, dtype=float)[:-1]
    if np.any(qs <= 0.0) or np.any(qv <= 0.0):
        raise ValueError("nonpositive spot QV estimate; estimator failed")
    db = np.diff(s) / np.sqrt(qs)
    dw = np.diff(v) / np.sqrt(qv)
    out = np.zeros((len(s), 2))
    out[1:, 0] = np.cumsum(db)
    out[1:, 1] = np.cumsum(dw)
    return SamplePath(times, out)


# ---------------------------------------------------------------------------
# Characteristic-function Heston call prices (used to build synthetic target
# surfaces deterministically; zero rates, martingale spot)


def _heston_cf(u: complex, p: SVParams, T: float) -> complex:
    xi = p.kappa - p.rho * p.sigma * 1j * u
    dd = np.sqrt(xi * xi + p.sigma**2 * (1j * u + u * u))
    g = (xi - dd) / (xi + dd)
    e = np.exp(-dd * T)
    C = (p.kappa * p.theta / p.sigma**2) * ((xi - dd) * T - 2.0 * np.log((1 - g * e) / (1 - g)))
    D = ((xi - dd) / p.sigma**2) * (1 - e) / (1 - g * e)
    return np.exp(C + D * p.v0 + 1j * u * math.log(p.s0))


def heston_call_price(params: SVParams, T: float, K: float) -> float:
    """Semi-closed-form Heston call (zero rates) via the stable CF branch."""
    if params.model != "heston":
        raise ValueError("heston_call_price needs heston parameters")
    lnk = math.log(K)

    def ig1(u: float) -> float:
        val = np.exp(-1j * u * lnk) * _heston_cf(u - 1j, params, T) / (1j * u * params.s0)
        return float(val.real)

    def ig2(u: float) -> float:
        val = np.exp(-1j * u * lnk) * _heston_cf(u, params, T) / (1j * u)
        return float(val.real)

    p1 = 0.5 + quad(ig1, 1e-10, 400.0, limit=400)[0] / math.pi
    p2 = 0.5 + quad(ig2, 1e-10, 400.0, limit=400)[0] / math.pi
    return params.s0 * p1 - K * p2
