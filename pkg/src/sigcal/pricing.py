"""Monte Carlo pricing over precomputed signature features, Black-Scholes
analytics, and closed-form sig-payoff pricing with control variates.

Everything is organized so that model coefficients enter only in the very
last step: driver paths are simulated once, their signature features at the
quote maturities are stored, and a price update for new coefficients is a
matrix-vector product plus a payoff average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .expected_signature import CorrelationSpec, expected_sig
from .models import MARTINGALE, ModelSpec, model_sig_lift, tilde_basis
from .signature import CHUNK, SamplePath, batch_signatures, run_chunked
from .tensor_algebra import TensorSeries, Word, inner, iter_words, series_dim

# ---------------------------------------------------------------------------
# Black-Scholes analytics (zero rates, pre-discounted asset)


def _norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def bs_price(s0: float, K: float, T: float, sigma: float) -> float:
    """Black-Scholes call price with zero rates."""
    if K <= 0 or T <= 0 or sigma <= 0:
        return max(s0 - K, 0.0)
    v = sigma * math.sqrt(T)
    d1 = (math.log(s0 / K) + 0.5 * v * v) / v
    return s0 * _norm_cdf(d1) - K * _norm_cdf(d1 - v)


def bs_vega(s0: float, K: float, T: float, sigma: float) -> float:
    if K <= 0 or T <= 0 or sigma <= 0:
        return 0.0
    v = sigma * math.sqrt(T)
    d1 = (math.log(s0 / K) + 0.5 * v * v) / v
    return s0 * math.sqrt(T) * math.exp(-0.5 * d1 * d1) / math.sqrt(2.0 * math.pi)


def implied_vol(
    price: float, s0: float, K: float, T: float,
    lo: float = 1e-4, hi: float = 5.0, tol: float = 1e-10, max_iter: int = 200,
) -> float:
    """Implied volatility by bracketed bisection to |price error| <= tol."""
    lower = max(s0 - K, 0.0)
    if price < lower - 1e-12 or price >= s0:
        raise ValueError(
            f"price {price} outside no-arbitrage bounds [{lower}, {s0}) for K={K}, T={T}"
        )
    f_lo = bs_price(s0, K, T, lo) - price
    if f_lo >= 0.0:
        return lo
    f_hi = bs_price(s0, K, T, hi) - price
    if f_hi <= 0.0:
        return hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = bs_price(s0, K, T, mid) - price
        if abs(f_mid) <= tol:
            return mid
        if f_mid < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Driver simulation


@dataclass(frozen=True)
class DriverPaths:
    """A batch of correlated Brownian driver paths on a shared grid."""

    times: np.ndarray
    values: np.ndarray  # (n_paths, len(times), d)
    seed: int

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def path(self, i: int) -> SamplePath:
        return SamplePath(self.times, self.values[i])

    def increments(self) -> np.ndarray:
        """Time-extended increments (n_paths, M, d+1)."""
        dt = np.diff(self.times)
        inc = np.diff(self.values, axis=1)
        out = np.empty((self.n_paths, len(dt), self.d + 1))
        out[:, :, 0] = dt[None, :]
        out[:, :, 1:] = inc
        return out


def _chunk_normals(seed: int, chunk_index: int, shape: tuple) -> np.ndarray:
    """Deterministic per-chunk draws; the chunk partition is fixed, so output
    does not depend on worker count or batching."""
    ss = np.random.SeedSequence(entropy=(int(seed), int(chunk_index)))
    return np.random.default_rng(ss).standard_normal(shape)


def simulate_drivers(
    d: int, rho: CorrelationSpec, times: np.ndarray, n_paths: int, seed: int,
    workers: int | None = None,
) -> DriverPaths:
    """Correlated Brownian paths on the grid via Cholesky of rho."""
    if n_paths < 1:
        raise ValueError("need n_paths >= 1")
    if rho.d != d:
        raise ValueError("rho dimension does not match d")
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    M = len(times) - 1
    sqdt = np.sqrt(np.diff(times))
    L = rho.cholesky()
    values = np.empty((n_paths, M + 1, d))

    def fill(lo: int, hi: int, ci: int) -> None:
        z = _chunk_normals(seed, ci, (hi - lo, M, d))
        inc = (z @ L.T) * sqdt[None, :, None]
        values[lo:hi, 0, :] = 0.0
        np.cumsum(inc, axis=1, out=values[lo:hi, 1:, :])

    run_chunked(n_paths, fill, workers=workers)
    return DriverPaths(times, values, seed)


# ---------------------------------------------------------------------------
# Feature precomputation


def tilde_projection(n: int, rho: CorrelationSpec) -> tuple[list[Word], np.ndarray]:
    """Rows pairing a flat level-n signature into martingale-basis features."""
    words = list(iter_words(n - 1, rho.d))
    dim = series_dim(rho.d + 1, n)
    P = np.zeros((len(words), dim))
    for r, w in enumerate(words):
        P[r] = tilde_basis(w, 1, rho).truncated(n).flat()
    return words, P


@dataclass(frozen=True)
class FeatureMatrix:
    """Per-maturity signature features of simulated driver paths.

    ``feats[k]`` holds <tilde e_I, sig at T_k> for every path and feature
    word; ``raw`` optionally holds plain signature coefficients at a higher
    level for sig-payoff control variates.  Correction blocks are exact
    columnwise differences of the per-maturity features.
    """

    maturities: np.ndarray
    words: list
    feats: np.ndarray  # (n_maturities, n_paths, n_words)
    seed: int
    n: int
    rho: CorrelationSpec
    raw_level: int | None = None
    raw: np.ndarray | None = None  # (n_maturities, n_paths, dim_raw)

    @property
    def n_paths(self) -> int:
        return self.feats.shape[1]

    def index_of(self, T: float) -> int:
        i = int(np.argmin(np.abs(self.maturities - T)))
        if abs(self.maturities[i] - T) > 1e-9 * max(1.0, abs(T)):
            raise ValueError(f"maturity {T} not among feature maturities")
        return i

    def at(self, T: float) -> np.ndarray:
        return self.feats[self.index_of(T)]

    def raw_at(self, T: float) -> np.ndarray:
        if self.raw is None:
            raise ValueError("raw signature features were not precomputed")
        return self.raw[self.index_of(T)]

    def correction_block(self, T: float, T_j: float) -> np.ndarray:
        return self.at(T) - self.at(T_j)


def _maturity_grid_indices(times: np.ndarray, maturities: np.ndarray) -> np.ndarray:
    idx = []
    for T in maturities:
        i = int(np.argmin(np.abs(times - T)))
        if abs(times[i] - T) > 1e-9 * max(1.0, abs(T)):
            raise ValueError(f"maturity {T} does not lie on the simulation grid")
        idx.append(i)
    return np.asarray(idx, dtype=int)


def precompute_features(
    paths: DriverPaths, n: int, rho: CorrelationSpec, maturities,
    raw_level: int | None = None, workers: int | None = None,
) -> FeatureMatrix:
    """Signature features at every maturity for the given driver paths."""
    maturities = np.asarray(sorted(maturities), dtype=float)
    snap = _maturity_grid_indices(paths.times, maturities)
    words, P = tilde_projection(n, rho)
    level = max(n, raw_level or 0)
    dim_n = series_dim(rho.d + 1, n)
    feats = np.empty((len(maturities), paths.n_paths, len(words)))
    raw = (
        np.empty((len(maturities), paths.n_paths, series_dim(rho.d + 1, raw_level)))
        if raw_level
        else None
    )
    inc = paths.increments()

    def fill(lo: int, hi: int, ci: int) -> None:
        sigs = batch_signatures(inc[lo:hi], level, snapshots=snap)
        for k in range(len(maturities)):
            feats[k, lo:hi] = sigs[:, k, :dim_n] @ P.T
            if raw is not None:
                raw[k, lo:hi] = sigs[:, k, : raw.shape[2]]

    run_chunked(paths.n_paths, fill, workers=workers)
    return FeatureMatrix(maturities, words, feats, paths.seed, n, rho, raw_level, raw)


def simulate_features(
    d: int, rho: CorrelationSpec, times: np.ndarray, n_mc: int, seed: int,
    n: int, maturities, raw_level: int | None = None, workers: int | None = None,
) -> FeatureMatrix:
    """Fused simulate-and-summarize: features without storing the paths.

    Chunk c draws the same normals as :func:`simulate_drivers` with the same
    seed, so the two routes produce identical features.
    """
    times = np.asarray(times, dtype=float)
    maturities = np.asarray(sorted(maturities), dtype=float)
    snap = _maturity_grid_indices(times, maturities)
    words, P = tilde_projection(n, rho)
    level = max(n, raw_level or 0)
    dim_n = series_dim(rho.d + 1, n)
    M = len(times) - 1
    sqdt = np.sqrt(np.diff(times))
    L = rho.cholesky()
    feats = np.empty((len(maturities), n_mc, len(words)))
    raw = (
        np.empty((len(maturities), n_mc, series_dim(rho.d + 1, raw_level)))
        if raw_level
        else None
    )

    def fill(lo: int, hi: int, ci: int) -> None:
        z = _chunk_normals(seed, ci, (hi - lo, M, d))
        inc = np.empty((hi - lo, M, d + 1))
        inc[:, :, 0] = np.diff(times)[None, :]
        inc[:, :, 1:] = (z @ L.T) * sqdt[None, :, None]
        sigs = batch_signatures(inc, level, snapshots=snap)
        for k in range(len(maturities)):
            feats[k, lo:hi] = sigs[:, k, :dim_n] @ P.T
            if raw is not None:
                raw[k, lo:hi] = sigs[:, k, : raw.shape[2]]

    run_chunked(n_mc, fill, workers=workers)
    return FeatureMatrix(maturities, words, feats, seed, n, rho, raw_level, raw)


# ---------------------------------------------------------------------------
# Monte Carlo pricing


def terminal_samples(spec: ModelSpec, features: FeatureMatrix, T: float) -> np.ndarray:
    """Model terminal values s0 + features . ell (plus active corrections)."""
    if spec.basis != MARTINGALE:
        raise ValueError("feature pricing expects a martingale-basis model")
    if spec.n != features.n:
        raise ValueError("feature order does not match model order")
    out = spec.s0 + features.at(T) @ spec.coeff_vector()
    for T_j, em in spec.corrections:
        if T_j < T - 1e-12:
            out = out + features.correction_block(T, T_j) @ spec.coeff_vector(em)
    return out


def mc_price(
    spec: ModelSpec, features: FeatureMatrix, payoff: str, T: float, K: float
) -> tuple[float, float]:
    """Monte Carlo vanilla price and its standard error."""
    s = terminal_samples(spec, features, T)
    if payoff == "call":
        x = np.maximum(s - K, 0.0)
    elif payoff == "put":
        x = np.maximum(K - s, 0.0)
    else:
        raise ValueError(f"unknown payoff {payoff!r}")
    n = len(x)
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(x)), se


def mc_price_gradient(
    spec: ModelSpec, features: FeatureMatrix, T: float, K: float
) -> np.ndarray:
    """Pathwise a.e. call-price gradient over ell: mean of ITM feature rows."""
    s = terminal_samples(spec, features, T)
    itm = s > K
    return features.at(T).T @ itm.astype(float) / len(s)


# ---------------------------------------------------------------------------
# Sig-payoffs


@dataclass(frozen=True)
class SigPayoff:
    """Linear payoff on the signature of the time-extended price path.

    Coefficients are keyed by words over {0 (time), 1 (price)}; the empty
    word is the constant term.
    """

    coeffs: dict

    def __post_init__(self):
        for w in self.coeffs:
            if any(j not in (0, 1) for j in w):
                raise ValueError("sig-payoff words use letters {0, 1} only")

    @property
    def m(self) -> int:
        return max((len(w) for w in self.coeffs), default=0)

    @classmethod
    def asian_forward(cls, s0: float, K: float, T: float) -> "SigPayoff":
        """(1/T) integral of S dt - K as a degree-2 sig-payoff."""
        return cls({(1, 0): 1.0 / T, (): s0 - K})

    def flat(self, m: int | None = None) -> np.ndarray:
        m = self.m if m is None else m
        out = np.zeros(series_dim(2, m))
        for i, w in enumerate(iter_words(m, 1)):
            out[i] = self.coeffs.get(w, 0.0)
        return out


def sig_payoff_price(f: SigPayoff, spec: ModelSpec, T: float) -> float:
    """Closed-form price: pair each lifted word with the expected signature."""
    m = f.m
    if m == 0:
        return f.coeffs.get((), 0.0)
    esig = expected_sig(m * spec.n, T, spec.rho)
    price = f.coeffs.get((), 0.0)
    for J, c in f.coeffs.items():
        if J and c != 0.0:
            price += c * inner(model_sig_lift(spec, J), esig)
    return price


def payoff_lift_vector(f: SigPayoff, spec: ModelSpec) -> np.ndarray:
    """Flat driver-signature vector whose pairing gives the sig-payoff minus
    its constant, pathwise."""
    level = max(f.m * spec.n, 1)
    acc = TensorSeries.zeros(spec.d, level)
    for J, c in f.coeffs.items():
        if J and c != 0.0:
            acc = acc + c * model_sig_lift(spec, J).truncated(level)
    return acc.flat()


def model_sig_samples(
    spec: ModelSpec, features: FeatureMatrix, T: float, m: int
) -> np.ndarray:
    """Per-sample signature coefficients of the model price path at T.

    Column J holds <e_J, sig of (t, S_t)> for every word over {0, 1} up to
    length m, evaluated through the lifted representation on the stored raw
    driver signatures.  This is the regression design for fitting sig-payoff
    control variates under the model itself.
    """
    level = max(m * spec.n, 1)
    if features.raw_level is None or features.raw_level < level:
        raise ValueError(f"need raw features at level {level}")
    raw = features.raw_at(T)[:, : series_dim(spec.d + 1, level)]
    cols = [np.ones(raw.shape[0])]
    for J in iter_words(m, 1):
        if J:
            cols.append(raw @ model_sig_lift(spec, J).truncated(level).flat())
    return np.column_stack(cols)


def fit_sig_payoff(
    payoff_samples: np.ndarray, sig_samples: np.ndarray, m: int, ridge: float = 1e-8
) -> SigPayoff:
    """Least-squares sig-payoff fit on signature samples of an auxiliary model.

    ``sig_samples`` are flat signature coefficients of the time-extended
    auxiliary price paths up to level m (constant column included).  The
    normal equations carry a ridge floor against rank deficiency; columns are
    scaled to unit RMS before solving, which changes nothing but conditioning.
    """
    y = np.asarray(payoff_samples, dtype=float)
    X = np.array(sig_samples, dtype=float)
    if X.shape[1] != series_dim(2, m):
        raise ValueError(f"expected {series_dim(2, m)} signature columns for m={m}")
    words = list(iter_words(m, 1))
    # at a fixed maturity the pure-time words are constants, exactly collinear
    # with the empty word; dropping them keeps the intercept identifiable
    for i, w in enumerate(words):
        if w and all(letter == 0 for letter in w):
            X[:, i] = 0.0
    scale = np.sqrt(np.mean(X * X, axis=0))
    scale[scale == 0.0] = 1.0
    Xs = X / scale
    # ridge solution of the floored normal equations, computed through the
    # SVD so the shuffle-collinear directions stay clean
    U, s, Vt = np.linalg.svd(Xs, full_matrices=False)
    shrink = s / (s * s + ridge)
    beta = (Vt.T @ (shrink * (U.T @ y))) / scale
    coeffs = {w: float(beta[i]) for i, w in enumerate(words)}
    return SigPayoff(coeffs)


def cv_price(
    spec: ModelSpec, features: FeatureMatrix, f: SigPayoff, T: float, K: float
) -> tuple[float, float]:
    """Call price with the sig-payoff control variate subtracted.

    The control variate is the pathwise sig-payoff value minus its
    closed-form expectation, so the estimator stays unbiased while the
    residual payoff carries far less variance.
    """
    level = max(f.m * spec.n, 1)
    if features.raw_level is None or features.raw_level < level:
        raise ValueError(f"control variate needs raw features at level {level}")
    s = terminal_samples(spec, features, T)
    payoff = np.maximum(s - K, 0.0)
    raw = features.raw_at(T)[:, : series_dim(spec.d + 1, level)]
    phi = f.coeffs.get((), 0.0) + raw @ payoff_lift_vector(f, spec)
    phi_cv = phi - sig_payoff_price(f, spec, T)
    x = payoff - phi_cv
    n = len(x)
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(x)), se
