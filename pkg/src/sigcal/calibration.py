"""Calibration of the model coefficients to time series and option quotes.

Time-series targets reduce to linear regression on signature features (ridge
in closed form, lasso by coordinate descent).  Surface calibration minimizes
a Vega-weighted price loss over precomputed Monte Carlo features with a
full-batch momentum method; the slice-wise variant freezes earlier maturities
and fits maturity-indexed corrections one smile at a time, and the joint
variant mixes the option loss with the path regression loss.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from .expected_signature import CorrelationSpec
from .models import MARTINGALE, ModelSpec
from .pricing import FeatureMatrix, bs_price, bs_vega, implied_vol, tilde_projection
from .signature import SigStream
from .tensor_algebra import iter_words, series_dim, word_index

# ---------------------------------------------------------------------------
# Quotes


@dataclass
class QuoteSurface:
    """Option quotes (maturity, strike, mid and/or implied vol, Vega weight)."""

    s0: float
    T: np.ndarray
    K: np.ndarray
    mid: np.ndarray
    iv: np.ndarray
    vega: np.ndarray

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        n = len(self.T)
        self.mid = _column(self.mid, n)
        self.iv = _column(self.iv, n)
        self.vega = _column(self.vega, n)
        if len(self.K) != n or np.any(self.T <= 0) or np.any(self.K <= 0):
            raise ValueError("quotes need positive T, K arrays of equal length")
        for i in range(n):
            has_mid, has_iv = not np.isnan(self.mid[i]), not np.isnan(self.iv[i])
            if has_mid and has_iv:
                ref = bs_price(self.s0, self.K[i], self.T[i], self.iv[i])
                if abs(ref - self.mid[i]) > 1e-6:
                    raise ValueError(
                        f"quote {i}: mid {self.mid[i]} inconsistent with iv {self.iv[i]}"
                    )
            elif has_iv:
                self.mid[i] = bs_price(self.s0, self.K[i], self.T[i], self.iv[i])
            elif has_mid:
                self.iv[i] = implied_vol(self.mid[i], self.s0, self.K[i], self.T[i])
            else:
                raise ValueError(f"quote {i} has neither mid nor iv")
            if np.isnan(self.vega[i]):
                self.vega[i] = bs_vega(self.s0, self.K[i], self.T[i], self.iv[i])

    def __len__(self) -> int:
        return len(self.T)

    def maturities(self) -> np.ndarray:
        return np.unique(self.T)

    @classmethod
    def from_quotes(cls, s0, T, K, mid=None, iv=None, vega=None) -> "QuoteSurface":
        return cls(s0, T, K, mid if mid is not None else np.nan,
                   iv if iv is not None else np.nan,
                   vega if vega is not None else np.nan)

    @classmethod
    def from_csv(cls, path, s0: float) -> "QuoteSurface":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                rows.append((
                    float(row["T"]), float(row["K"]),
                    float(row["mid"]) if row.get("mid") else np.nan,
                    float(row["iv"]) if row.get("iv") else np.nan,
                    float(row["vega"]) if row.get("vega") else np.nan,
                ))
        arr = np.array(rows)
        return cls(s0, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["T", "K", "mid", "iv", "vega"])
            for i in range(len(self)):
                w.writerow([_fmt(self.T[i]), _fmt(self.K[i]), _fmt(self.mid[i]),
                            _fmt(self.iv[i]), _fmt(self.vega[i])])


def _column(x, n: int) -> np.ndarray:
    arr = np.full(n, np.nan) if x is None or np.isscalar(x) and np.isnan(x) else None
    if arr is None:
        arr = np.asarray(x, dtype=float).copy()
        if arr.shape != (n,):
            raise ValueError("quote columns must align with T")
    return arr


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def vega_weights(surface: QuoteSurface, floor: float = 1e-4) -> np.ndarray:
    """1 / max(vega, floor)^2: makes the price loss track squared IV error."""
    return 1.0 / np.maximum(surface.vega, floor) ** 2


# ---------------------------------------------------------------------------
# Reports


@dataclass
class CalibReport:
    """Fitted model plus per-quote diagnostics and the optimizer trace."""

    spec: ModelSpec
    T: np.ndarray
    K: np.ndarray
    market_iv: np.ndarray
    model_price: np.ndarray
    model_iv: np.ndarray
    abs_err_bps: np.ndarray
    loss_trace: np.ndarray
    wall_time: float
    path_mse: float | None = None

    def max_err_bps(self) -> float:
        return float(np.max(self.abs_err_bps)) if len(self.abs_err_bps) else 0.0

    def mean_err_bps(self) -> float:
        return float(np.mean(self.abs_err_bps)) if len(self.abs_err_bps) else 0.0

    def to_json(self, include_wall_time: bool = False) -> str:
        doc = {
            "model": json.loads(self.spec.to_json()),
            "quotes": [
                {
                    "T": float(self.T[i]), "K": float(self.K[i]),
                    "iv_market": float(self.market_iv[i]),
                    "iv_model": float(self.model_iv[i]),
                    "model_price": float(self.model_price[i]),
                    "abs_err_bps": float(self.abs_err_bps[i]),
                }
                for i in range(len(self.T))
            ],
            "max_err_bps": self.max_err_bps(),
            "mean_err_bps": self.mean_err_bps(),
            "loss_trace_head": [float(x) for x in self.loss_trace[:5]],
            "loss_final": float(self.loss_trace[-1]) if len(self.loss_trace) else None,
        }
        if self.path_mse is not None:
            doc["path_mse"] = float(self.path_mse)
        if include_wall_time:
            doc["wall_time"] = self.wall_time
        return json.dumps(doc, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["T", "K", "iv_market", "iv_model", "abs_err_bps"])
            for i in range(len(self.T)):
                w.writerow([_fmt(self.T[i]), _fmt(self.K[i]), _fmt(self.market_iv[i]),
                            _fmt(self.model_iv[i]), _fmt(self.abs_err_bps[i])])


def implied_vol_safe(price: float, s0: float, K: float, T: float) -> float:
    """Implied vol with the price clamped into the open no-arbitrage band.

    Monte Carlo prices can undershoot intrinsic value by sampling noise; for
    reporting purposes they are nudged back inside the band.
    """
    lower = max(s0 - K, 0.0)
    eps = 1e-12 * max(1.0, s0)
    return implied_vol(min(max(price, lower + eps), s0 - eps), s0, K, T)


# ---------------------------------------------------------------------------
# Time-series regression


def _estimate_rho(stream: SigStream) -> CorrelationSpec:
    """Driver correlation estimated from the stream's stored increments."""
    inc = stream.increments[:, 1:]
    if inc.shape[1] == 1:
        return CorrelationSpec.identity(1)
    c = np.corrcoef(inc.T)
    c = 0.5 * (c + c.T)
    np.fill_diagonal(c, 1.0)
    return CorrelationSpec(inc.shape[1], c)


def _soft(x: float, thr: float) -> float:
    return math.copysign(max(abs(x) - thr, 0.0), x)


def _lasso_cd(X: np.ndarray, y: np.ndarray, lam: float,
              max_iter: int = 20000, tol: float = 1e-12) -> np.ndarray:
    """Coordinate descent for sum-of-squares loss plus lam * l1 penalty."""
    G = X.T @ X
    c = X.T @ y
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        delta = 0.0
        for j in range(len(beta)):
            r = c[j] - G[j] @ beta + G[j, j] * beta[j]
            new = _soft(r, 0.5 * lam) / G[j, j]
            delta = max(delta, abs(new - beta[j]))
            beta[j] = new
        if delta < tol * max(1.0, float(np.max(np.abs(beta)))):
            break
    return beta


def _penalized_fit(X: np.ndarray, y: np.ndarray, penalty: str, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("need lambda >= 0")
    if penalty == "l1" and lam > 0:
        return _lasso_cd(X, y, lam)
    if penalty not in ("l1", "l2"):
        raise ValueError(f"unknown penalty {penalty!r}")
    if lam == 0:
        return np.linalg.lstsq(X, y, rcond=None)[0]
    return np.linalg.solve(X.T @ X + lam * np.eye(X.shape[1]), X.T @ y)


def fit_timeseries_price(
    stream: SigStream, observed: np.ndarray, n: int,
    penalty: str = "l2", lam: float = 0.0, rho: CorrelationSpec | None = None,
) -> ModelSpec:
    """Regress the observed price path on martingale-basis signature features.

    The model constant is pinned to the first observation; the free
    coefficients are the d* = ((d+1)^n - 1)/d martingale-basis loadings.
    """
    y = np.asarray(observed, dtype=float)
    if len(y) != len(stream):
        raise ValueError("observed series must align with the stream grid")
    rho = _estimate_rho(stream) if rho is None else rho
    words, P = tilde_projection(n, rho)
    X = stream.coeffs[:, : series_dim(stream.width, n)] @ P.T
    s0 = float(y[0])
    beta = _penalized_fit(X, y - s0, penalty, lam)
    ell = {w: float(b) for w, b in zip(words, beta)}
    return ModelSpec(d=stream.d, n=n, rho=rho, s0=s0, ell=ell, basis=MARTINGALE)


def fit_timeseries_vol(
    stream: SigStream, spot_vol: np.ndarray, n: int,
    penalty: str = "l2", lam: float = 0.0, rho: CorrelationSpec | None = None,
    s0: float | None = None,
) -> ModelSpec:
    """Regress the spot volatility path on plain signature words up to level n.

    The fitted coefficients are the driver loadings of a price model of order
    n+1 (volatility regression and price regression are two views of the same
    martingale representation), so the result is returned in that form; its
    volatility path can be re-evaluated with :func:`eval_volatility`.
    """
    v = np.asarray(spot_vol, dtype=float)
    if len(v) != len(stream):
        raise ValueError("spot_vol series must align with the stream grid")
    if np.any(v < 0):
        raise ValueError("spot volatility must be nonnegative")
    rho = _estimate_rho(stream) if rho is None else rho
    X = stream.coeffs[:, : series_dim(stream.width, n)]
    beta = _penalized_fit(X, v, penalty, lam)
    ell = {w: float(b) for w, b in zip(iter_words(n, stream.d), beta)}
    return ModelSpec(
        d=stream.d, n=n + 1, rho=rho,
        s0=0.0 if s0 is None else float(s0), ell=ell, basis=MARTINGALE,
    )


def eval_volatility(spec: ModelSpec, stream: SigStream) -> np.ndarray:
    """The model's instantaneous driver loading along the stream (its vol)."""
    dim = series_dim(stream.width, spec.n - 1)
    vec = np.zeros(dim)
    for w, c in spec.ell.items():
        vec[_flat_index(w, stream.d)] = c
    return stream.coeffs[:, :dim] @ vec


def _flat_index(word, d: int) -> int:
    base = series_dim(d + 1, len(word) - 1) if word else 0
    return base + word_index(word, d)


# ---------------------------------------------------------------------------
# Momentum optimizer


@dataclass
class CalibOptions:
    """Knobs of the full-batch momentum optimizer and its initialization."""

    step: float = 1e-2
    iters: int = 2000
    momentum: float = 0.9
    seed: int = 0
    init_scale: float = 0.01
    max_doublings: int = 50
    tol: float = 0.0


def _momentum_descent(fn, theta0: np.ndarray, opts: CalibOptions):
    """Momentum descent with step halving on loss increase.

    Accepted losses are recorded in the trace, so the trace is non-increasing
    by construction; the step recovers slowly after a halving.
    """
    theta = np.array(theta0, dtype=float)
    loss, grad = fn(theta)
    trace = [loss]
    vel = np.zeros_like(theta)
    step = opts.step
    for _ in range(opts.iters):
        vel = opts.momentum * vel - step * grad
        cand = theta + vel
        closs, cgrad = fn(cand)
        while closs > loss and step > 1e-14:
            step *= 0.5
            vel = -step * grad
            cand = theta + vel
            closs, cgrad = fn(cand)
        if closs > loss:
            break
        improvement = loss - closs
        theta, loss, grad = cand, closs, cgrad
        trace.append(loss)
        step = min(step * 1.2, opts.step)
        if opts.tol > 0 and improvement < opts.tol * max(loss, 1e-30):
            break
    return theta, np.array(trace)


@dataclass
class _QuoteBlock:
    """Quotes of one maturity against one sample design: offset + design @ theta."""

    T: float
    K: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    design: np.ndarray
    offset: np.ndarray


def _blocks_loss_grad(theta: np.ndarray, blocks: list[_QuoteBlock], p: float):
    """Weighted p-norm of price errors and its gradient (stable for large p)."""
    errs, ws, grads = [], [], []
    for blk in blocks:
        s = blk.offset + blk.design @ theta
        diff = s[:, None] - blk.K[None, :]
        prices = np.maximum(diff, 0.0).mean(axis=0)
        e = blk.target - prices
        gc = blk.design.T @ (diff > 0.0) / len(s)  # (n_theta, n_strikes)
        errs.append(e)
        ws.append(blk.weight)
        grads.append(gc)
    e = np.concatenate(errs)
    w = np.concatenate(ws)
    gc = np.concatenate([g.T for g in grads], axis=0)  # (n_quotes, n_theta)
    ae = np.abs(e)
    m = float(np.max(ae))
    if m == 0.0:
        return 0.0, np.zeros_like(theta)
    # L = (sum w |e|^p)^(1/p) computed and differentiated in scaled form
    scaled = ae / m
    powed = w * scaled ** (p - 1.0)
    L = m * float(np.sum(powed * scaled)) ** (1.0 / p)
    ratio = (ae / L) ** (p - 1.0)
    grad = -(w * ratio * np.sign(e)) @ gc
    return L, grad


def _init_coefficients(blocks: list[_QuoteBlock], n_theta: int, opts: CalibOptions) -> np.ndarray:
    """Random start scaled up until model prices dominate the market prices.

    The price loss is convex in the coefficients on the region where every
    model price is at or above its quote, so starting there keeps the descent
    well behaved; after max_doublings the unconditioned start is kept.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(opts.seed), 7)))
    theta = opts.init_scale * rng.standard_normal(n_theta) / math.sqrt(n_theta)
    for _ in range(opts.max_doublings):
        dominated = True
        for blk in blocks:
            s = blk.offset + blk.design @ theta
            prices = np.maximum(s[:, None] - blk.K[None, :], 0.0).mean(axis=0)
            if np.any(prices < blk.target):
                dominated = False
                break
        if dominated:
            break
        theta *= 2.0
    return theta


def _column_scales(blocks: list[_QuoteBlock]) -> np.ndarray:
    """Unit-RMS scales of the stacked design columns (diagonal preconditioner:
    the optimizer runs in rescaled coordinates, which leaves the minimizer
    unchanged but evens out the feature magnitudes)."""
    sq = np.zeros(blocks[0].design.shape[1])
    n = 0
    for blk in blocks:
        sq += np.sum(blk.design * blk.design, axis=0)
        n += blk.design.shape[0]
    scale = np.sqrt(sq / max(n, 1))
    scale[scale == 0.0] = 1.0
    return scale


def _scaled_blocks(blocks: list[_QuoteBlock], scale: np.ndarray) -> list[_QuoteBlock]:
    return [
        _QuoteBlock(T=b.T, K=b.K, target=b.target, weight=b.weight,
                    design=b.design / scale, offset=b.offset)
        for b in blocks
    ]


def _group_quotes(surface: QuoteSurface):
    order = np.lexsort((surface.K, surface.T))
    groups: dict[float, list[int]] = {}
    for i in order:
        groups.setdefault(float(surface.T[i]), []).append(int(i))
    return groups


def _quote_report(
    spec: ModelSpec, surface: QuoteSurface, blocks: list[_QuoteBlock],
    theta: np.ndarray, idx_order: list[int], trace: np.ndarray, t0: float,
    path_mse: float | None = None,
) -> CalibReport:
    prices, ivs = [], []
    for blk in blocks:
        s = blk.offset + blk.design @ theta
        prices.append(np.maximum(s[:, None] - blk.K[None, :], 0.0).mean(axis=0))
    prices = np.concatenate(prices)
    T = surface.T[idx_order]
    K = surface.K[idx_order]
    market_iv = surface.iv[idx_order]
    ivs = np.array([implied_vol_safe(p, surface.s0, k, t) for p, k, t in zip(prices, K, T)])
    err = np.abs(ivs - market_iv) * 1e4
    return CalibReport(
        spec=spec, T=T, K=K, market_iv=market_iv, model_price=prices,
        model_iv=ivs, abs_err_bps=err, loss_trace=trace,
        wall_time=time.perf_counter() - t0, path_mse=path_mse,
    )


# ---------------------------------------------------------------------------
# Surface calibration


def _base_blocks(surface: QuoteSurface, features: FeatureMatrix) -> tuple[list[_QuoteBlock], list[int]]:
    w = vega_weights(surface)
    blocks, idx_order = [], []
    for T, idxs in _group_quotes(surface).items():
        design = features.at(T)
        blocks.append(_QuoteBlock(
            T=T, K=surface.K[idxs], target=surface.mid[idxs], weight=w[idxs],
            design=design, offset=np.full(design.shape[0], surface.s0),
        ))
        idx_order.extend(idxs)
    return blocks, idx_order


def calibrate_surface(
    surface: QuoteSurface, features: FeatureMatrix, n: int,
    p: float = 2.0, alpha: float = 0.0, opts: CalibOptions | None = None,
) -> CalibReport:
    """Vega-weighted surface calibration, optionally with an outlier stage.

    Stage one minimizes the weighted squared price loss; when alpha > 0 a
    second stage reweights each quote by its stage-one implied-vol error (in
    bps) and minimizes the p-th power loss from the stage-one solution.
    """
    if len(surface) == 0:
        raise ValueError("empty quote surface")
    if p < 1:
        raise ValueError("need p >= 1")
    if n != features.n:
        raise ValueError("feature order does not match n")
    opts = opts or CalibOptions()
    t0 = time.perf_counter()
    blocks, idx_order = _base_blocks(surface, features)
    scale = _column_scales(blocks)
    sblocks = _scaled_blocks(blocks, scale)
    theta0 = _init_coefficients(sblocks, len(features.words), opts)
    theta_s, trace = _momentum_descent(
        lambda th: _blocks_loss_grad(th, sblocks, 2.0), theta0, opts
    )
    if alpha > 0:
        stage1 = _quote_report(
            _spec_from_theta(surface, features, theta_s / scale), surface,
            sblocks, theta_s, idx_order, trace, t0,
        )
        werr = stage1.abs_err_bps  # aligned with idx_order
        pos = 0
        for blk in sblocks:
            k = len(blk.K)
            blk.weight = blk.weight + alpha * werr[pos:pos + k]
            pos += k
        theta_s, trace2 = _momentum_descent(
            lambda th: _blocks_loss_grad(th, sblocks, p), theta_s, opts
        )
        trace = np.concatenate([trace, trace2])
    spec = _spec_from_theta(surface, features, theta_s / scale)
    return _quote_report(spec, surface, sblocks, theta_s, idx_order, trace, t0)


def _spec_from_theta(surface: QuoteSurface, features: FeatureMatrix,
                     theta: np.ndarray, corrections: tuple = ()) -> ModelSpec:
    ell = {w: float(c) for w, c in zip(features.words, theta)}
    return ModelSpec(
        d=features.rho.d, n=features.n, rho=features.rho, s0=surface.s0,
        ell=ell, basis=MARTINGALE, corrections=corrections,
    )


def calibrate_slicewise(
    surface: QuoteSurface, features: FeatureMatrix, n: int,
    opts: CalibOptions | None = None,
) -> CalibReport:
    """Recursive smile-by-smile fit with maturity-indexed corrections.

    The first smile fixes the base coefficients; each later smile T_k is fit
    by a correction block activating at T_{k-1} while everything earlier
    stays frozen, so refitting a later smile cannot move earlier maturities.
    """
    opts = opts or CalibOptions()
    t0 = time.perf_counter()
    mats = surface.maturities()
    if np.any(np.diff(mats) <= 0):
        raise ValueError("maturities must be strictly increasing")
    w = vega_weights(surface)
    groups = _group_quotes(surface)
    n_words = len(features.words)

    def block_for(T: float, offset: np.ndarray, design: np.ndarray) -> _QuoteBlock:
        idxs = groups[float(T)]
        return _QuoteBlock(T=float(T), K=surface.K[idxs], target=surface.mid[idxs],
                           weight=w[idxs], design=design, offset=offset)

    def fit_block(blk: _QuoteBlock) -> tuple[np.ndarray, np.ndarray]:
        scale = _column_scales([blk])
        sblk = _scaled_blocks([blk], scale)
        th0 = _init_coefficients(sblk, n_words, opts)
        th_s, tr = _momentum_descent(lambda t: _blocks_loss_grad(t, sblk, 2.0), th0, opts)
        return th_s / scale, tr

    blk1 = block_for(mats[0], np.full(features.n_paths, surface.s0), features.at(mats[0]))
    ell, trace = fit_block(blk1)
    traces = [trace]
    corrections: list[tuple[float, dict]] = []
    corr_thetas: list[np.ndarray] = []
    for k in range(1, len(mats)):
        T_k = float(mats[k])
        offset = surface.s0 + features.at(T_k) @ ell
        for j in range(k - 1):
            offset = offset + features.correction_block(T_k, float(mats[j])) @ corr_thetas[j]
        design = features.correction_block(T_k, float(mats[k - 1]))
        th, tr = fit_block(block_for(T_k, offset, design))
        corr_thetas.append(th)
        corrections.append((float(mats[k - 1]), {w_: float(c) for w_, c in zip(features.words, th)}))
        traces.append(tr)

    spec = _spec_from_theta(surface, features, ell, tuple(corrections))
    # assemble report over all quotes with the final parameters
    blocks, idx_order = [], []
    for k, T in enumerate(mats):
        offset = surface.s0 + features.at(float(T)) @ ell
        for j in range(min(k, len(corr_thetas))):
            blkv = features.correction_block(float(T), float(mats[j]))
            offset = offset + blkv @ corr_thetas[j]
        blocks.append(block_for(float(T), offset, np.zeros((features.n_paths, 1))))
        idx_order.extend(groups[float(T)])
    zero = np.zeros(1)
    return _quote_report(spec, surface, blocks, zero, idx_order,
                         np.concatenate(traces), t0)


def joint_calibrate(
    stream: SigStream, observed: np.ndarray, surface: QuoteSurface,
    features: FeatureMatrix, lambda_mix: float, n: int,
    opts: CalibOptions | None = None,
) -> CalibReport:
    """Convex mix of the option loss and the price-path regression loss.

    lambda_mix = 1 reduces to the pure surface calibration and 0 to the pure
    time-series regression, so those ends delegate to the exact routines.
    """
    if not 0.0 <= lambda_mix <= 1.0:
        raise ValueError("lambda_mix must lie in [0, 1]")
    opts = opts or CalibOptions()
    t0 = time.perf_counter()
    y = np.asarray(observed, dtype=float)
    words, P = tilde_projection(n, features.rho)
    X = stream.coeffs[:, : series_dim(stream.width, n)] @ P.T
    resid_target = y - surface.s0

    if lambda_mix == 0.0:
        spec = fit_timeseries_price(stream, y, n, penalty="l2", lam=0.0, rho=features.rho)
        blocks, idx_order = _base_blocks(surface, features)
        theta = spec.coeff_vector()
        mse = float(np.mean((X @ theta - resid_target) ** 2))
        return _quote_report(spec, surface, blocks, theta, idx_order,
                             np.array([mse]), t0, path_mse=mse)
    if lambda_mix == 1.0:
        report = calibrate_surface(surface, features, n, opts=opts)
        theta = report.spec.coeff_vector()
        report.path_mse = float(np.mean((X @ theta - resid_target) ** 2))
        return report

    blocks, idx_order = _base_blocks(surface, features)
    scale = _column_scales(blocks)
    sblocks = _scaled_blocks(blocks, scale)
    Xs = X / scale
    n_pts = len(resid_target)

    def loss_grad(theta_s: np.ndarray):
        # the path loss enters per grid point so the mix stays comparable
        # across sampling frequencies (a sum would scale with the grid)
        l_opt, g_opt = _blocks_loss_grad_sq(theta_s, sblocks)
        r = Xs @ theta_s - resid_target
        l_path = float(r @ r) / n_pts
        g_path = 2.0 * (Xs.T @ r) / n_pts
        loss = lambda_mix * l_opt + (1.0 - lambda_mix) * l_path
        return loss, lambda_mix * g_opt + (1.0 - lambda_mix) * g_path

    theta0 = _init_coefficients(sblocks, len(words), opts)
    theta_s, trace = _momentum_descent(loss_grad, theta0, opts)
    theta = theta_s / scale
    spec = _spec_from_theta(surface, features, theta)
    mse = float(np.mean((X @ theta - resid_target) ** 2))
    return _quote_report(spec, surface, sblocks, theta_s, idx_order, trace, t0,
                         path_mse=mse)


def _blocks_loss_grad_sq(theta: np.ndarray, blocks: list[_QuoteBlock]):
    """Plain weighted sum of squared price errors (used in the joint loss)."""
    loss = 0.0
    grad = np.zeros_like(theta)
    for blk in blocks:
        s = blk.offset + blk.design @ theta
        diff = s[:, None] - blk.K[None, :]
        prices = np.maximum(diff, 0.0).mean(axis=0)
        e = blk.target - prices
        loss += float(np.sum(blk.weight * e * e))
        gc = blk.design.T @ (diff > 0.0) / len(s)
        grad += gc @ (-2.0 * blk.weight * e)
    return loss, grad


# ---------------------------------------------------------------------------
# ATM skew


def atm_skew(T: np.ndarray, K: np.ndarray, iv: np.ndarray, s0: float) -> dict:
    """|d sigma / dK| at the spot per maturity, by central finite difference.

    Uses the nearest strikes strictly below and above the spot; raises when a
    maturity has no bracketing pair.
    """
    T = np.asarray(T, dtype=float)
    K = np.asarray(K, dtype=float)
    iv = np.asarray(iv, dtype=float)
    out = {}
    for t in np.unique(T):
        sel = T == t
        ks, vs = K[sel], iv[sel]
        below = ks < s0
        above = ks > s0
        if not below.any() or not above.any():
            raise ValueError(f"maturity {t}: no strikes bracketing s0={s0}")
        k_lo = ks[below].max()
        k_hi = ks[above].min()
        v_lo = vs[below][np.argmax(ks[below])]
        v_hi = vs[above][np.argmin(ks[above])]
        out[float(t)] = abs((v_hi - v_lo) / (k_hi - k_lo))
    return out


def atm_skew_report(report: CalibReport, s0: float, model: bool = True) -> dict:
    iv = report.model_iv if model else report.market_iv
    return atm_skew(report.T, report.K, iv, s0)
