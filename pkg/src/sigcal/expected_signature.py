"""Closed-form expected signature of time-extended correlated Brownian motion.

A word contributes only if its maximal runs of Brownian letters all have even
length; pairing consecutive letters inside each run gives a product of
correlations, and the time letters and half-run counts set the power of t.
The proof's generator series Q = e_0 + (1/2) sum rho_ij e_i (x) e_j yields an
independent oracle: E[sig_t] = sum_k t^k/k! Q^(x)k.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .tensor_algebra import TensorSeries, Word, concat, index_to_word, words_of_length


@dataclass(frozen=True)
class CorrelationSpec:
    """Correlation matrix of d Brownian components, validated and repaired.

    Mildly non-PSD input is accepted through an escalating Cholesky jitter
    (1e-12 up to 1e-8); anything worse is rejected.
    """

    d: int
    rho: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (self.d, self.d):
            raise ValueError(f"rho must be {self.d}x{self.d}, got {rho.shape}")
        if not np.allclose(rho, rho.T, atol=1e-12):
            raise ValueError("rho must be symmetric")
        if not np.allclose(np.diag(rho), 1.0, atol=1e-12):
            raise ValueError("rho must have unit diagonal")
        if np.any(np.abs(rho) > 1.0 + 1e-12):
            raise ValueError("correlations must lie in [-1, 1]")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "_chol", _jittered_cholesky(rho))

    @classmethod
    def identity(cls, d: int) -> "CorrelationSpec":
        return cls(d, np.eye(d))

    def cholesky(self) -> np.ndarray:
        return self._chol


def _jittered_cholesky(rho: np.ndarray) -> np.ndarray:
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(rho + jitter * np.eye(len(rho)))
        except np.linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-8:
                raise ValueError("rho is not positive semidefinite (jitter exhausted)")


def expected_sig_word(word: Word, t: float, spec: CorrelationSpec) -> float:
    """E[<e_I, sig of (s, W_s) at time t>] for correlated Brownian motion W.

    Zero whenever some maximal run of Brownian letters has odd length;
    otherwise t^(K+H)/(K+H)! * (1/2)^H * product of consecutive-pair
    correlations, with K zeros and H letter pairs.
    """
    if t < 0:
        raise ValueError("need t >= 0")
    rho = spec.rho
    zeros = 0
    pairs = 0
    rho_prod = 1.0
    i = 0
    n = len(word)
    while i < n:
        letter = word[i]
        if letter == 0:
            zeros += 1
            i += 1
            continue
        run_start = i
        while i < n and word[i] != 0:
            if not 1 <= word[i] <= spec.d:
                raise ValueError(f"letter {word[i]} outside alphabet")
            i += 1
        run = word[run_start:i]
        if len(run) % 2 == 1:
            return 0.0
        for k in range(0, len(run), 2):
            rho_prod *= rho[run[k] - 1, run[k + 1] - 1]
            pairs += 1
    order = zeros + pairs
    return t**order / factorial(order) * 0.5**pairs * rho_prod


def expected_sig(N: int, t: float, spec: CorrelationSpec) -> TensorSeries:
    """Expected signature of time-extended correlated BM, truncated at N."""
    out = TensorSeries.zeros(spec.d, N)
    for k in range(N + 1):
        lv = out.levels[k]
        for idx in range(len(lv)):
            lv[idx] = expected_sig_word(index_to_word(idx, k, spec.d), t, spec)
    return out


def q_series_expected_sig(N: int, t: float, spec: CorrelationSpec) -> TensorSeries:
    """Oracle for :func:`expected_sig` built from the generator series Q."""
    if t < 0:
        raise ValueError("need t >= 0")
    d = spec.d
    q = TensorSeries.zeros(d, min(2, max(N, 0)))
    if N >= 1:
        q.levels[1][0] = 1.0  # e_0
    if N >= 2:
        for i in range(1, d + 1):
            for j in range(1, d + 1):
                q.levels[2][i * (d + 1) + j] += 0.5 * spec.rho[i - 1, j - 1]
    out = TensorSeries.unit(d, N)
    power = TensorSeries.unit(d, N)
    for k in range(1, N + 1):
        power = concat(power, q, N)
        out = out + (t**k / factorial(k)) * power
    return out


def conditional_expected_sig(
    sig_s: TensorSeries, t: float, spec: CorrelationSpec, N: int | None = None
) -> TensorSeries:
    """E[<e_I, sig at s+t> | F_s] given the signature value sig_s at time s.

    Chen's identity splits each word at the conditioning time, pairing the
    realized prefix with the expected signature of the remaining horizon.
    """
    if N is None:
        N = sig_s.N
    if sig_s.d != spec.d:
        raise ValueError("alphabet mismatch between sig_s and spec")
    if sig_s.N < N:
        raise ValueError(f"sig_s level {sig_s.N} below requested level {N}")
    d = spec.d
    out = TensorSeries.zeros(d, N)
    for k in range(N + 1):
        lv = out.levels[k]
        for idx in range(len(lv)):
            word = index_to_word(idx, k, d)
            total = 0.0
            for split in range(k + 1):
                left = sig_s.coeff(word[:split])
                if left == 0.0:
                    continue
                total += left * expected_sig_word(word[split:], t, spec)
            lv[idx] = total
    return out
