"""The linear signature model in plain and martingale bases.

A model of order n writes the asset as s0 plus a linear pairing of signature
coefficients of the time-extended driver path.  The martingale basis replaces
each word I by the two-term combination that turns Ito integrals against a
fixed driver into plain signature coefficients; maturity-indexed correction
coefficients activate at their maturities and pair against differences of
signature values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .expected_signature import CorrelationSpec, expected_sig
from .signature import SigStream
from .tensor_algebra import (
    TensorSeries,
    Word,
    half_shuffle,
    inner,
    iter_words,
    parse_word,
    shuffle,
    word_str,
)

PLAIN = "plain"
MARTINGALE = "martingale"


def tilde_basis(I: Word, k: int, rho: CorrelationSpec, N: int | None = None) -> TensorSeries:
    """Martingale-basis element for word I against driver letter k.

    e_I (x) e_k, corrected by -(rho_{i_last,k}/2) e_I' (x) e_0 when the last
    letter of I is Brownian; the empty word maps to e_k itself.
    """
    if not 1 <= k <= rho.d:
        raise ValueError(f"driver letter must be in 1..{rho.d}, got {k}")
    if N is None:
        N = len(I) + 1
    if len(I) + 1 > N:
        raise ValueError("output level too small for word")
    out = TensorSeries.basis(I + (k,), rho.d, N)
    if I and I[-1] != 0:
        out = out + TensorSeries.basis(I[:-1] + (0,), rho.d, N, -0.5 * rho.rho[I[-1] - 1, k - 1])
    return out


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of a signature model, keyed by words in text order.

    In the martingale basis ``ell`` maps words of length <= n-1 to driver
    coefficients (word () is the constant driver loading); in the plain basis
    it maps words of length 1..n.  ``s0`` pins the empty-word constant and is
    never a free parameter.  Corrections are (maturity, coefficient map)
    pairs, martingale basis only, strictly increasing maturities.
    """

    d: int
    n: int
    rho: CorrelationSpec
    s0: float
    ell: dict
    basis: str = MARTINGALE
    corrections: tuple = ()

    def __post_init__(self):
        if self.basis not in (PLAIN, MARTINGALE):
            raise ValueError(f"unknown basis tag {self.basis!r}")
        if self.rho.d != self.d:
            raise ValueError("rho dimension does not match d")
        bound = self.n - 1 if self.basis == MARTINGALE else self.n
        for w in self.ell:
            if len(w) > bound:
                raise ValueError(f"word {w} exceeds degree bound {bound}")
            if self.basis == PLAIN and len(w) == 0:
                raise ValueError("plain basis stores the constant in s0, not ell")
            if any(not 0 <= c <= self.d for c in w):
                raise ValueError(f"word {w} has letters outside the alphabet")
        if self.corrections:
            if self.basis != MARTINGALE:
                raise ValueError("corrections require the martingale basis")
            mats = [T for T, _ in self.corrections]
            if any(b <= a for a, b in zip(mats, mats[1:])):
                raise ValueError("correction maturities must be strictly increasing")
            for _, em in self.corrections:
                for w in em:
                    if len(w) > self.n - 1:
                        raise ValueError(f"correction word {w} exceeds degree bound")
            object.__setattr__(
                self, "corrections", tuple((float(T), dict(em)) for T, em in self.corrections)
            )

    def words(self) -> list[Word]:
        """Free-coefficient words of the tagged basis in graded order."""
        bound = self.n - 1 if self.basis == MARTINGALE else self.n
        ws = list(iter_words(bound, self.d))
        return ws if self.basis == MARTINGALE else ws[1:]

    def coeff_vector(self, ell: dict | None = None) -> np.ndarray:
        src = self.ell if ell is None else ell
        return np.array([src.get(w, 0.0) for w in self.words()])

    def basis_series(self, I: Word) -> TensorSeries:
        if self.basis == MARTINGALE:
            return tilde_basis(I, 1, self.rho)
        return TensorSeries.basis(I, self.d, len(I))

    def driver_block(self, ell: dict | None = None) -> TensorSeries:
        """Sum of coefficient-weighted basis elements (level <= n)."""
        out = TensorSeries.zeros(self.d, max(self.n, 1))
        for w, c in (self.ell if ell is None else ell).items():
            if c != 0.0:
                out = out + c * self.basis_series(w).truncated(out.N)
        return out

    def to_json(self) -> str:
        doc = {
            "d": self.d,
            "n": self.n,
            "rho": self.rho.rho.tolist(),
            "s0": self.s0,
            "basis": self.basis,
            "ell": {word_str(w): c for w, c in sorted(self.ell.items())},
        }
        if self.corrections:
            doc["corrections"] = [
                {"T": T, "ell": {word_str(w): c for w, c in sorted(em.items())}}
                for T, em in self.corrections
            ]
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        doc = json.loads(text)
        corrections = tuple(
            (entry["T"], {parse_word(k): float(v) for k, v in entry["ell"].items()})
            for entry in doc.get("corrections", [])
        )
        return cls(
            d=int(doc["d"]),
            n=int(doc["n"]),
            rho=CorrelationSpec(int(doc["d"]), np.asarray(doc["rho"], dtype=float)),
            s0=float(doc["s0"]),
            ell={parse_word(k): float(v) for k, v in doc["ell"].items()},
            basis=doc.get("basis", MARTINGALE),
            corrections=corrections,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ModelSpec":
        with open(path) as fh:
            return cls.from_json(fh.read())


def eval_model(spec: ModelSpec, stream: SigStream) -> np.ndarray:
    """Model price path s0 + <coefficients, sig_t> on the stream grid.

    Corrections add, from their maturity onward, pairings against the
    difference of signature values sig_t - sig_{T_j} (the maturity must lie
    on the stream grid).
    """
    if stream.d != spec.d:
        raise ValueError("stream alphabet does not match model")
    prices = spec.s0 + stream.pair(spec.driver_block())
    for T_j, em in spec.corrections:
        idx = stream.grid_index(T_j)
        block = TensorSeries.zeros(spec.d, max(spec.n, 1))
        for w, c in em.items():
            if c != 0.0:
                block = block + c * tilde_basis(w, 1, spec.rho).truncated(block.N)
        vals = stream.pair(block)
        active = stream.times >= stream.times[idx]
        prices = prices + active * (vals - vals[idx])
    return prices


def to_plain(spec: ModelSpec) -> ModelSpec:
    """Expand the martingale basis into plain-word coefficients."""
    if spec.basis == PLAIN:
        return spec
    if spec.corrections:
        raise ValueError("convert corrections per maturity before going plain")
    plain: dict = {}
    for w, c in spec.ell.items():
        if c == 0.0:
            continue
        for word, coeff in tilde_basis(w, 1, spec.rho).items():
            plain[word] = plain.get(word, 0.0) + c * coeff
    return ModelSpec(
        d=spec.d, n=spec.n, rho=spec.rho, s0=spec.s0, ell=plain, basis=PLAIN
    )


def model_sig_lift(spec: ModelSpec, J: Word) -> TensorSeries:
    """Word-J signature coefficient of (t, model) as a series in the driver.

    Left-folds the half-shuffle over the letters of J, each letter
    contributing e_0 (time) or the driver block (price).  The output lives
    at level |J| * n.
    """
    if any(j not in (0, 1) for j in J):
        raise ValueError("lift words use letters {0 (time), 1 (price)} only")
    N = max(len(J) * spec.n, 1)
    if not J:
        return TensorSeries.unit(spec.d, 0)
    e0 = TensorSeries.basis((0,), spec.d, 1)
    block = spec.driver_block()
    out = (e0 if J[0] == 0 else block).truncated(N)
    for j in J[1:]:
        out = half_shuffle(out, e0 if j == 0 else block, N)
    return out


def model_variance(spec: ModelSpec, t: float) -> float:
    """Variance of the model at time t from the expected driver signature.

    Equals the expectation of the shuffle square of the driver block, i.e.
    E[(S_t - s0)^2] for a martingale-basis model.
    """
    if spec.basis != MARTINGALE:
        raise ValueError("variance formula requires the martingale basis")
    if spec.corrections:
        raise ValueError("variance with corrections is not supported")
    block = spec.driver_block()
    square = shuffle(block, block, 2 * spec.n)
    return inner(square, expected_sig(2 * spec.n, t, spec.rho))


def sabr_taylor_coefficients(s0: float, v0: float, alpha: float) -> ModelSpec:
    """Order-2 coefficients reproducing lognormal SABR (beta=1, rho=0) locally.

    Letter 1 is the price driver, letter 2 the volatility driver.  The
    time-word coefficient carries the Stratonovich drift corrections, so the
    short-horizon gap to the true SABR path shrinks like t^(3/2).
    """
    rho = CorrelationSpec.identity(2)
    ell = {
        (): s0 * v0,
        (0,): -0.5 * s0 * v0**3 - 0.5 * alpha**2 * s0 * v0,
        (1,): s0 * v0**2,
        (2,): alpha * s0 * v0,
    }
    return ModelSpec(d=2, n=2, rho=rho, s0=s0, ell=ell, basis=MARTINGALE)
