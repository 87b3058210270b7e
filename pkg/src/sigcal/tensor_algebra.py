"""Words and truncated tensor series over the alphabet {0, ..., d}.

Letter 0 is reserved for the time component of a time-extended path, letters
1..d index the driving coordinates.  A word is a tuple of letters; the empty
tuple is the empty word.  Series are stored densely per level, level k being
an array of length (d+1)**k indexed by the base-(d+1) encoding of the word
(most significant letter first).

All values are immutable after construction and every operation is a pure
function, so everything here is safe to share across threads.
"""

from __future__ import annotations

import functools
from typing import Iterable, Iterator

import numpy as np

Word = tuple


def series_dim(width: int, N: int) -> int:
    """Total number of coefficients of a series truncated at level N."""
    if width == 1:
        return N + 1
    return (width ** (N + 1) - 1) // (width - 1)


def level_offsets(width: int, N: int) -> list[int]:
    """Start offset of each level inside the flat coefficient vector."""
    offs = [0]
    for k in range(N + 1):
        offs.append(offs[-1] + width**k)
    return offs


def word_index(word: Word, d: int) -> int:
    """Index of a word inside its level array (base-(d+1), MSB first)."""
    width = d + 1
    idx = 0
    for letter in word:
        if not 0 <= letter <= d:
            raise ValueError(f"letter {letter} outside alphabet {{0,...,{d}}}")
        idx = idx * width + letter
    return idx


def index_to_word(idx: int, k: int, d: int) -> Word:
    """Inverse of :func:`word_index` at level k."""
    width = d + 1
    letters = []
    for _ in range(k):
        idx, r = divmod(idx, width)
        letters.append(r)
    return tuple(reversed(letters))


def word_str(word: Word) -> str:
    """Text form used in JSON keys and CSV headers, e.g. ``(0,1,1)``."""
    return "(" + ",".join(str(i) for i in word) + ")"


def parse_word(s: str) -> Word:
    s = s.strip()
    if not (s.startswith("(") and s.endswith(")")):
        raise ValueError(f"malformed word {s!r}")
    body = s[1:-1].strip()
    if not body:
        return ()
    return tuple(int(tok) for tok in body.split(","))


def words_of_length(k: int, d: int) -> Iterator[Word]:
    for idx in range((d + 1) ** k):
        yield index_to_word(idx, k, d)


def iter_words(N: int, d: int) -> Iterator[Word]:
    """All words of length <= N in graded order (level, then index)."""
    for k in range(N + 1):
        yield from words_of_length(k, d)


class TensorSeries:
    """Truncated element of the tensor algebra over {0, ..., d}.

    ``levels[k]`` is a dense float64 array of length ``(d+1)**k``.  Addition
    and scalar multiplication are componentwise; the product operations live
    as module-level functions because they take an explicit output level.
    """

    __slots__ = ("d", "N", "levels")

    def __init__(self, d: int, N: int, levels: list[np.ndarray] | None = None):
        if d < 1 or N < 0:
            raise ValueError("need d >= 1 and N >= 0")
        self.d = d
        self.N = N
        width = d + 1
        if levels is None:
            self.levels = [np.zeros(width**k) for k in range(N + 1)]
        else:
            if len(levels) != N + 1:
                raise ValueError("levels length does not match N")
            self.levels = [np.asarray(lv, dtype=float) for lv in levels]
            for k, lv in enumerate(self.levels):
                if lv.shape != (width**k,):
                    raise ValueError(f"level {k} has wrong length")

    @property
    def width(self) -> int:
        return self.d + 1

    @classmethod
    def zeros(cls, d: int, N: int) -> "TensorSeries":
        return cls(d, N)

    @classmethod
    def unit(cls, d: int, N: int) -> "TensorSeries":
        out = cls(d, N)
        out.levels[0][0] = 1.0
        return out

    @classmethod
    def basis(cls, word: Word, d: int, N: int, coeff: float = 1.0) -> "TensorSeries":
        if len(word) > N:
            raise ValueError(f"word {word} longer than truncation level {N}")
        out = cls(d, N)
        out.levels[len(word)][word_index(word, d)] = coeff
        return out

    @classmethod
    def from_dict(cls, coeffs: dict, d: int, N: int) -> "TensorSeries":
        out = cls(d, N)
        for word, c in coeffs.items():
            out.levels[len(word)][word_index(word, d)] += c
        return out

    def copy(self) -> "TensorSeries":
        return TensorSeries(self.d, self.N, [lv.copy() for lv in self.levels])

    def truncated(self, N: int) -> "TensorSeries":
        """Copy truncated (or zero-padded) to level N."""
        width = self.width
        levels = [
            self.levels[k].copy() if k <= self.N else np.zeros(width**k)
            for k in range(N + 1)
        ]
        return TensorSeries(self.d, N, levels)

    def coeff(self, word: Word) -> float:
        if len(word) > self.N:
            return 0.0
        return float(self.levels[len(word)][word_index(word, self.d)])

    def items(self, tol: float = 0.0) -> Iterator[tuple[Word, float]]:
        """Yield (word, coefficient) for entries with |coeff| > tol."""
        for k, lv in enumerate(self.levels):
            (nz,) = np.nonzero(np.abs(lv) > tol)
            for idx in nz:
                yield index_to_word(int(idx), k, self.d), float(lv[idx])

    def flat(self) -> np.ndarray:
        return np.concatenate([lv for lv in self.levels])

    @classmethod
    def from_flat(cls, vec: np.ndarray, d: int, N: int) -> "TensorSeries":
        offs = level_offsets(d + 1, N)
        if len(vec) != offs[-1]:
            raise ValueError("flat vector length does not match (d, N)")
        return cls(d, N, [np.array(vec[offs[k]:offs[k + 1]]) for k in range(N + 1)])

    def norm_inf(self) -> float:
        return max(float(np.max(np.abs(lv))) if lv.size else 0.0 for lv in self.levels)

    def __add__(self, other: "TensorSeries") -> "TensorSeries":
        _check_same_alphabet(self, other)
        N = max(self.N, other.N)
        a, b = self.truncated(N), other.truncated(N)
        return TensorSeries(self.d, N, [x + y for x, y in zip(a.levels, b.levels)])

    def __sub__(self, other: "TensorSeries") -> "TensorSeries":
        return self + (-1.0) * other

    def __mul__(self, scalar: float) -> "TensorSeries":
        return TensorSeries(self.d, self.N, [lv * float(scalar) for lv in self.levels])

    __rmul__ = __mul__

    def __neg__(self) -> "TensorSeries":
        return self * -1.0

    def __repr__(self) -> str:
        terms = [f"{c:+.6g}*e{word_str(w)}" for w, c in self.items()]
        body = " ".join(terms) if terms else "0"
        return f"TensorSeries(d={self.d}, N={self.N}: {body})"


def _check_same_alphabet(a: TensorSeries, b: TensorSeries) -> None:
    if a.d != b.d:
        raise ValueError(f"alphabet mismatch: d={a.d} vs d={b.d}")


def max_abs_diff(a: TensorSeries, b: TensorSeries) -> float:
    return (a - b).norm_inf()


def concat(a: TensorSeries, b: TensorSeries, N: int) -> TensorSeries:
    """Tensor (concatenation) product a (x) b, levels above N discarded."""
    _check_same_alphabet(a, b)
    out = TensorSeries.zeros(a.d, N)
    for k in range(N + 1):
        acc = out.levels[k]
        for i in range(k + 1):
            j = k - i
            if i > a.N or j > b.N:
                continue
            ai, bj = a.levels[i], b.levels[j]
            if not ai.any() or not bj.any():
                continue
            acc += np.multiply.outer(ai, bj).reshape(-1)
    return out


@functools.lru_cache(maxsize=None)
def _shuffle_words(I: Word, J: Word) -> dict:
    """Multiset of interleavings of I and J as {word: multiplicity}.

    Cached because lifted products reuse shuffles of the same word pairs
    heavily.  The returned dict must be treated as read-only.
    """
    if not I:
        return {J: 1}
    if not J:
        return {I: 1}
    out: dict = {}
    for w, c in _shuffle_words(I[:-1], J).items():
        key = w + (I[-1],)
        out[key] = out.get(key, 0) + c
    for w, c in _shuffle_words(I, J[:-1]).items():
        key = w + (J[-1],)
        out[key] = out.get(key, 0) + c
    return out


def shuffle(a: TensorSeries, b: TensorSeries, N: int) -> TensorSeries:
    """Shuffle product, extended bilinearly, truncated at level N."""
    _check_same_alphabet(a, b)
    out = TensorSeries.zeros(a.d, N)
    d = a.d
    for I, ca in a.items():
        for J, cb in b.items():
            if len(I) + len(J) > N:
                continue
            c = ca * cb
            lv = out.levels[len(I) + len(J)]
            for w, cnt in _shuffle_words(I, J).items():
                lv[word_index(w, d)] += c * cnt
    return out


def half_shuffle(a: TensorSeries, b: TensorSeries, N: int) -> TensorSeries:
    """Half-shuffle a < b = (a sh b') (x) last(b); b's empty-word part is killed."""
    _check_same_alphabet(a, b)
    out = TensorSeries.zeros(a.d, N)
    d = a.d
    for J, cb in b.items():
        if not J:
            continue
        Jp, jm = J[:-1], J[-1]
        for I, ca in a.items():
            if len(I) + len(J) > N:
                continue
            c = ca * cb
            lv = out.levels[len(I) + len(J)]
            for w, cnt in _shuffle_words(I, Jp).items():
                lv[word_index(w + (jm,), d)] += c * cnt
    return out


def qv_bracket(a: TensorSeries, b: TensorSeries, rho: np.ndarray, N: int) -> TensorSeries:
    """Quadratic-variation product for correlated-Brownian primaries.

    e_I [sh] e_J = rho_{i_n, j_m} (e_I' sh e_J') (x) e_0 when both terminal
    letters are Brownian, zero when either one is the time letter.
    """
    _check_same_alphabet(a, b)
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (a.d, a.d):
        raise ValueError(f"rho must be {a.d}x{a.d}, got {rho.shape}")
    out = TensorSeries.zeros(a.d, N)
    d = a.d
    for I, ca in a.items():
        if not I or I[-1] == 0:
            continue
        for J, cb in b.items():
            if not J or J[-1] == 0:
                continue
            n = len(I) + len(J) - 1
            if n > N:
                continue
            c = ca * cb * rho[I[-1] - 1, J[-1] - 1]
            if c == 0.0:
                continue
            lv = out.levels[n]
            for w, cnt in _shuffle_words(I[:-1], J[:-1]).items():
                lv[word_index(w + (0,), d)] += c * cnt
    return out


def tensor_exp(x: TensorSeries, N: int) -> TensorSeries:
    """Tensor exponential of a level-1 element: sum of x^(x)k / k!."""
    for k, lv in enumerate(x.levels):
        if k != 1 and lv.any():
            raise ValueError("tensor_exp requires support on level 1 only")
    v = x.levels[1] if x.N >= 1 else np.zeros(x.width)
    out = TensorSeries.zeros(x.d, N)
    out.levels[0][0] = 1.0
    power = np.array([1.0])
    for k in range(1, N + 1):
        power = np.multiply.outer(power, v).reshape(-1) / k
        out.levels[k][:] = power
    return out


def inner(a: TensorSeries, b: TensorSeries) -> float:
    """Pairing <a, b>: sum of coefficientwise products over shared levels."""
    _check_same_alphabet(a, b)
    total = 0.0
    for k in range(min(a.N, b.N) + 1):
        total += float(np.dot(a.levels[k], b.levels[k]))
    return total
