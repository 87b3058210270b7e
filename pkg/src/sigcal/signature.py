"""Exact truncated signatures of sampled, piecewise-linearly interpolated paths.

A sampled path is extended with time as letter 0 and interpolated linearly;
the signature of each linear segment is the tensor exponential of its level-1
increment and grid-point values follow from Chen's identity.  This is the
exact signature of the interpolant, which converges to the Stratonovich
signature of the underlying semimartingale under grid refinement.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .tensor_algebra import TensorSeries, concat, level_offsets, series_dim, tensor_exp

# Fixed chunk size for batched work: results never depend on how many workers
# map the chunks, only on this partition.
CHUNK = 8192


def worker_count() -> int:
    env = os.environ.get("SIGCAL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def run_chunked(n: int, fn, workers: int | None = None, chunk: int = CHUNK) -> None:
    """Apply fn(lo, hi, chunk_index) over the fixed partition of range(n).

    fn must write its results into disjoint preallocated slices; with that
    contract the output is byte-identical for any worker count.
    """
    bounds = [(lo, min(lo + chunk, n), i) for i, lo in enumerate(range(0, n, chunk))]
    w = worker_count() if workers is None else workers
    if w <= 1 or len(bounds) <= 1:
        for lo, hi, ci in bounds:
            fn(lo, hi, ci)
        return
    with ThreadPoolExecutor(max_workers=w) as ex:
        list(ex.map(lambda args: fn(*args), bounds))


@dataclass(frozen=True)
class SamplePath:
    """A path sampled on a strictly increasing time grid (times in years)."""

    times: np.ndarray
    values: np.ndarray  # shape (len(times), d)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("path needs at least one segment")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if v.shape[0] != len(t):
            raise ValueError("values row count must equal times length")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def increments(self) -> np.ndarray:
        """Time-extended increments, shape (M, d+1) with letter 0 = dt."""
        return np.concatenate(
            [np.diff(self.times)[:, None], np.diff(self.values, axis=0)], axis=1
        )


def _sig_step(levels: list[np.ndarray], w: np.ndarray, N: int) -> None:
    """In-place update sig <- sig (x) exp(w) for a batch of level-1 increments.

    levels[k] has shape (B, width**k); w has shape (B, width).  Levels are
    updated from the top down so lower levels stay at their old values while
    they are still needed.
    """
    B = w.shape[0]
    pw = [None, w]
    for j in range(2, N + 1):
        pw.append((pw[j - 1][:, :, None] * w[:, None, :]).reshape(B, -1) / j)
    for k in range(N, 0, -1):
        acc = levels[k]
        for j in range(1, k):
            acc += (levels[k - j][:, :, None] * pw[j][:, None, :]).reshape(B, -1)
        acc += pw[k]  # j = k term: levels[0] is the constant 1


def batch_signatures(
    increments: np.ndarray,
    N: int,
    snapshots: np.ndarray | None = None,
    store_all: bool = False,
) -> np.ndarray:
    """Signatures of a batch of piecewise-linear paths given their increments.

    Args:
        increments: array (B, M, width); column 0 must be the time increment.
        N: truncation level.
        snapshots: grid indices (0..M) at which to record signatures.
        store_all: record every grid point (overrides snapshots).

    Returns:
        (B, dim) terminal signatures, or (B, len(snapshots), dim) /
        (B, M+1, dim) flat coefficient arrays when recording intermediates.
    """
    inc = np.asarray(increments, dtype=float)
    if inc.ndim != 3:
        raise ValueError("increments must have shape (B, M, width)")
    B, M, width = inc.shape
    d = width - 1
    dim = series_dim(width, N)
    offs = level_offsets(width, N)
    levels = [np.zeros((B, width**k)) for k in range(N + 1)]
    levels[0][:, 0] = 1.0

    if store_all:
        snapshots = np.arange(M + 1)
    if snapshots is not None:
        snapshots = np.asarray(snapshots, dtype=int)
        out = np.empty((B, len(snapshots), dim))
        snap_at = {int(g): i for i, g in enumerate(snapshots)}
    else:
        out = np.empty((B, dim))
        snap_at = {}

    def record(grid_idx: int) -> None:
        row = snap_at.get(grid_idx)
        if row is None:
            return
        for k in range(N + 1):
            out[:, row, offs[k]:offs[k + 1]] = levels[k]

    record(0)
    for m in range(M):
        _sig_step(levels, inc[:, m, :], N)
        record(m + 1)
    if snapshots is None:
        for k in range(N + 1):
            out[:, offs[k]:offs[k + 1]] = levels[k]
    return out


class SigStream:
    """Signature of a time-extended path at every grid point.

    ``coeffs[m]`` is the flat coefficient vector of the signature from t_0 to
    t_m, truncated at level N, over the alphabet {0, ..., d} of width d+1.
    """

    def __init__(self, times: np.ndarray, d: int, N: int, coeffs: np.ndarray,
                 increments: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.d = d
        self.N = N
        self.coeffs = coeffs
        self.increments = increments

    @property
    def width(self) -> int:
        return self.d + 1

    @property
    def dim(self) -> int:
        return self.coeffs.shape[1]

    def __len__(self) -> int:
        return len(self.times)

    def sig(self, m: int) -> TensorSeries:
        return TensorSeries.from_flat(self.coeffs[m], self.d, self.N)

    def terminal(self) -> TensorSeries:
        return self.sig(len(self.times) - 1)

    def pair(self, series: TensorSeries) -> np.ndarray:
        """<series, sig_t> at every grid point."""
        if series.d != self.d:
            raise ValueError("alphabet mismatch")
        if series.N > self.N:
            raise ValueError(f"stream level {self.N} below series level {series.N}")
        vec = series.truncated(self.N).flat()
        return self.coeffs @ vec

    def grid_index(self, t: float, tol: float = 1e-9) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > tol * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the stream grid")
        return i


def path_signature(path: SamplePath, N: int) -> SigStream:
    """Exact signature stream of the piecewise-linear time-extended path."""
    if N < 1:
        raise ValueError("need N >= 1")
    inc = path.increments()
    coeffs = batch_signatures(inc[None, :, :], N, store_all=True)[0]
    return SigStream(path.times, path.d, N, coeffs, inc)


def sig_increment(stream: SigStream, j: int, m: int) -> TensorSeries:
    """Signature over [t_j, t_m], folded from the stored segment increments."""
    M = len(stream.times) - 1
    if not (0 <= j <= m <= M):
        raise ValueError(f"need 0 <= j <= m <= {M}")
    out = TensorSeries.unit(stream.d, stream.N)
    for seg in range(j, m):
        w = TensorSeries(stream.d, 1, [np.zeros(1), stream.increments[seg]])
        out = concat(out, tensor_exp(w, stream.N), stream.N)
    return out
