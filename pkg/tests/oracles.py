"""Independent reference computations used to freeze expected values."""

from __future__ import annotations

import numba
import numpy as np


def brute_force_votes(times, flags, capacity, span, fraction):
    """Recount every prefix from scratch; window restarts after each emission."""
    out = []
    last = -1
    for i in range(len(flags)):
        lo = max(last + 1, i - capacity + 1)
        count = 0
        for j in range(lo, i + 1):
            if times[j] > times[i] - span and flags[j]:
                count += 1
        if count / capacity > fraction:
            out.append(i)
            last = i
    return out


@numba.njit(cache=True)
def _brute_force_votes_nb(times, flags, capacity, span, fraction, out):
    n_out = 0
    last = -1
    for i in range(flags.shape[0]):
        lo = max(last + 1, i - capacity + 1)
        count = 0
        for j in range(lo, i + 1):
            if times[j] > times[i] - span and flags[j]:
                count += 1
        if count / capacity > fraction:
            out[n_out] = i
            n_out += 1
            last = i
    return n_out


def brute_force_votes_compiled(times: np.ndarray, flags: np.ndarray, capacity, span, fraction):
    """Same recount as ``brute_force_votes``, compiled for long sequences."""
    out = np.empty(flags.shape[0], dtype=np.int64)
    n = _brute_force_votes_nb(times.astype(np.int64), flags.astype(np.bool_), capacity, span, fraction, out)
    return out[:n].tolist()


def ema_scores(values, alpha):
    """Scalar recurrence for a single-AU trace: score before update, then EMA."""
    ema = values[0]
    scores = []
    for v in values:
        scores.append(abs(v - ema))
        ema = (1 - alpha) * ema + alpha * v
    return scores
