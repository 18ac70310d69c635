"""Action-unit branch of potential-error detection.

Each frame is scored against a rolling per-AU baseline, the resulting
flags feed a sliding-window vote, and the vote fraction can be raised
temporarily after the user says a flagged moment was fine.
"""

from __future__ import annotations

import copy
import dataclasses
from collections import deque
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

from .events import AuFrame, MalformedEventError


@dataclass(frozen=True)
class DetectorConfig:
    window_millis: int = 4000
    vote_fraction_base: float = 0.5
    frame_theta_base: float = 0.5
    boost_delta: float = 0.25
    boost_cap: float = 0.9
    decay_millis: int = 60000
    baseline_alpha: float = 0.05
    frame_rate_hz: float = 10.0

    def __post_init__(self):
        if self.window_millis <= 0:
            raise ValueError("window_millis must be positive")
        if not 0.0 < self.vote_fraction_base <= 1.0:
            raise ValueError("vote_fraction_base must be in (0, 1]")
        if not self.vote_fraction_base <= self.boost_cap < 1.0:
            raise ValueError("need vote_fraction_base <= boost_cap < 1")
        if self.frame_theta_base <= 0:
            raise ValueError("frame_theta_base must be positive")
        if self.boost_delta < 0:
            raise ValueError("boost_delta must be non-negative")
        if self.decay_millis <= 0:
            raise ValueError("decay_millis must be positive")
        if not 0.0 < self.baseline_alpha < 1.0:
            raise ValueError("baseline_alpha must be in (0, 1)")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame_rate_hz must be positive")
        if self.capacity < 2:
            raise ValueError("window must hold at least 2 frames")

    @property
    def capacity(self) -> int:
        # integer arithmetic where possible so 4000 ms @ 10 Hz is exactly 40
        return int(self.window_millis * self.frame_rate_hz // 1000)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectorConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown detector keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_KERNEL = None


def _feed_kernel():
    """Compile (once, cached on disk) the batch ring-buffer vote loop."""
    global _KERNEL
    if _KERNEL is not None:
        return _KERNEL
    import numba
    import numpy as np

    @numba.njit(cache=True)
    def kernel(times, flags, capacity, span, kmin, init_t, init_f):
        ring_t = np.empty(capacity, dtype=np.int64)
        ring_f = np.zeros(capacity, dtype=np.bool_)
        head = 0
        size = 0
        count = 0
        for k in range(init_t.shape[0]):
            ring_t[k] = init_t[k]
            ring_f[k] = init_f[k]
            size += 1
            count += init_f[k]
        out = np.empty(times.shape[0], dtype=np.int64)
        n_out = 0
        for i in range(times.shape[0]):
            t = times[i]
            if size == capacity:
                count -= ring_f[head]
                head = (head + 1) % capacity
                size -= 1
            tail = (head + size) % capacity
            ring_t[tail] = t
            ring_f[tail] = flags[i]
            count += flags[i]
            size += 1
            cutoff = t - span
            while ring_t[head] <= cutoff:
                count -= ring_f[head]
                head = (head + 1) % capacity
                size -= 1
            if count >= kmin:
                out[n_out] = i
                n_out += 1
                head = 0
                size = 0
                count = 0
        idx = (head + np.arange(size)) % capacity
        return out[:n_out], ring_t[idx], ring_f[idx]

    _KERNEL = kernel
    return kernel


def min_emitting_count(capacity: int, fraction: float) -> int:
    """Smallest flag count k with k / capacity > fraction (capacity + 1 if none)."""
    for k in range(capacity + 1):
        if k / capacity > fraction:
            return k
    return capacity + 1


class SlidingVote:
    """Ring of frame flags covering at most ``span`` ms and ``capacity`` frames.

    Keeps a running flag count so each push is O(1) amortized.
    """

    __slots__ = ("capacity", "span", "_t", "_f", "count")

    def __init__(self, capacity: int, span: int):
        self.capacity = capacity
        self.span = span
        self._t: deque[int] = deque()
        self._f: deque[int] = deque()
        self.count = 0

    def __len__(self) -> int:
        return len(self._t)

    def push(self, t: int, flagged: bool) -> int:
        ts, fs = self._t, self._f
        if len(ts) == self.capacity:
            ts.popleft()
            self.count -= fs.popleft()
        ts.append(t)
        fs.append(1 if flagged else 0)
        self.count += 1 if flagged else 0
        cutoff = t - self.span
        while ts[0] <= cutoff:
            ts.popleft()
            self.count -= fs.popleft()
        return self.count

    def clear(self) -> None:
        self._t.clear()
        self._f.clear()
        self.count = 0

    def oldest(self) -> int | None:
        return self._t[0] if self._t else None

    def feed(self, times: Sequence[int], flags: Sequence[bool], fraction: float) -> list[int]:
        """Push a batch of frames, voting after each; returns emitting offsets.

        Same semantics as push + vote + clear-on-emit per frame. The loop
        runs in a compiled kernel over the same ring contents, for offline
        re-analysis of long flag traces.
        """
        import numpy as np

        kmin = min_emitting_count(self.capacity, fraction)
        t_arr = np.asarray(times, dtype=np.int64)
        f_arr = np.asarray(flags, dtype=np.bool_)
        if t_arr.shape != f_arr.shape:
            raise ValueError("times and flags differ in length")
        if t_arr.size > 1 and bool((np.diff(t_arr) < 0).any()):
            raise MalformedEventError("frame times regress")
        ring_t = np.fromiter(self._t, dtype=np.int64, count=len(self._t))
        ring_f = np.fromiter(self._f, dtype=np.bool_, count=len(self._f))
        out, ring_t, ring_f = _feed_kernel()(t_arr, f_arr, self.capacity, self.span, kmin, ring_t, ring_f)
        self._t = deque(ring_t.tolist())
        self._f = deque(int(x) for x in ring_f)
        self.count = int(ring_f.sum())
        return out.tolist()

    def __deepcopy__(self, memo):
        other = SlidingVote(self.capacity, self.span)
        other._t = self._t.copy()
        other._f = self._f.copy()
        other.count = self.count
        return other


@dataclass(frozen=True)
class FrameFlag:
    t: int
    flagged: bool
    score: float


@dataclass(frozen=True)
class AuCandidate:
    """Phase-1 AU candidate, stamped with the newest frame in the window."""

    t: int


@dataclass
class DetectorState:
    window: SlidingVote
    vote_fraction_now: float
    ema_baseline: dict[int, float] | None = None
    boosted_value: float | None = None
    last_boost_at: int | None = None

    @classmethod
    def initial(cls, config: DetectorConfig) -> "DetectorState":
        return cls(SlidingVote(config.capacity, config.window_millis), config.vote_fraction_base)

    def copy(self) -> "DetectorState":
        return DetectorState(
            copy.deepcopy(self.window),
            self.vote_fraction_now,
            None if self.ema_baseline is None else dict(self.ema_baseline),
            self.boosted_value,
            self.last_boost_at,
        )


class FrameClassifier(Protocol):
    """Scores one frame; a learned model can stand in for the reference scorer."""

    def score(self, frame: AuFrame, baseline: Mapping[int, float]) -> float: ...


class BaselineDeviationScorer:
    """Mean absolute deviation of the frame from the per-AU EMA baseline."""

    def score(self, frame: AuFrame, baseline: Mapping[int, float]) -> float:
        vals = frame.intensities
        return sum(abs(v - baseline[k]) for k, v in vals.items()) / len(vals)


REFERENCE_SCORER = BaselineDeviationScorer()


def score_frame(
    frame: AuFrame,
    state: DetectorState,
    config: DetectorConfig,
    scorer: FrameClassifier = REFERENCE_SCORER,
) -> tuple[FrameFlag, DetectorState]:
    """Score ``frame``, push its flag into the window and update the EMA.

    The first frame seeds the baseline with itself.
    """
    state = state.copy()
    if not frame.intensities:
        raise MalformedEventError(f"AU frame at t={frame.t} has no intensities")
    if state.ema_baseline is None:
        state.ema_baseline = dict(frame.intensities)
    elif state.ema_baseline.keys() != frame.intensities.keys():
        raise MalformedEventError(
            f"AU key set changed at t={frame.t}: "
            f"{sorted(frame.intensities)} vs baseline {sorted(state.ema_baseline)}"
        )
    s = scorer.score(frame, state.ema_baseline)
    flag = FrameFlag(frame.t, s > config.frame_theta_base, s)
    a = config.baseline_alpha
    ema = state.ema_baseline
    for k, v in frame.intensities.items():
        ema[k] = (1.0 - a) * ema[k] + a * v
    state.window.push(frame.t, flag.flagged)
    return flag, state


def window_vote(state: DetectorState) -> tuple[AuCandidate | None, DetectorState]:
    """Emit a candidate iff the flagged share of the window strictly exceeds
    the current vote fraction; the window is cleared after emitting."""
    w = state.window
    if len(w) == 0 or not w.count / w.capacity > state.vote_fraction_now:
        return None, state
    t = w._t[-1]
    state = state.copy()
    state.window.clear()
    return AuCandidate(t), state


def adapt_after_verification(
    state: DetectorState, error_confirmed: bool, now: int, config: DetectorConfig
) -> DetectorState:
    if error_confirmed:
        return state
    state = decay_threshold(state, now, config)
    boosted = min(config.boost_cap, state.vote_fraction_now + config.boost_delta)
    return dataclasses.replace(
        state, vote_fraction_now=boosted, boosted_value=boosted, last_boost_at=now
    )


def decay_threshold(state: DetectorState, now: int, config: DetectorConfig) -> DetectorState:
    """Linear return of the vote fraction to base over ``decay_millis``."""
    if state.last_boost_at is None or state.boosted_value is None:
        return state
    base = config.vote_fraction_base
    elapsed = now - state.last_boost_at
    if elapsed >= config.decay_millis:
        value = base
    else:
        hi = state.boosted_value
        value = max(base, hi - (hi - base) * max(elapsed, 0) / config.decay_millis)
    if value == state.vote_fraction_now:
        return state
    return dataclasses.replace(state, vote_fraction_now=value)


def flag_trace_csv(rows: Sequence[tuple[FrameFlag, float]]) -> str:
    """Diagnostic dump ``t,score,flagged,vote_fraction``."""
    lines = ["t,score,flagged,vote_fraction"]
    for flag, frac in rows:
        lines.append(f"{flag.t},{flag.score:.6g},{int(flag.flagged)},{frac:.6g}")
    return "\n".join(lines) + "\n"
