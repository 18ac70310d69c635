import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erraware import au_detector as au
from erraware.au_detector import DetectorConfig, DetectorState, SlidingVote
from erraware.events import AuFrame, MalformedEventError
from oracles import brute_force_votes, ema_scores

CFG = DetectorConfig()


def frame(t, value, aus=(1, 2, 4)):
    return AuFrame(t, {a: value for a in aus})


def test_default_capacity_is_forty():
    assert CFG.capacity == 40


@pytest.mark.parametrize(
    "kw",
    [
        {"vote_fraction_base": 0.0},
        {"vote_fraction_base": 0.95},  # above the cap
        {"boost_cap": 1.0},
        {"window_millis": 100},  # one frame at 10 Hz
        {"baseline_alpha": 1.0},
        {"decay_millis": 0},
    ],
)
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        DetectorConfig(**kw)


def test_config_from_dict_rejects_unknown():
    with pytest.raises(ValueError):
        DetectorConfig.from_dict({"windw_millis": 4000})


def test_score_identical_frame_is_zero():
    st0 = DetectorState.initial(CFG)
    _, s = au.score_frame(frame(0, 1.0), st0, CFG)
    flag, _ = au.score_frame(frame(100, 1.0), s, CFG)
    assert flag.score == 0.0 and not flag.flagged


def test_score_direct_arithmetic():
    cfg = DetectorConfig(frame_theta_base=1.0)
    s = DetectorState.initial(cfg)
    _, s = au.score_frame(frame(0, 0.0), s, cfg)
    flag, s2 = au.score_frame(frame(100, 2.0), s, cfg)
    assert flag.score == 2.0 and flag.flagged
    # ema updated after scoring
    assert s2.ema_baseline[1] == pytest.approx(0.05 * 2.0)
    # the input state is untouched
    assert s.ema_baseline[1] == 0.0


def test_score_key_set_mismatch():
    s = DetectorState.initial(CFG)
    _, s = au.score_frame(frame(0, 0.0), s, CFG)
    with pytest.raises(MalformedEventError):
        au.score_frame(AuFrame(100, {1: 0.0}), s, CFG)


def test_step_change_trace_against_scalar_recurrence():
    values = [0.2] * 50 + [2.2] * 50
    expected = ema_scores(values, CFG.baseline_alpha)
    s = DetectorState.initial(CFG)
    flags = []
    for i, v in enumerate(values):
        f, s = au.score_frame(AuFrame(i * 100, {7: v}), s, CFG)
        assert f.score == pytest.approx(expected[i], abs=1e-12)
        flags.append(f.flagged)
    first = flags.index(True)
    assert first == 50
    # flags persist exactly while the recomputed deviation exceeds theta
    assert flags == [e > CFG.frame_theta_base for e in expected]


def test_score_replay_bit_identical():
    rng = random.Random(1)
    frames = [AuFrame(i * 100, {a: rng.uniform(0, 5) for a in (1, 2)}) for i in range(200)]

    def run():
        s = DetectorState.initial(CFG)
        out = []
        for fr in frames:
            f, s = au.score_frame(fr, s, CFG)
            out.append(f.score)
        return out

    assert run() == run()


def _window_with(flags, cfg=CFG):
    s = DetectorState.initial(cfg)
    for i, f in enumerate(flags):
        s.window.push(i * 100, f)
    return s


@pytest.mark.parametrize("n_flagged,emits", [(21, True), (20, False), (0, False)])
def test_window_vote_over_half(n_flagged, emits):
    s = _window_with([True] * n_flagged + [False] * (40 - n_flagged))
    cand, s2 = au.window_vote(s)
    assert (cand is not None) is emits
    if emits:
        assert cand.t == 3900
        assert len(s2.window) == 0
        assert len(s.window) == 40  # original state not mutated


def test_window_holds_only_last_window_millis():
    w = SlidingVote(40, 4000)
    for i in range(100):
        w.push(i * 100, True)
    assert len(w) == 40 and w.oldest() == 9900 - 3900
    # a time gap evicts by age even below capacity
    w.push(20000, False)
    assert len(w) == 1 and w.count == 0


def test_min_emitting_count_consistent_with_division():
    for cap in range(2, 60):
        for frac in (0.1, 0.3, 1 / 3, 0.5, 0.7, 0.75, 0.9, 1.0):
            k = au.min_emitting_count(cap, frac)
            assert all((j / cap > frac) == (j >= k) for j in range(cap + 1))


@pytest.mark.parametrize("cap,span,frac", [(3, 300, 0.5), (4, 400, 0.25), (5, 500, 0.6)])
def test_push_path_equals_oracle_exhaustive_small(cap, span, frac):
    for n in range(1, 11):
        for flags in itertools.product((False, True), repeat=n):
            times = [i * 100 for i in range(n)]
            s = DetectorState(SlidingVote(cap, span), frac)
            got = []
            for i, f in enumerate(flags):
                s.window.push(times[i], f)
                cand, s = au.window_vote(s)
                if cand is not None:
                    got.append(i)
            assert got == brute_force_votes(times, flags, cap, span, frac)


def test_feed_equals_push_and_resumes_state():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(1, 600))
        times = np.cumsum(rng.choice([50, 100, 250], n)).tolist()
        flags = (rng.random(n) < 0.6).tolist()
        w1 = SlidingVote(12, 1200)
        got_push = []
        for i, (t, f) in enumerate(zip(times, flags)):
            w1.push(t, f)
            if w1.count / w1.capacity > 0.5:
                got_push.append(i)
                w1.clear()
        # split the batch in two to exercise carried-over ring state
        w2 = SlidingVote(12, 1200)
        cut = n // 2
        got_feed = w2.feed(times[:cut], flags[:cut], 0.5)
        got_feed += [cut + i for i in w2.feed(times[cut:], flags[cut:], 0.5)]
        assert got_feed == got_push
        assert list(w2._t) == list(w1._t) and w2.count == w1.count


def test_feed_rejects_time_regression():
    with pytest.raises(MalformedEventError):
        SlidingVote(4, 400).feed([0, 100, 50], [True, True, True], 0.5)


def test_adapt_examples():
    s = DetectorState.initial(CFG)
    s1 = au.adapt_after_verification(s, False, 0, CFG)
    assert s1.vote_fraction_now == 0.75
    s2 = au.adapt_after_verification(s1, False, 0, CFG)
    assert s2.vote_fraction_now == 0.9
    assert au.adapt_after_verification(s, True, 0, CFG) is s


def test_decay_examples():
    s = au.adapt_after_verification(DetectorState.initial(CFG), False, 0, CFG)
    assert au.decay_threshold(s, 30000, CFG).vote_fraction_now == 0.625
    assert au.decay_threshold(s, 60000, CFG).vote_fraction_now == 0.5
    assert au.decay_threshold(s, 90000, CFG).vote_fraction_now == 0.5
    fresh = DetectorState.initial(CFG)
    assert au.decay_threshold(fresh, 12345, CFG) is fresh


ops = st.lists(
    st.tuples(st.sampled_from(["boost", "confirm", "decay"]), st.integers(0, 30000)), max_size=40
)


@settings(max_examples=200, deadline=None)
@given(ops, st.floats(0.05, 0.9), st.floats(0.0, 0.6))
def test_vote_fraction_stays_within_base_and_cap(seq, base, delta):
    cfg = DetectorConfig(vote_fraction_base=base, boost_cap=max(base, 0.9), boost_delta=delta)
    s = DetectorState.initial(cfg)
    now = 0
    for op, dt in seq:
        now += dt
        if op == "boost":
            s = au.adapt_after_verification(s, False, now, cfg)
        elif op == "confirm":
            s = au.adapt_after_verification(s, True, now, cfg)
        else:
            s = au.decay_threshold(s, now, cfg)
        assert cfg.vote_fraction_base <= s.vote_fraction_now <= cfg.boost_cap


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=40), st.floats(0.05, 1.0), st.floats(0.0, 1.0))
def test_sensitivity_monotone_in_fraction(flags, f_hi, shrink):
    f_lo = f_hi * shrink
    s = _window_with(flags)
    emits_hi = au.window_vote(DetectorState(s.window, f_hi))[0] is not None
    emits_lo = au.window_vote(DetectorState(s.window, f_lo))[0] is not None
    assert not emits_hi or emits_lo


def test_flag_trace_csv():
    text = au.flag_trace_csv([(au.FrameFlag(100, True, 0.75), 0.5)])
    assert text == "t,score,flagged,vote_fraction\n100,0.75,1,0.5\n"
