"""Closed-loop scenario runs and detection metrics.

The synthetic human reacts to errors as they actually occur on the
(possibly paused) robot timeline and answers the engine's questions, so
human events and engine commands depend on each other. Everything runs
on a logical millisecond clock; a (scenario, config, seed) triple fully
determines the trace.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
import random
import statistics
import zlib
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .events import (
    AuFrame,
    Command,
    CommandKind,
    DetectionEvent,
    Method,
    Utterance,
    dumps,
    from_record,
    to_record,
)
from .intent import TaskLexicon, load_lexicon
from .orchestrator import Engine, EngineConfig, EngineState, Mode, Phase
from .robot_sim import INF, RobotSim
from .scenario import InjectedError, ResponsePolicy, Scenario, sample_latency

MATCH_HORIZON_MILLIS = 30000
# hard stop for runs that never settle (e.g. a Stop command)
MAX_EXTRA_MILLIS = 600000

# heap priorities; status before AU before speech at the same instant
_P_WATCH, _P_STATUS, _P_AU, _P_SPEECH = -1, 0, 1, 2


@dataclass
class _Burst:
    start: int
    end: int
    magnitude: float


class SyntheticHuman:
    """Scripted participant: AU bursts, reactive speech, reports, answers."""

    def __init__(self, scenario: Scenario, seed: int):
        self.sc = scenario
        self.model = scenario.human
        self.seed = seed
        self.bursts: list[_Burst] = []
        self.occurred: dict[str, int] = {}
        self.resolved: set[str] = set()
        self._jitter = np.random.default_rng(zlib.crc32(f"{seed}:jitter".encode()))
        self._noise = random.Random(f"{seed}:noise")
        self._answers = random.Random(f"{seed}:answers")
        noise = scenario.noise
        self._next_noise_burst = self._draw_gap(noise.spontaneous_au_burst_rate)
        self._aus = list(self.model.aus)
        self._base = np.array([self.model.baseline[a] for a in self._aus], dtype=float)

    def _draw_gap(self, per_minute: float) -> float:
        if per_minute <= 0:
            return INF
        return self._noise.expovariate(per_minute / 60000.0)

    # -- error reactions --------------------------------------------------

    def on_error(self, err: InjectedError, t: int) -> list[tuple[int, str, str]]:
        """Register an error occurrence; returns scheduled (t, channel, text)."""
        self.occurred[err.error_id] = t
        if not self.model.perceives(err.error_id):
            return []
        rng = random.Random(f"{self.seed}:error:{err.error_id}")
        r = err.reactions
        out = []
        onset = t + sample_latency(r.au_reaction.latency_millis, rng)
        if r.au_reaction.magnitude > 0 and r.au_reaction.duration_millis > 0:
            self.bursts.append(_Burst(onset, onset + r.au_reaction.duration_millis, r.au_reaction.magnitude))
        sp = r.speech_reaction
        lat = sample_latency(sp.latency_millis, rng)
        if rng.random() < sp.probability:
            out.append((t + lat, "reaction", sp.text))
        ex = r.explicit_report
        lat = sample_latency(ex.latency_millis, rng)
        if rng.random() < ex.probability:
            out.append((t + lat, f"report:{err.error_id}", ex.text))
        return out

    def unresolved_perceived(self, now: int) -> list[str]:
        return [
            e for e, t in self.occurred.items()
            if t <= now and e not in self.resolved and self.model.perceives(e)
        ]

    def answer(self, t: int) -> tuple[int, str] | None:
        """Response to a query asked at ``t`` per the answering policy."""
        policy = self.model.query_response_policy
        qr = self.model.query_response
        if policy is ResponsePolicy.SILENT:
            return None
        lat = sample_latency(qr.latency_millis, self._answers)
        if policy is ResponsePolicy.TRUTHFUL and self.unresolved_perceived(t):
            return t + lat, qr.negative_text
        return t + lat, qr.affirmative_text

    # -- AU stream -----------------------------------------------------------

    def frame(self, t: int) -> AuFrame:
        noise = self.sc.noise
        while self._next_noise_burst <= t:
            start = math.ceil(self._next_noise_burst)
            self.bursts.append(_Burst(start, start + noise.burst_duration_millis, noise.burst_magnitude))
            self._next_noise_burst += self._draw_gap(noise.spontaneous_au_burst_rate)
        delta = 0.0
        for b in self.bursts:
            if b.start <= t < b.end:
                delta += b.magnitude
        if len(self.bursts) > 32:
            self.bursts = [b for b in self.bursts if b.end > t]
        v = self._base + delta
        sd = noise.frame_jitter
        if sd > 0:
            v = v + self._jitter.normal(0.0, sd, v.shape[0])
        vals = dict(zip(self._aus, np.clip(v, 0.0, 5.0).tolist()))
        return AuFrame(t, vals)

    def next_distractor(self, after: float) -> tuple[float, str] | None:
        noise = self.sc.noise
        if noise.distractor_utterance_rate <= 0 or not noise.distractor_texts:
            return None
        gap = self._draw_gap(noise.distractor_utterance_rate)
        return after + gap, self._noise.choice(noise.distractor_texts)


def synthesize_human_events(
    scenario: Scenario,
    query_times: Sequence[int] = (),
    error_times: Mapping[str, int] | None = None,
    until: int | None = None,
    seed: int | None = None,
) -> tuple[list[AuFrame], list[Utterance]]:
    """Open-loop human streams for given error occurrence and query times.

    ``error_times`` defaults to each anchor action's scripted start (no
    pauses). Explicit reports are not suppressed here since nothing is
    ever resolved open-loop.
    """
    seed = scenario.seed if seed is None else seed
    human = SyntheticHuman(scenario, seed)
    script = scenario.script
    if error_times is None:
        error_times = {e.error_id: script.by_id[e.action_id].start for e in scenario.injected_errors}
    utts: list[tuple[int, int, str]] = []
    seq = 0
    for e in scenario.injected_errors:
        if e.error_id in error_times:
            for t, _, text in human.on_error(e, error_times[e.error_id]):
                utts.append((t, seq, text))
                seq += 1
    for q in sorted(query_times):
        ans = human.answer(q)
        if ans:
            utts.append((ans[0], seq, ans[1]))
            seq += 1
    end = until if until is not None else script.end + scenario.tail_millis
    nxt = human.next_distractor(0)
    while nxt is not None and nxt[0] <= end:
        utts.append((math.ceil(nxt[0]), seq, nxt[1]))
        seq += 1
        nxt = human.next_distractor(nxt[0])
    period = _period(scenario.human.au_rate_hz)
    frames = [human.frame(t) for t in range(0, end + 1, period)]
    utts.sort()
    return frames, [Utterance(t, text) for t, _, text in utts]


def _period(rate_hz: float) -> int:
    return max(1, round(1000 / rate_hz))


# --- metrics -------------------------------------------------------------------


@dataclass
class ErrorOutcome:
    error_id: str
    kind: str
    perceived: bool
    occurred_at: int | None
    detected: bool = False
    method: str | None = None
    delay_s: float | None = None
    delay_confirmed_s: float | None = None


@dataclass
class RunMetrics:
    per_error: list[ErrorOutcome]
    mean_delay_s: float | None
    mean_delay_confirmed_s: float | None
    percent_detected: float | None
    implicit_share: float
    implicit_au_share: float
    implicit_speech_share: float
    false_positive_queries: int
    query_count: int
    unmatched_detections: int
    boosts: int

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["aggregates"] = {k: d.pop(k) for k in list(d) if k != "per_error"}
        return d


def compute_metrics(records: Iterable[Mapping[str, Any]]) -> RunMetrics:
    """Metrics from trace records (error, detection, query, engine notes)."""
    outcomes: dict[str, ErrorOutcome] = {}
    detections = []
    queries = fps = boosts = 0
    for r in records:
        k = r["kind"]
        if k == "error_def":
            outcomes[r["error_id"]] = ErrorOutcome(r["error_id"], r["error_kind"], r["perceived"], None)
        elif k == "error":
            outcomes[r["error_id"]].occurred_at = r["t"]
        elif k == "detection":
            detections.append(r)
        elif k == "query":
            queries += 1
            fps += bool(r.get("false_positive"))
        elif k == "engine" and r.get("event") == "boost":
            boosts += 1
    unmatched = 0
    for d in detections:
        eid = d.get("matched_error_id")
        if eid is None:
            unmatched += 1
            continue
        o = outcomes[eid]
        o.detected = True
        o.method = d["method"]
        o.delay_s = (d["t_signal"] - o.occurred_at) / 1000
        o.delay_confirmed_s = (d["t"] - o.occurred_at) / 1000
    perceived = [o for o in outcomes.values() if o.perceived and o.occurred_at is not None]
    hit = [o for o in perceived if o.detected]
    implicit = [o for o in hit if o.method != Method.EXPLICIT.value]
    n_au = sum(o.method == Method.IMPLICIT_AU.value for o in implicit)

    def pct(a, b):
        return 100.0 * a / b if b else 0.0

    return RunMetrics(
        per_error=list(outcomes.values()),
        mean_delay_s=statistics.fmean(o.delay_s for o in hit) if hit else None,
        mean_delay_confirmed_s=statistics.fmean(o.delay_confirmed_s for o in hit) if hit else None,
        percent_detected=pct(len(hit), len(perceived)) if perceived else None,
        implicit_share=pct(len(implicit), len(hit)),
        implicit_au_share=pct(n_au, len(implicit)),
        implicit_speech_share=pct(len(implicit) - n_au, len(implicit)),
        false_positive_queries=fps,
        query_count=queries,
        unmatched_detections=unmatched,
        boosts=boosts,
    )


def match_detection(t_signal: int, occurred: Mapping[str, int], matched: set[str]) -> str | None:
    """Nearest prior unmatched error within the matching horizon."""
    best = None
    for eid, t in occurred.items():
        if eid in matched or t > t_signal or t < t_signal - MATCH_HORIZON_MILLIS:
            continue
        if best is None or t > occurred[best]:
            best = eid
    return best


# --- closed-loop run -----------------------------------------------------------


@dataclass
class RunResult:
    scenario: str
    config: str
    seed: int
    metrics: RunMetrics
    trace: list[dict[str, Any]]
    final_state: EngineState

    def trace_ndjson(self) -> str:
        return "".join(dumps(r) + "\n" for r in self.trace)

    def csv_rows(self) -> list[dict[str, Any]]:
        return [
            {
                "scenario": self.scenario,
                "config": self.config,
                "error_id": o.error_id,
                "kind": o.kind,
                "detected": o.detected,
                "method": o.method or "",
                "delay_s": "" if o.delay_s is None else f"{o.delay_s:.3f}",
            }
            for o in self.metrics.per_error
        ]


CSV_FIELDS = ["scenario", "config", "error_id", "kind", "detected", "method", "delay_s"]


def rows_to_csv(rows: Iterable[Mapping[str, Any]], fields: Sequence[str] = CSV_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in fields})
    return buf.getvalue()


QueryResponder = Callable[[int, str], "str | None"]


def run_scenario(
    scenario: Scenario,
    config: EngineConfig,
    seed: int | None = None,
    lexicon: TaskLexicon | None = None,
    responder: QueryResponder | None = None,
    check_invariants: bool = True,
) -> RunResult:
    """Simulate one interaction end to end.

    ``responder`` (query time, query text) -> reply text replaces the
    human model's answering policy, e.g. for interactive demos.
    """
    seed = scenario.seed if seed is None else seed
    lexicon = lexicon or load_lexicon(scenario.task_name, scenario.lexicon_path)
    engine = Engine(config, lexicon)
    robot = RobotSim(scenario.script, scenario.recovery_millis)
    human = SyntheticHuman(scenario, seed)
    errors = {e.error_id: e for e in scenario.injected_errors}
    pending_errors = dict(errors)

    trace: list[dict[str, Any]] = [
        {
            "t": 0,
            "kind": "run",
            "schema": 1,
            "scenario": scenario.task_name,
            "seed": seed,
            "config": config.to_dict(),
            "lexicon": lexicon.task_name,
        }
    ]
    for e in scenario.injected_errors:
        trace.append({"t": 0, "kind": "error_def", "error_id": e.error_id, "error_kind": e.kind.value,
                      "perceived": scenario.human.perceives(e.error_id)})

    heap: list[tuple] = []
    seq = 0

    def push(t: int, prio: int, item) -> None:
        nonlocal seq
        heapq.heappush(heap, (t, prio, seq, item))
        seq += 1

    watch_version = 0

    def rewatch(now: int) -> None:
        # schedule a check at each pending error's predicted wall occurrence
        nonlocal watch_version
        watch_version += 1
        for eid, e in pending_errors.items():
            w = robot.wall_time_of(robot.script.by_id[e.action_id].start)
            if w != INF:
                push(max(now, math.ceil(w)), _P_WATCH, ("watch", eid, watch_version))

    status_period = _period(scenario.status_rate_hz)
    au_period = _period(scenario.human.au_rate_hz)
    push(0, _P_STATUS, ("status_tick",))
    push(0, _P_AU, ("au_tick",))
    d = human.next_distractor(0)
    if d is not None:
        push(math.ceil(d[0]), _P_SPEECH, ("distractor", d[0], d[1]))
    rewatch(0)

    matched: set[str] = set()
    hard_stop = scenario.script.end + scenario.tail_millis + MAX_EXTRA_MILLIS

    def end_time() -> float:
        return robot.wall_time_of(scenario.script.end) + scenario.tail_millis

    def feed(payload) -> None:
        trace.append(to_record(payload))
        out = engine.feed(payload)
        trace.extend(out.log)
        for cmd in out.commands:
            robot.apply_command(cmd)
            trace.append(to_record(cmd))
            if cmd.kind is CommandKind.SAY and cmd.role == "query":
                _on_query(cmd)
            if cmd.kind is CommandKind.RECOVER:
                push(robot.recovery_done_at, _P_STATUS, ("recovery_done", robot.recovery_done_at))
        if out.commands:
            rewatch(payload.t)
        if out.detection is not None:
            det = out.detection
            eid = match_detection(det.t_signal, human.occurred, matched)
            if eid is not None:
                matched.add(eid)
                human.resolved.add(eid)
            det = DetectionEvent(det.t_detected, det.method, det.t_signal, det.verified, eid)
            trace.append(to_record(det))

    def _on_query(cmd: Command) -> None:
        t = cmd.t
        live = [
            e for e, te in human.occurred.items()
            if e not in matched and t - MATCH_HORIZON_MILLIS <= te <= t
        ]
        trace.append({"t": t, "kind": "query", "text": cmd.text, "false_positive": not live})
        if responder is not None:
            text = responder(t, cmd.text)
            if text:
                push(t + sample_latency(scenario.human.query_response.latency_millis, human._answers),
                     _P_SPEECH, ("say", text))
            return
        ans = human.answer(t)
        if ans is not None:
            push(ans[0], _P_SPEECH, ("say", ans[1]))

    while heap:
        t, prio, _, item = heapq.heappop(heap)
        if t > hard_stop:
            break
        tag = item[0]
        if tag == "status_tick":
            if t > end_time() and engine.state.phase is Phase.MONITORING:
                break
            feed(robot.status(t))
            push(t + status_period, _P_STATUS, item)
        elif tag == "au_tick":
            feed(human.frame(t))
            push(t + au_period, _P_AU, item)
        elif tag == "watch":
            _, eid, version = item
            if version != watch_version or eid not in pending_errors:
                continue
            e = pending_errors[eid]
            start = robot.script.by_id[e.action_id].start
            if robot.ledger.script_time(t) < start:
                continue
            del pending_errors[eid]
            trace.append({"t": t, "kind": "error", "error_id": eid, "error_kind": e.kind.value})
            for when, channel, text in human.on_error(e, t):
                push(max(when, t), _P_SPEECH, ("human", channel, text))
        elif tag == "recovery_done":
            st = robot.recovery_complete_status(t)
            if st is not None:
                feed(st)
        elif tag == "human":
            _, channel, text = item
            if channel.startswith("report:") and channel[7:] in human.resolved:
                trace.append({"t": t, "kind": "suppressed_report", "error_id": channel[7:]})
                continue
            feed(Utterance(t, text))
        elif tag == "say":
            feed(Utterance(t, item[1]))
        elif tag == "distractor":
            feed(Utterance(t, item[2]))
            nxt = human.next_distractor(item[1])
            if nxt is not None:
                push(math.ceil(nxt[0]), _P_SPEECH, ("distractor", nxt[0], nxt[1]))

    if check_invariants:
        check_trace_invariants(trace, config)
    return RunResult(scenario.task_name, config.label, seed, compute_metrics(trace), trace, engine.state)


# --- invariants ------------------------------------------------------------------


class TraceInvariantError(AssertionError):
    pass


def check_trace_invariants(trace: Sequence[Mapping[str, Any]], config: EngineConfig) -> None:
    """Orchestrator safety properties over a recorded command/detection trace."""
    paused = False
    last_negative_response = None
    prev = None
    matched = set()
    reactive = config.mode is Mode.REACTIVE
    for r in trace:
        k = r["kind"]
        if k == "command":
            c = r["command"]
            if c == "pause":
                if paused:
                    raise TraceInvariantError(f"second pause while paused at t={r['t']}")
                paused = True
            elif c == "resume":
                paused = False
            elif c == "say" and r.get("role") == "query":
                if reactive:
                    raise TraceInvariantError("query issued in reactive mode")
                if not (prev and prev["kind"] == "command" and prev["command"] == "pause" and prev["t"] == r["t"]):
                    raise TraceInvariantError(f"query at t={r['t']} not immediately preceded by a pause")
        elif k == "engine" and r.get("event") == "verified":
            last_negative_response = r["t"]
        elif k == "detection":
            if r["t_signal"] > r["t"]:
                raise TraceInvariantError(f"signal after detection at t={r['t']}")
            if r["method"] != Method.EXPLICIT.value:
                if reactive:
                    raise TraceInvariantError("implicit detection in reactive mode")
                if last_negative_response != r["t"]:
                    raise TraceInvariantError(f"unverified implicit detection at t={r['t']}")
            eid = r.get("matched_error_id")
            if eid is not None:
                if eid in matched:
                    raise TraceInvariantError(f"error {eid} matched twice")
                matched.add(eid)
        if k not in ("engine",):
            prev = r


# --- replay -------------------------------------------------------------------------


class ReplayMismatch(AssertionError):
    pass


INPUT_KINDS = ("status", "au", "utterance")


def replay_trace(records: Sequence[Mapping[str, Any]], lexicon: TaskLexicon | None = None) -> RunMetrics:
    """Re-run the engine over the recorded inputs and recompute metrics.

    Raises ReplayMismatch if the re-derived commands or detections differ
    from the recorded ones.
    """
    header = records[0]
    if header.get("kind") != "run":
        raise ValueError("trace does not start with a run header")
    config = EngineConfig.from_dict(header["config"])
    lexicon = lexicon or load_lexicon(header["lexicon"])
    engine = Engine(config, lexicon)
    recorded = [(r["t"], r["command"]) for r in records if r["kind"] == "command"]
    recorded_det = [(r["t"], r["method"], r["t_signal"]) for r in records if r["kind"] == "detection"]
    cmds, dets = [], []
    for r in records:
        if r["kind"] in INPUT_KINDS:
            out = engine.feed(from_record(r))
            cmds.extend((c.t, c.kind.value) for c in out.commands)
            if out.detection:
                d = out.detection
                dets.append((d.t_detected, d.method.value, d.t_signal))
    if cmds != recorded:
        raise ReplayMismatch("replayed commands differ from the trace")
    if dets != recorded_det:
        raise ReplayMismatch("replayed detections differ from the trace")
    return compute_metrics(records)


# --- comparisons ------------------------------------------------------------------


@dataclass
class Comparison:
    scenario: str
    runs: list[RunResult]
    baseline: str
    deltas: list[dict[str, Any]] = field(default_factory=list)

    def summary_rows(self) -> list[dict[str, Any]]:
        rows = []
        for r in self.runs:
            m = r.metrics
            rows.append({"scenario": self.scenario, "config": r.config, "seed": r.seed,
                         "mean_delay_s": m.mean_delay_s, "percent_detected": m.percent_detected,
                         "implicit_share": m.implicit_share, "false_positive_queries": m.false_positive_queries,
                         "query_count": m.query_count})
        return rows


def _diff(a, b):
    return None if a is None or b is None else a - b


def compare_configs(
    scenario: Scenario, configs: Sequence[EngineConfig], seed: int | None = None, baseline: int = -1
) -> Comparison:
    """Run every config on the same scenario; deltas are config minus baseline."""
    if len(configs) < 2:
        raise ValueError("need at least two configs to compare")
    runs = [run_scenario(scenario, c, seed) for c in configs]
    base = runs[baseline]
    deltas = [
        {
            "config": r.config,
            "baseline": base.config,
            "delta_mean_delay_s": _diff(r.metrics.mean_delay_s, base.metrics.mean_delay_s),
            "delta_percent_detected": _diff(r.metrics.percent_detected, base.metrics.percent_detected),
        }
        for r in runs
    ]
    return Comparison(scenario.task_name, runs, base.config, deltas)


SWEEP_FIELDS = ["scenario", "config", "seed", "mean_delay_s", "percent_detected", "implicit_share",
                "false_positive_queries", "query_count"]


def seed_sweep(scenario: Scenario, configs: Sequence[EngineConfig], seeds: Iterable[int]) -> list[dict[str, Any]]:
    """One summary row per (seed, config)."""
    rows = []
    for s in seeds:
        for c in configs:
            r = run_scenario(scenario, c, s)
            m = r.metrics
            rows.append({"scenario": scenario.task_name, "config": r.config, "seed": s,
                         "mean_delay_s": m.mean_delay_s, "percent_detected": m.percent_detected,
                         "implicit_share": m.implicit_share, "false_positive_queries": m.false_positive_queries,
                         "query_count": m.query_count})
    return rows


def aggregate_rows(rows: Sequence[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """Per-config means over sweep rows (None values skipped)."""
    out = []
    for cfg in dict.fromkeys(r["config"] for r in rows):
        sel = [r for r in rows if r["config"] == cfg]
        agg = {"scenario": sel[0]["scenario"], "config": cfg, "seed": "mean"}
        for k in SWEEP_FIELDS[3:]:
            vals = [r[k] for r in sel if r[k] is not None]
            agg[k] = statistics.fmean(vals) if vals else None
        out.append(agg)
    return out
