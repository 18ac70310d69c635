"""Detection engine: context gate, detect-then-verify state machine,
explicit reports and mitigation commands.

``step`` is a pure transition ``(event, state) -> Step``; the caller owns
the loop and feeds events in merged time order.
"""

from __future__ import annotations

import dataclasses
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import au_detector as au
from .au_detector import AuCandidate, DetectorConfig, DetectorState, FrameClassifier
from .events import (
    AuFrame,
    Command,
    CommandKind,
    DetectionEvent,
    MalformedEventError,
    Method,
    RobotStatus,
    Speaker,
    Tick,
    Utterance,
)
from .intent import Category, IntentBackend, Polarity, RuleBasedBackend, TaskLexicon

GATE_MILLIS = 3000
APOLOGY = "I'm sorry, let me fix that."
FORBIDDEN_QUERY_TOKENS = ("error", "mistake", "wrong", "fail", "failure")


class Mode(str, Enum):
    PROACTIVE = "proactive"
    REACTIVE = "reactive"


class Modality(str, Enum):
    AU = "au"
    SPEECH = "speech"


class Phase(str, Enum):
    MONITORING = "monitoring"
    AWAITING_VERIFICATION = "awaiting_verification"
    RECOVERING = "recovering"


class Gate(str, Enum):
    PASS = "pass"
    IGNORE = "ignore"


@dataclass(frozen=True)
class PotentialError:
    t_signal: int
    modality: Modality
    context: RobotStatus | None

    @property
    def method(self) -> Method:
        return Method.IMPLICIT_AU if self.modality is Modality.AU else Method.IMPLICIT_SPEECH


def context_gate(p: PotentialError) -> Gate:
    """Pass if the robot was moving at the signal or within the last 3 s.

    A status older than the signal is aged forward to the signal time.
    Gripper state travels with the candidate but never vetoes it.
    """
    c = p.context
    if c is None:
        return Gate.IGNORE
    if c.moving:
        return Gate.PASS
    since = c.millis_since_last_movement + max(0, p.t_signal - c.t)
    return Gate.PASS if since <= GATE_MILLIS else Gate.IGNORE


# --- queries ----------------------------------------------------------------


def check_query_pool(pool: Sequence[str]) -> list[str]:
    pool = [q.strip() for q in pool if q.strip()]
    if not pool:
        raise ValueError("query pool is empty")
    for q in pool:
        low = q.lower()
        bad = [tok for tok in FORBIDDEN_QUERY_TOKENS if tok in low]
        if bad:
            raise ValueError(f"query template {q!r} contains forbidden token(s) {bad}")
    return pool


def load_query_pool(path: str | Path | None = None) -> list[str]:
    if path is None:
        text = (resources.files("erraware.data") / "queries" / "pool.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text)
    return check_query_pool(data["templates"] if isinstance(data, dict) else data)


DEFAULT_QUERY_POOL = load_query_pool()


def generate_query(seed: int, history: Sequence[str], pool: Sequence[str] = DEFAULT_QUERY_POOL) -> str:
    """Yes/no check-in question; never repeats the previous one when the pool allows."""
    rng = random.Random(f"query:{seed}:{len(history)}")
    prev = history[-1] if history else None
    choices = [q for q in pool if q != prev] or list(pool)
    return rng.choice(choices)


# --- engine -------------------------------------------------------------------


@dataclass(frozen=True)
class EngineConfig:
    mode: Mode = Mode.PROACTIVE
    verification_timeout_ms: int = 10000
    query_pool_path: str | None = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.verification_timeout_ms <= 0:
            raise ValueError("verification_timeout_ms must be positive")

    @property
    def label(self) -> str:
        return self.name or self.mode.value

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EngineConfig":
        known = {"mode", "verification_timeout_ms", "query_pool_path", "detector", "seed", "name"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown engine config keys: {sorted(unknown)}")
        return cls(
            mode=Mode(d.get("mode", "proactive")),
            verification_timeout_ms=int(d.get("verification_timeout_ms", 10000)),
            query_pool_path=d.get("query_pool_path"),
            detector=DetectorConfig.from_dict(d.get("detector", {})),
            seed=int(d.get("seed", 0)),
            name=d.get("name"),
        )

    @classmethod
    def load(cls, path) -> "EngineConfig":
        path = Path(path)
        d = json.loads(path.read_text(encoding="utf-8"))
        cfg = cls.from_dict(d)
        if cfg.query_pool_path and not Path(cfg.query_pool_path).is_absolute():
            cfg = dataclasses.replace(cfg, query_pool_path=str(path.parent / cfg.query_pool_path))
        if cfg.name is None:
            cfg = dataclasses.replace(cfg, name=path.stem)
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "mode": self.mode.value,
            "verification_timeout_ms": self.verification_timeout_ms,
            "query_pool_path": self.query_pool_path,
            "detector": self.detector.to_dict(),
            "seed": self.seed,
        }


@dataclass(frozen=True)
class EngineContext:
    """Everything ``step`` reads but never changes."""

    config: EngineConfig
    backend: IntentBackend
    query_pool: tuple[str, ...] = tuple(DEFAULT_QUERY_POOL)
    scorer: FrameClassifier = au.REFERENCE_SCORER

    @classmethod
    def build(cls, config: EngineConfig, lexicon: TaskLexicon, backend: IntentBackend | None = None) -> "EngineContext":
        pool = load_query_pool(config.query_pool_path) if config.query_pool_path else DEFAULT_QUERY_POOL
        return cls(config, backend or RuleBasedBackend(lexicon), tuple(pool))


@dataclass(frozen=True)
class EngineState:
    mode: Mode
    detector: DetectorState
    phase: Phase = Phase.MONITORING
    potential: PotentialError | None = None
    query_sent_at: int | None = None
    recovering_since: int | None = None
    paused: bool = False
    status: RobotStatus | None = None
    query_history: tuple[str, ...] = ()
    now: int = 0

    @classmethod
    def initial(cls, config: EngineConfig) -> "EngineState":
        return cls(config.mode, DetectorState.initial(config.detector))


@dataclass(frozen=True)
class Step:
    state: EngineState
    commands: tuple[Command, ...] = ()
    detection: DetectionEvent | None = None
    # diagnostic notes: gate decisions, drops, boosts, phase changes
    log: tuple[dict[str, Any], ...] = ()


def _evolve(state: EngineState, **kw) -> EngineState:
    # dataclasses.replace re-runs __init__; this hot path only swaps fields
    new = object.__new__(EngineState)
    new.__dict__.update(state.__dict__)
    new.__dict__.update(kw)
    return new


class _Tx:
    """Scratch accumulator for one transition."""

    def __init__(self, state: EngineState, t: int):
        self.state = state
        self.t = t
        self.commands: list[Command] = []
        self.detection: DetectionEvent | None = None
        self.log: list[dict[str, Any]] = []

    def set(self, **kw) -> None:
        self.state = _evolve(self.state, **kw)

    def cmd(self, kind: CommandKind, text: str | None = None, role: str | None = None) -> None:
        self.commands.append(Command(kind, self.t, text, role))

    def note(self, what: str, **kw) -> None:
        self.log.append({"t": self.t, "kind": "engine", "event": what, **kw})

    def enter(self, phase: Phase, **kw) -> None:
        if phase is not self.state.phase:
            self.note("phase", phase=phase.value)
        self.set(phase=phase, **kw)

    def done(self) -> Step:
        return Step(self.state, tuple(self.commands), self.detection, tuple(self.log))


def step(event: Any, state: EngineState, ctx: EngineContext) -> Step:
    """Advance the engine by one input event.

    Accepted inputs: RobotStatus, AuFrame, Utterance, AuCandidate (from an
    external frame pipeline) and Tick. Anything else is rejected.
    """
    if not isinstance(event, (RobotStatus, AuFrame, Utterance, AuCandidate, Tick)):
        raise MalformedEventError(f"engine cannot consume {type(event).__name__} events")
    t = event.t
    if t < state.now:
        raise MalformedEventError(f"event at t={t} arrives after t={state.now}")
    tx = _Tx(_evolve(state, now=t), t)
    cfg = ctx.config

    s = tx.state
    if s.phase is Phase.AWAITING_VERIFICATION and t > s.query_sent_at + cfg.verification_timeout_ms:
        tx.note("verification_timeout")
        tx.cmd(CommandKind.RESUME)
        tx.enter(Phase.MONITORING, potential=None, query_sent_at=None, paused=False)

    if isinstance(event, RobotStatus):
        event.validate()
        tx.set(status=event)
        if event.recovery_complete and tx.state.phase is Phase.RECOVERING:
            tx.cmd(CommandKind.RESUME)
            tx.enter(Phase.MONITORING, recovering_since=None, paused=False)
    elif isinstance(event, AuFrame):
        if tx.state.mode is Mode.PROACTIVE:
            event.validate()
            det = au.decay_threshold(tx.state.detector, t, cfg.detector)
            _, det = au.score_frame(event, det, cfg.detector, ctx.scorer)
            cand, det = au.window_vote(det)
            tx.set(detector=det)
            if cand is not None:
                _on_candidate(tx, ctx, Modality.AU, cand.t)
    elif isinstance(event, AuCandidate):
        _on_candidate(tx, ctx, Modality.AU, t)
    elif isinstance(event, Utterance):
        event.validate()
        if event.speaker is Speaker.HUMAN:
            _on_utterance(tx, ctx, event)
    return tx.done()


def _on_candidate(tx: _Tx, ctx: EngineContext, modality: Modality, t_signal: int) -> None:
    s = tx.state
    if s.mode is Mode.REACTIVE:
        return
    if s.phase is not Phase.MONITORING:
        tx.note("candidate_dropped", modality=modality.value, phase=s.phase.value)
        return
    p = PotentialError(t_signal, modality, s.status)
    decision = context_gate(p)
    tx.note(
        "gate",
        modality=modality.value,
        decision=decision.value,
        gripper=None if p.context is None else p.context.gripper.value,
    )
    if decision is Gate.IGNORE:
        return
    query = generate_query(ctx.config.seed, s.query_history, ctx.query_pool)
    tx.cmd(CommandKind.PAUSE)
    tx.cmd(CommandKind.SAY, query, "query")
    tx.enter(
        Phase.AWAITING_VERIFICATION,
        potential=p,
        query_sent_at=tx.t,
        paused=True,
        query_history=s.query_history + (query,),
    )


def _on_utterance(tx: _Tx, ctx: EngineContext, u: Utterance) -> None:
    s = tx.state
    pending = s.phase is Phase.AWAITING_VERIFICATION
    intent = ctx.backend.classify(u, pending)
    cat = intent.category

    if cat is Category.QUERY_RESPONSE and pending:
        if intent.polarity is Polarity.NEGATIVE:
            p = s.potential
            tx.detection = DetectionEvent(tx.t, p.method, p.t_signal, verified=True)
            tx.note("verified", modality=p.modality.value, supplemental=intent.supplemental)
            _mitigate(tx)
        elif intent.polarity is Polarity.AFFIRMATIVE:
            det = au.adapt_after_verification(s.detector, False, tx.t, ctx.config.detector)
            tx.note("boost", vote_fraction=det.vote_fraction_now)
            tx.cmd(CommandKind.RESUME)
            tx.enter(Phase.MONITORING, detector=det, potential=None, query_sent_at=None, paused=False)
        return

    if cat is Category.EXPLICIT_ERROR_REPORT:
        tx.detection = DetectionEvent(tx.t, Method.EXPLICIT, tx.t, verified=True)
        tx.note("explicit_report", description=intent.description)
        _mitigate(tx)
    elif cat is Category.IMPLICIT_ERROR_REACTION:
        _on_candidate(tx, ctx, Modality.SPEECH, tx.t)
    elif cat is Category.ACTION_REQUEST:
        tx.note("action_request", action=intent.action, params=dict(intent.params))


def _mitigate(tx: _Tx) -> None:
    if not tx.state.paused:
        tx.cmd(CommandKind.PAUSE)
    tx.cmd(CommandKind.SAY, APOLOGY, "apology")
    tx.cmd(CommandKind.RECOVER)
    tx.enter(Phase.RECOVERING, potential=None, query_sent_at=None, recovering_since=tx.t, paused=True)


class Engine:
    """Mutable convenience wrapper around ``step`` for live loops."""

    def __init__(self, config: EngineConfig, lexicon: TaskLexicon, backend: IntentBackend | None = None):
        self.ctx = EngineContext.build(config, lexicon, backend)
        self.state = EngineState.initial(config)

    def feed(self, event) -> Step:
        out = step(event, self.state, self.ctx)
        self.state = out.state
        return out
