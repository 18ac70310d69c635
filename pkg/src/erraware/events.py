"""Shared event model, stream merging and NDJSON (de)serialization.

All times are integer milliseconds since scenario start.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Iterator, Mapping, Sequence


class Gripper(str, Enum):
    OPEN = "open"
    CLOSED = "closed"
    HOLDING = "holding"


class Speaker(str, Enum):
    HUMAN = "human"
    ROBOT = "robot"


class CommandKind(str, Enum):
    PAUSE = "pause"
    RESUME = "resume"
    STOP = "stop"
    RECOVER = "recover"
    SAY = "say"


class Method(str, Enum):
    IMPLICIT_AU = "implicit_au"
    IMPLICIT_SPEECH = "implicit_speech"
    EXPLICIT = "explicit"

    @property
    def implicit(self) -> bool:
        return self is not Method.EXPLICIT


class MalformedEventError(ValueError):
    """An event payload violates its type invariants."""


class StreamOrderError(ValueError):
    def __init__(self, stream: int, offset: int, prev_t: int, t: int):
        super().__init__(
            f"stream {stream} regresses at offset {offset}: t={t} after t={prev_t}"
        )
        self.stream = stream
        self.offset = offset


@dataclass(frozen=True)
class AuFrame:
    t: int
    intensities: Mapping[int, float]

    def validate(self) -> None:
        for au, v in self.intensities.items():
            if not (math.isfinite(v) and 0.0 <= v <= 5.0):
                raise MalformedEventError(f"AU{au} intensity {v!r} at t={self.t} outside [0, 5]")


@dataclass(frozen=True)
class Utterance:
    t: int
    text: str
    speaker: Speaker = Speaker.HUMAN

    def validate(self) -> None:
        if not self.text.strip():
            raise MalformedEventError(f"empty utterance at t={self.t}")


@dataclass(frozen=True)
class RobotStatus:
    t: int
    moving: bool
    gripper: Gripper = Gripper.OPEN
    millis_since_last_movement: int = 0
    current_action_id: str | None = None
    # set on the single status published when a Recover behavior finishes
    recovery_complete: bool = False

    def validate(self) -> None:
        if self.millis_since_last_movement < 0:
            raise MalformedEventError(f"negative time since movement at t={self.t}")
        if self.moving and self.millis_since_last_movement != 0:
            raise MalformedEventError(f"moving status with nonzero time since movement at t={self.t}")


@dataclass(frozen=True)
class Command:
    kind: CommandKind
    t: int
    text: str | None = None
    # "query" or "apology" for Say commands
    role: str | None = None


@dataclass(frozen=True)
class QueryExchange:
    t: int
    text: str
    response: str | None = None
    polarity: str | None = None
    t_response: int | None = None


@dataclass(frozen=True)
class DetectionEvent:
    t_detected: int
    method: Method
    t_signal: int
    verified: bool = True
    matched_error_id: str | None = None

    @property
    def t(self) -> int:
        return self.t_detected


@dataclass(frozen=True)
class Tick:
    """Pure clock advance; lets the engine notice timeouts without a signal."""

    t: int


Payload = AuFrame | Utterance | RobotStatus | Command | QueryExchange | DetectionEvent | Tick

# status context must be applied before signals stamped at the same instant
STREAM_PRIORITY: dict[type, int] = {
    RobotStatus: 0,
    AuFrame: 1,
    Utterance: 2,
    Tick: 3,
    Command: 4,
    QueryExchange: 5,
    DetectionEvent: 6,
}

KIND_OF: dict[type, str] = {
    AuFrame: "au",
    Utterance: "utterance",
    RobotStatus: "status",
    Command: "command",
    QueryExchange: "query",
    DetectionEvent: "detection",
    Tick: "tick",
}


@dataclass(frozen=True, order=True)
class EventEnvelope:
    t: int
    priority: int
    payload: Payload = field(compare=False)

    @classmethod
    def wrap(cls, payload: Payload) -> "EventEnvelope":
        return cls(payload.t, STREAM_PRIORITY[type(payload)], payload)

    @property
    def kind(self) -> str:
        return KIND_OF[type(self.payload)]


def _as_envelopes(stream: Iterable[Any], index: int) -> list[EventEnvelope]:
    out = []
    prev = None
    for offset, item in enumerate(stream):
        env = item if isinstance(item, EventEnvelope) else EventEnvelope.wrap(item)
        if env.t < 0:
            raise StreamOrderError(index, offset, 0, env.t)
        if prev is not None and env.t < prev:
            raise StreamOrderError(index, offset, prev, env.t)
        prev = env.t
        out.append(env)
    return out


def merge_streams(streams: Sequence[Iterable[Any]]) -> list[EventEnvelope]:
    """Merge individually time-ordered streams into one totally ordered stream.

    Ties on ``t`` are broken by payload priority (status < AU < utterance),
    then by input stream order, then by position within a stream.
    """
    checked = [_as_envelopes(s, i) for i, s in enumerate(streams)]
    return list(heapq.merge(*checked, key=lambda e: (e.t, e.priority)))


# --- NDJSON ---------------------------------------------------------------


def to_record(payload: Payload) -> dict[str, Any]:
    kind = KIND_OF[type(payload)]
    if isinstance(payload, AuFrame):
        return {"t": payload.t, "kind": kind, "au": {str(k): v for k, v in payload.intensities.items()}}
    if isinstance(payload, Utterance):
        return {"t": payload.t, "kind": kind, "text": payload.text, "speaker": payload.speaker.value}
    if isinstance(payload, RobotStatus):
        rec = {
            "t": payload.t,
            "kind": kind,
            "moving": payload.moving,
            "gripper": payload.gripper.value,
            "millis_since_last_movement": payload.millis_since_last_movement,
            "current_action_id": payload.current_action_id,
        }
        if payload.recovery_complete:
            rec["recovery_complete"] = True
        return rec
    if isinstance(payload, Command):
        rec = {"t": payload.t, "kind": kind, "command": payload.kind.value}
        if payload.text is not None:
            rec["text"] = payload.text
            rec["role"] = payload.role
        return rec
    if isinstance(payload, QueryExchange):
        return {
            "t": payload.t,
            "kind": kind,
            "text": payload.text,
            "response": payload.response,
            "polarity": payload.polarity,
            "t_response": payload.t_response,
        }
    if isinstance(payload, DetectionEvent):
        return {
            "t": payload.t_detected,
            "kind": kind,
            "method": payload.method.value,
            "t_signal": payload.t_signal,
            "verified": payload.verified,
            "matched_error_id": payload.matched_error_id,
        }
    if isinstance(payload, Tick):
        return {"t": payload.t, "kind": kind}
    raise TypeError(f"not an event payload: {payload!r}")


def from_record(rec: Mapping[str, Any]) -> Payload:
    kind = rec.get("kind")
    t = rec.get("t")
    if not isinstance(t, int) or isinstance(t, bool) or t < 0:
        raise MalformedEventError(f"bad timestamp in record: {rec!r}")
    try:
        if kind == "au":
            return AuFrame(t, {int(k): float(v) for k, v in rec["au"].items()})
        if kind == "utterance":
            return Utterance(t, rec["text"], Speaker(rec.get("speaker", "human")))
        if kind == "status":
            return RobotStatus(
                t,
                bool(rec["moving"]),
                Gripper(rec["gripper"]),
                int(rec["millis_since_last_movement"]),
                rec.get("current_action_id"),
                bool(rec.get("recovery_complete", False)),
            )
        if kind == "command":
            return Command(CommandKind(rec["command"]), t, rec.get("text"), rec.get("role"))
        if kind == "query":
            return QueryExchange(t, rec["text"], rec.get("response"), rec.get("polarity"), rec.get("t_response"))
        if kind == "detection":
            return DetectionEvent(
                t, Method(rec["method"]), rec["t_signal"], rec.get("verified", True), rec.get("matched_error_id")
            )
        if kind == "tick":
            return Tick(t)
    except (KeyError, ValueError, TypeError, AttributeError) as exc:
        raise MalformedEventError(f"malformed {kind!r} record: {exc}") from exc
    raise MalformedEventError(f"unknown event kind {kind!r}")


def dumps(rec: Mapping[str, Any]) -> str:
    return json.dumps(rec, separators=(",", ":"))


def write_ndjson(records: Iterable[Mapping[str, Any]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps(rec))
            fh.write("\n")


def read_ndjson(path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedEventError(f"{path}:{lineno}: {exc.msg}") from exc
