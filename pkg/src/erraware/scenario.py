"""Scenario file format: robot script, injected errors, synthetic human, noise."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .events import Gripper
from .robot_sim import RobotAction, Script

SCHEMA_VERSION = 1

# OpenFace intensity AUs
DEFAULT_AUS = (1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 45)

_latency = {
    "oneOf": [
        {"type": "integer", "minimum": 0},
        {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
    ]
}
_prob = {"type": "number", "minimum": 0, "maximum": 1}

SCENARIO_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["schema", "task", "actions", "errors", "human", "seed"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "task": {"type": "string", "minLength": 1},
        "seed": {"type": "integer"},
        "lexicon": {"type": "string"},
        "robot": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "recovery_millis": {"type": "integer", "exclusiveMinimum": 0},
                "status_rate_hz": {"type": "number", "exclusiveMinimum": 0},
                "tail_millis": {"type": "integer", "minimum": 0},
            },
        },
        "actions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "start", "duration_millis", "moving"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "start": {"type": "integer", "minimum": 0},
                    "duration_millis": {"type": "integer", "exclusiveMinimum": 0},
                    "moving": {"type": "boolean"},
                    "gripper_profile": {
                        "type": "array",
                        "items": {
                            "type": "array",
                            "prefixItems": [
                                {"type": "integer", "minimum": 0},
                                {"enum": [g.value for g in Gripper]},
                            ],
                            "minItems": 2,
                            "maxItems": 2,
                        },
                    },
                    "is_error": {"type": ["string", "null"]},
                    "note": {"type": "string"},
                },
            },
        },
        "errors": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["error_id", "kind", "action"],
                "additionalProperties": False,
                "properties": {
                    "error_id": {"type": "string", "minLength": 1},
                    "kind": {"enum": ["physical", "conceptual"]},
                    "action": {"type": "string"},
                    "description": {"type": "string"},
                    "human": {"$ref": "#/$defs/reactions"},
                },
            },
        },
        "human": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "aus": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "baseline": {
                    "oneOf": [
                        {"type": "number", "minimum": 0, "maximum": 5},
                        {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 5}},
                    ]
                },
                "au_rate_hz": {"type": "number", "exclusiveMinimum": 0},
                "au_reaction": {"$ref": "#/$defs/au_reaction"},
                "speech_reaction": {"$ref": "#/$defs/speech"},
                "explicit_report": {"$ref": "#/$defs/speech"},
                "query_response_policy": {"enum": ["truthful", "always_fine", "silent"]},
                "query_response": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "latency_millis": _latency,
                        "affirmative_text": {"type": "string", "minLength": 1},
                        "negative_text": {"type": "string", "minLength": 1},
                    },
                },
                "perceives_error": {"type": "object", "additionalProperties": {"type": "boolean"}},
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spontaneous_au_burst_rate": {"type": "number", "minimum": 0},
                "burst_magnitude": {"type": "number", "minimum": 0},
                "burst_duration_millis": {"type": "integer", "minimum": 0},
                "distractor_utterance_rate": {"type": "number", "minimum": 0},
                "distractor_texts": {"type": "array", "items": {"type": "string", "minLength": 1}},
                "frame_jitter": {"type": "number", "minimum": 0},
            },
        },
    },
    "$defs": {
        "au_reaction": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "latency_millis": _latency,
                "duration_millis": {"type": "integer", "minimum": 0},
                "magnitude": {"type": "number", "minimum": 0, "maximum": 5},
            },
        },
        "speech": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "latency_millis": _latency,
                "text": {"type": "string", "minLength": 1},
                "probability": _prob,
            },
        },
        "reactions": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "au_reaction": {"$ref": "#/$defs/au_reaction"},
                "speech_reaction": {"$ref": "#/$defs/speech"},
                "explicit_report": {"$ref": "#/$defs/speech"},
            },
        },
    },
}


class ScenarioError(ValueError):
    """Scenario file fails validation; ``pointer`` is a JSON pointer into the file."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class ErrorAnchorError(ScenarioError):
    """An injected error and its anchoring action disagree."""


class ErrorKind(str, Enum):
    PHYSICAL = "physical"
    CONCEPTUAL = "conceptual"


class ResponsePolicy(str, Enum):
    TRUTHFUL = "truthful"
    ALWAYS_FINE = "always_fine"
    SILENT = "silent"


Latency = int | tuple[int, int]


def sample_latency(value: Latency, rng: random.Random) -> int:
    if isinstance(value, tuple):
        return rng.randint(*value)
    return value


@dataclass(frozen=True)
class AuReaction:
    latency_millis: Latency = 1500
    duration_millis: int = 3000
    magnitude: float = 2.0


@dataclass(frozen=True)
class SpeechReaction:
    latency_millis: Latency = 1500
    text: str = "whoa, you missed it"
    probability: float = 0.0


@dataclass(frozen=True)
class QueryResponseModel:
    latency_millis: Latency = 1000
    affirmative_text: str = "yes, all good"
    negative_text: str = "no, that did not go as planned"


@dataclass(frozen=True)
class Reactions:
    au_reaction: AuReaction = AuReaction()
    speech_reaction: SpeechReaction = SpeechReaction()
    explicit_report: SpeechReaction = SpeechReaction(5000, "you made a mistake", 1.0)


@dataclass(frozen=True)
class HumanModel:
    aus: tuple[int, ...] = DEFAULT_AUS
    baseline: Mapping[int, float] = field(default_factory=lambda: {a: 0.3 for a in DEFAULT_AUS})
    au_rate_hz: float = 10.0
    reactions: Reactions = Reactions()
    query_response_policy: ResponsePolicy = ResponsePolicy.TRUTHFUL
    query_response: QueryResponseModel = QueryResponseModel()
    perceives_error: Mapping[str, bool] = field(default_factory=dict)

    def perceives(self, error_id: str) -> bool:
        return self.perceives_error.get(error_id, True)


@dataclass(frozen=True)
class NoiseModel:
    spontaneous_au_burst_rate: float = 0.0
    burst_magnitude: float = 2.0
    burst_duration_millis: int = 3000
    distractor_utterance_rate: float = 0.0
    distractor_texts: tuple[str, ...] = ("nice weather today", "where does this one go", "I think I need a break soon")
    frame_jitter: float = 0.0


@dataclass(frozen=True)
class InjectedError:
    error_id: str
    kind: ErrorKind
    action_id: str
    description: str = ""
    reactions: Reactions = Reactions()


@dataclass(frozen=True)
class Scenario:
    task_name: str
    robot_actions: tuple[RobotAction, ...]
    injected_errors: tuple[InjectedError, ...]
    human: HumanModel
    noise: NoiseModel
    seed: int
    recovery_millis: int = 4000
    status_rate_hz: float = 10.0
    tail_millis: int = 15000
    lexicon_path: str | None = None

    @cached_property
    def script(self) -> Script:
        return Script(self.robot_actions)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)


def _lat(v) -> Latency:
    return tuple(v) if isinstance(v, list) else v


def _merge_au(base: AuReaction, d: Mapping | None) -> AuReaction:
    if not d:
        return base
    return replace(base, **{k: _lat(v) if k == "latency_millis" else v for k, v in d.items()})


def _merge_speech(base: SpeechReaction, d: Mapping | None) -> SpeechReaction:
    if not d:
        return base
    return replace(base, **{k: _lat(v) if k == "latency_millis" else v for k, v in d.items()})


def _merge_reactions(base: Reactions, d: Mapping | None) -> Reactions:
    d = d or {}
    return Reactions(
        _merge_au(base.au_reaction, d.get("au_reaction")),
        _merge_speech(base.speech_reaction, d.get("speech_reaction")),
        _merge_speech(base.explicit_report, d.get("explicit_report")),
    )


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def parse_scenario(doc: Mapping[str, Any]) -> Scenario:
    """Validate a decoded scenario document and build a ``Scenario``."""
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ScenarioError(err.message, _pointer(err.absolute_path))

    actions = []
    for i, a in enumerate(doc["actions"]):
        actions.append(
            RobotAction(
                id=a["id"],
                start=a["start"],
                duration_millis=a["duration_millis"],
                moving=a["moving"],
                gripper_profile=tuple((off, Gripper(g)) for off, g in a.get("gripper_profile", ())),
                is_error=a.get("is_error"),
            )
        )
    try:
        Script(actions)
    except ValueError as exc:
        raise ScenarioError(str(exc), "/actions") from exc
    by_id = {a.id: a for a in actions}

    h = doc["human"]
    aus = tuple(h.get("aus", DEFAULT_AUS))
    base = h.get("baseline", 0.3)
    if isinstance(base, dict):
        baseline = {int(k): float(v) for k, v in base.items()}
        if set(baseline) != set(aus):
            raise ScenarioError("baseline keys must match the AU set", "/human/baseline")
    else:
        baseline = {a: float(base) for a in aus}
    default_reactions = _merge_reactions(Reactions(), h)
    qr = h.get("query_response", {})
    human = HumanModel(
        aus=aus,
        baseline=baseline,
        au_rate_hz=h.get("au_rate_hz", 10.0),
        reactions=default_reactions,
        query_response_policy=ResponsePolicy(h.get("query_response_policy", "truthful")),
        query_response=replace(
            QueryResponseModel(), **{k: _lat(v) if k == "latency_millis" else v for k, v in qr.items()}
        ),
        perceives_error=dict(h.get("perceives_error", {})),
    )

    injected = []
    seen = set()
    for i, e in enumerate(doc["errors"]):
        eid = e["error_id"]
        if eid in seen:
            raise ScenarioError(f"duplicate error id {eid!r}", f"/errors/{i}/error_id")
        seen.add(eid)
        act = by_id.get(e["action"])
        if act is None:
            raise ErrorAnchorError(f"error {eid!r} anchors missing action {e['action']!r}", f"/errors/{i}/action")
        if act.is_error != eid:
            raise ErrorAnchorError(
                f"action {act.id!r} is not flagged is_error={eid!r}", f"/errors/{i}/action"
            )
        injected.append(
            InjectedError(eid, ErrorKind(e["kind"]), act.id, e.get("description", ""),
                          _merge_reactions(default_reactions, e.get("human")))
        )
    for i, a in enumerate(actions):
        if a.is_error is not None and a.is_error not in seen:
            raise ErrorAnchorError(f"action flags unknown error {a.is_error!r}", f"/actions/{i}/is_error")
    unknown = set(human.perceives_error) - seen
    if unknown:
        raise ScenarioError(f"perceives_error names unknown errors {sorted(unknown)}", "/human/perceives_error")

    n = doc.get("noise", {})
    noise = replace(NoiseModel(), **{k: tuple(v) if k == "distractor_texts" else v for k, v in n.items()})
    robot = doc.get("robot", {})
    return Scenario(
        task_name=doc["task"],
        robot_actions=tuple(actions),
        injected_errors=tuple(injected),
        human=human,
        noise=noise,
        seed=doc["seed"],
        recovery_millis=robot.get("recovery_millis", 4000),
        status_rate_hz=robot.get("status_rate_hz", 10.0),
        tail_millis=robot.get("tail_millis", 15000),
        lexicon_path=doc.get("lexicon"),
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from exc
    sc = parse_scenario(doc)
    if sc.lexicon_path and not Path(sc.lexicon_path).is_absolute():
        sc = replace(sc, lexicon_path=str(path.parent / sc.lexicon_path))
    return sc


def shipped_path(kind: str, name: str) -> Path:
    """Path of a bundled data file, e.g. ``shipped_path("scenarios", "assembly")``."""
    return Path(str(resources.files("erraware.data") / kind / f"{name}.json"))
