"""Utterance classification into the five intent categories.

The reference backend is rule based and deterministic. An HTTP backend
can front an external language-model service; it falls back to the rule
backend on timeout or on any malformed reply.
"""

from __future__ import annotations

import json
import logging
import re
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Protocol

from .events import Utterance

log = logging.getLogger(__name__)


class Category(str, Enum):
    ACTION_REQUEST = "action_request"
    EXPLICIT_ERROR_REPORT = "explicit_error_report"
    QUERY_RESPONSE = "query_response"
    IMPLICIT_ERROR_REACTION = "implicit_error_reaction"
    IRRELEVANT = "irrelevant"


class Polarity(str, Enum):
    AFFIRMATIVE = "affirmative"
    NEGATIVE = "negative"
    UNCLEAR = "unclear"


@dataclass(frozen=True)
class Intent:
    category: Category
    action: str | None = None
    params: Mapping[str, str] = field(default_factory=dict)
    description: str | None = None
    polarity: Polarity | None = None
    supplemental: str | None = None


_PUNCT = re.compile(r"[^\w\s]")
_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase, drop punctuation (apostrophes included), collapse whitespace."""
    return _WS.sub(" ", _PUNCT.sub("", text.lower())).strip()


def _tokens(text: str) -> list[str]:
    n = normalize(text)
    return n.split(" ") if n else []


def _has_phrase(norm: str, phrases) -> str | None:
    padded = f" {norm} "
    for p in phrases:
        if f" {p} " in padded:
            return p
    return None


@dataclass(frozen=True)
class ActionSpec:
    name: str
    triggers: tuple[str, ...]
    objects: tuple[str, ...]
    params: Mapping[str, tuple[str, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class TaskLexicon:
    task_name: str
    actions: tuple[ActionSpec, ...]
    action_verbs: frozenset[str]
    object_vocabulary: frozenset[str]
    error_report_markers: frozenset[str]
    reaction_markers: frozenset[str]
    affirmative_markers: frozenset[str]
    negative_markers: frozenset[str]
    negation_words: frozenset[str] = frozenset({"not", "isnt", "arent", "dont", "doesnt", "never", "wasnt"})

    def __post_init__(self):
        sets = {
            "error_report_markers": self.error_report_markers,
            "reaction_markers": self.reaction_markers,
            "affirmative_markers": self.affirmative_markers,
            "negative_markers": self.negative_markers,
        }
        names = list(sets)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                both = sets[a] & sets[b]
                if both:
                    raise ValueError(f"lexicon {self.task_name!r}: {a} and {b} share {sorted(both)}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskLexicon":
        def norm_set(key):
            return frozenset(normalize(p) for p in d.get(key, ()) if normalize(p))

        actions = tuple(
            ActionSpec(
                a["name"],
                tuple(normalize(x) for x in a["triggers"]),
                tuple(normalize(x) for x in a.get("objects", ())),
                {k: tuple(normalize(v) for v in vs) for k, vs in a.get("params", {}).items()},
            )
            for a in d.get("actions", ())
        )
        verbs = set(norm_set("action_verbs"))
        objects = set(norm_set("object_vocabulary"))
        for a in actions:
            objects.update(a.objects)
            for vs in a.params.values():
                objects.update(vs)
        return cls(
            task_name=d["task"],
            actions=actions,
            action_verbs=frozenset(verbs),
            object_vocabulary=frozenset(objects),
            error_report_markers=norm_set("error_report_markers"),
            reaction_markers=norm_set("reaction_markers"),
            affirmative_markers=norm_set("affirmative_markers"),
            negative_markers=norm_set("negative_markers"),
            **({"negation_words": norm_set("negation_words")} if "negation_words" in d else {}),
        )

    @classmethod
    def load(cls, path) -> "TaskLexicon":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def shipped(cls, task: str) -> "TaskLexicon":
        res = resources.files("erraware.data") / "lexicons" / f"{task}.json"
        return cls.from_dict(json.loads(res.read_text(encoding="utf-8")))


def polarity_of_response(text: str, lexicon: TaskLexicon) -> Polarity:
    return _polarity_scan(_tokens(text), lexicon)[0]


def _polarity_scan(tokens: list[str], lexicon: TaskLexicon) -> tuple[Polarity, int]:
    """First polarity marker wins; an affirmative marker within two tokens
    after a negation word counts as negative. Returns (polarity, end index)."""
    aff, neg = lexicon.affirmative_markers, lexicon.negative_markers
    longest = max((len(p.split(" ")) for p in aff | neg), default=0)
    i = 0
    while i < len(tokens):
        for n in range(min(longest, len(tokens) - i), 0, -1):
            phrase = " ".join(tokens[i : i + n])
            if phrase in neg:
                return Polarity.NEGATIVE, i + n
            if phrase in aff:
                if any(w in lexicon.negation_words for w in tokens[max(0, i - 2) : i]):
                    return Polarity.NEGATIVE, i + n
                return Polarity.AFFIRMATIVE, i + n
        i += 1
    return Polarity.UNCLEAR, 0


def classify_intent(u: Utterance, lexicon: TaskLexicon, query_pending: bool) -> Intent:
    """Priority: query response (only while a query is pending) > explicit
    report > action request > implicit reaction > irrelevant."""
    norm = normalize(u.text)
    tokens = norm.split(" ") if norm else []

    if query_pending:
        polarity, end = _polarity_scan(tokens, lexicon)
        if polarity is not Polarity.UNCLEAR:
            supplemental = None
            if polarity is Polarity.NEGATIVE:
                supplemental = " ".join(tokens[end:]) or None
            return Intent(Category.QUERY_RESPONSE, polarity=polarity, supplemental=supplemental)

    error_marker = _has_phrase(norm, lexicon.error_report_markers)
    has_verb = _has_phrase(norm, lexicon.action_verbs | {t for a in lexicon.actions for t in a.triggers})
    has_object = _has_phrase(norm, lexicon.object_vocabulary)
    if error_marker and has_verb and has_object:
        return Intent(Category.EXPLICIT_ERROR_REPORT, description=u.text.strip())

    for spec in lexicon.actions:
        if _has_phrase(norm, spec.triggers) and _has_phrase(norm, spec.objects or lexicon.object_vocabulary):
            params = {}
            for name, values in spec.params.items():
                hit = _has_phrase(norm, values)
                if hit:
                    params[name] = hit
            return Intent(Category.ACTION_REQUEST, action=spec.name, params=params)

    # an error marker without a definite description is still only a reaction
    if error_marker or _has_phrase(norm, lexicon.reaction_markers):
        return Intent(Category.IMPLICIT_ERROR_REACTION)
    return Intent(Category.IRRELEVANT)


class IntentBackend(Protocol):
    def classify(self, u: Utterance, query_pending: bool) -> Intent: ...


class RuleBasedBackend:
    def __init__(self, lexicon: TaskLexicon):
        self.lexicon = lexicon

    def classify(self, u: Utterance, query_pending: bool) -> Intent:
        return classify_intent(u, self.lexicon, query_pending)


def intent_from_reply(reply: Mapping[str, Any], query_pending: bool) -> Intent:
    category = Category(reply["category"])
    payload = reply.get("payload") or {}
    if category is Category.QUERY_RESPONSE:
        if not query_pending:
            raise ValueError("query response without a pending query")
        return Intent(category, polarity=Polarity(payload.get("polarity", "unclear")), supplemental=payload.get("supplemental"))
    if category is Category.ACTION_REQUEST:
        return Intent(category, action=payload["action"], params=dict(payload.get("params", {})))
    if category is Category.EXPLICIT_ERROR_REPORT:
        return Intent(category, description=payload.get("description"))
    return Intent(category)


class HttpIntentBackend:
    """POSTs ``{text, task, query_pending}`` and expects ``{category, payload}``.

    Never stalls the caller beyond ``timeout_s``; any failure is logged and
    the utterance is classified by ``fallback`` instead.
    """

    def __init__(self, url: str, task: str, fallback: IntentBackend, timeout_s: float = 2.0):
        self.url = url
        self.task = task
        self.fallback = fallback
        self.timeout_s = timeout_s
        self.fallbacks = 0

    def classify(self, u: Utterance, query_pending: bool) -> Intent:
        body = json.dumps({"text": u.text, "task": self.task, "query_pending": query_pending}).encode()
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                reply = json.loads(resp.read().decode("utf-8"))
            return intent_from_reply(reply, query_pending)
        except Exception as exc:  # noqa: BLE001 - any backend failure degrades to rules
            log.warning("intent backend failed (%s); using rule-based fallback", exc)
            self.fallbacks += 1
            return self.fallback.classify(u, query_pending)


def load_lexicon(task: str, path: str | Path | None = None) -> TaskLexicon:
    return TaskLexicon.load(path) if path else TaskLexicon.shipped(task)
