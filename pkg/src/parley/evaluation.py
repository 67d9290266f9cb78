"""Transcript evaluation: dialogue-breakdown labelling and 1-5 judge scores."""

from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Sequence

import numpy as np

from .backend import Backend, Purpose, RoutingTable, make_request
from .transcript import Transcript

log = logging.getLogger(__name__)


class BreakdownCategory(str, Enum):
    IGNORE_QUESTION = "IgnoreQuestion"
    IGNORE_REQUEST = "IgnoreRequest"
    IGNORE_SUGGESTION = "IgnoreSuggestion"
    IGNORE_GREETING = "IgnoreGreeting"
    IGNORE_EXPECTATION = "IgnoreExpectation"
    UNCLEAR_INTENTION = "UnclearIntention"
    TOPIC_CHANGE_ERROR = "TopicChangeError"
    LACK_OF_INFORMATION = "LackOfInformation"
    SELF_CONTRADICTION = "SelfContradiction"
    INTERLOCUTOR_CONTRADICTION = "InterlocutorContradiction"
    REPETITION = "Repetition"


CATEGORY_DESCRIPTIONS = {
    BreakdownCategory.IGNORE_QUESTION: "response level, form: the utterance ignores a question put to the speaker",
    BreakdownCategory.IGNORE_REQUEST: "response level, form: the utterance ignores a request",
    BreakdownCategory.IGNORE_SUGGESTION: "response level, form: the utterance ignores a suggestion or proposal",
    BreakdownCategory.IGNORE_GREETING: "response level, form: the utterance ignores a greeting",
    BreakdownCategory.IGNORE_EXPECTATION: "response level, content: the reply does not deliver what the previous utterance expected",
    BreakdownCategory.UNCLEAR_INTENTION: "context level, form: the intention of the utterance cannot be understood",
    BreakdownCategory.TOPIC_CHANGE_ERROR: "context level, form: an abrupt, unmotivated change of topic",
    BreakdownCategory.LACK_OF_INFORMATION: "context level, form: necessary information is missing so the utterance cannot be understood",
    BreakdownCategory.SELF_CONTRADICTION: "context level, content: contradicts what the same speaker said before",
    BreakdownCategory.INTERLOCUTOR_CONTRADICTION: "context level, content: contradicts what another participant said without acknowledging it",
    BreakdownCategory.REPETITION: "context level, content: repeats content already said",
}

_CATEGORY_LOOKUP = {re.sub(r"[^a-z]", "", c.value.lower()): c for c in BreakdownCategory}
_CATEGORY_LOOKUP.update(
    {
        "unclearintentionofutterance": BreakdownCategory.UNCLEAR_INTENTION,
        "topicchange": BreakdownCategory.TOPIC_CHANGE_ERROR,
    }
)


class EvaluationError(ValueError):
    """Judge output could not be turned into a valid result."""


@dataclass(frozen=True)
class BreakdownAnnotation:
    turn_index: int
    label: str
    category: BreakdownCategory | None

    def __post_init__(self) -> None:
        if self.label not in ("B", "NB"):
            raise ValueError(f"label must be B or NB, got {self.label!r}")
        if (self.label == "B") != (self.category is not None):
            raise ValueError("B labels need a category; NB labels must not have one")

    def to_dict(self) -> dict[str, Any]:
        return {
            "turn_index": self.turn_index,
            "label": self.label,
            "category": self.category.value if self.category else None,
        }


@dataclass(frozen=True)
class JudgeScores:
    coherence: int
    cooperativeness: int
    diversity: int

    def __post_init__(self) -> None:
        for name in ("coherence", "cooperativeness", "diversity"):
            value = getattr(self, name)
            if not isinstance(value, int) or not 1 <= value <= 5:
                raise ValueError(f"{name} must be an integer in 1..5, got {value!r}")

    def to_dict(self) -> dict[str, int]:
        return {"coherence": self.coherence, "cooperativeness": self.cooperativeness, "diversity": self.diversity}


def format_dialogue(transcript: Transcript) -> str:
    return "\n".join(f"Turn {r.turn_index}. {r.speaker}: {r.utterance.text}" for r in transcript.records)


def build_breakdown_prompt(transcript: Transcript) -> str:
    taxonomy = "\n".join(f"- {c.value}: {d}" for c, d in CATEGORY_DESCRIPTIONS.items())
    n = len(transcript.records)
    return f"""\
Below is a {n}-turn conversation among players of a murder mystery game.
For every turn, decide whether the utterance leads to a dialogue breakdown, that is,
whether it makes it hard for the conversation to continue smoothly.
Label it B (breakdown) if it falls under one of the categories below, otherwise NB.

# Breakdown categories
{taxonomy}

# Conversation
{format_dialogue(transcript)}

# Output format
Write exactly {n} lines, one per turn, in order:
turn <number>: NB
or
turn <number>: B <Category>
using one category name from the list above."""


BREAKDOWN_REMINDER = (
    "Your answer could not be parsed. Write exactly one line per turn, e.g.\n"
    "turn 1: NB\nturn 2: B IgnoreQuestion\nwith category names taken from the list."
)

_ANNOT_LINE = re.compile(r"^\W*turn\s*(\d+)\s*[:.)\-]?\s*(NB|B)\b\W*(.*)$", re.I)


def parse_category(text: str) -> BreakdownCategory:
    key = re.sub(r"[^a-z]", "", text.lower())
    if key in _CATEGORY_LOOKUP:
        return _CATEGORY_LOOKUP[key]
    raise EvaluationError(f"unknown breakdown category {text!r}")


def parse_breakdowns(text: str, turn_indices: Sequence[int]) -> list[BreakdownAnnotation]:
    found: dict[int, BreakdownAnnotation] = {}
    for line in (text or "").splitlines():
        match = _ANNOT_LINE.match(line.strip())
        if not match:
            continue
        turn = int(match.group(1))
        label = match.group(2).upper()
        if turn in found:
            raise EvaluationError(f"turn {turn} labelled twice")
        category = None
        if label == "B":
            rest = re.split(r"[:;(\u2014]| - ", match.group(3).strip().lstrip("([").strip())[0]
            rest = rest.strip(" .,-)]")
            if not rest:
                raise EvaluationError(f"turn {turn} labelled B without a category")
            category = parse_category(rest)
        found[turn] = BreakdownAnnotation(turn, label, category)
    expected = set(turn_indices)
    if set(found) != expected:
        missing = sorted(expected - set(found))
        extra = sorted(set(found) - expected)
        raise EvaluationError(f"annotation turns mismatch (missing {missing}, unexpected {extra})")
    return [found[t] for t in turn_indices]


def _judge_call(
    backend: Backend,
    routing: RoutingTable,
    purpose: Purpose,
    prompt: str,
    reminder: str,
    parse,
):
    messages = [("system", "You are a careful evaluator of multi-party conversations."), ("user", prompt)]
    response = backend.chat(make_request(routing, purpose, messages, max_tokens=800))
    try:
        return parse(response)
    except (EvaluationError, ValueError) as first:
        log.info("judge output unparseable (%s); retrying with schema reminder", first)
    messages += [("assistant", response), ("user", reminder)]
    response = backend.chat(make_request(routing, purpose, messages, max_tokens=800))
    try:
        return parse(response)
    except (EvaluationError, ValueError) as exc:
        raise EvaluationError(f"{purpose.value}: unusable judge output after retry: {exc}") from exc


def _require_complete(transcript: Transcript) -> None:
    if not transcript.complete:
        raise EvaluationError(f"transcript {transcript.session_id} is not complete ({transcript.status})")


def analyze_breakdowns(
    transcript: Transcript, backend: Backend, routing: RoutingTable | None = None
) -> list[BreakdownAnnotation]:
    """One judge call over the whole conversation; one annotation per turn."""
    _require_complete(transcript)
    routing = routing or RoutingTable()
    turns = [r.turn_index for r in transcript.records]
    return _judge_call(
        backend, routing, Purpose.JUDGE_BREAKDOWN, build_breakdown_prompt(transcript), BREAKDOWN_REMINDER,
        lambda text: parse_breakdowns(text, turns),
    )


def build_turn_breakdown_prompt(transcript: Transcript, turn_index: int) -> str:
    taxonomy = "\n".join(f"- {c.value}: {d}" for c, d in CATEGORY_DESCRIPTIONS.items())
    context = "\n".join(
        f"Turn {r.turn_index}. {r.speaker}: {r.utterance.text}" for r in transcript.records if r.turn_index <= turn_index
    )
    return f"""\
Decide whether the LAST utterance of this murder mystery conversation leads to a dialogue
breakdown. Label it B with one category below, or NB.

# Breakdown categories
{taxonomy}

# Conversation so far
{context}

# Output format
One line: turn {turn_index}: NB   or   turn {turn_index}: B <Category>"""


def analyze_breakdowns_per_turn(
    transcript: Transcript, backend: Backend, routing: RoutingTable | None = None
) -> list[BreakdownAnnotation]:
    """Ablation mode: one judge call per turn, each seeing the dialogue up to that turn."""
    _require_complete(transcript)
    routing = routing or RoutingTable()
    out = []
    for r in transcript.records:
        out.extend(
            _judge_call(
                backend, routing, Purpose.JUDGE_BREAKDOWN, build_turn_breakdown_prompt(transcript, r.turn_index),
                BREAKDOWN_REMINDER, lambda text, t=r.turn_index: parse_breakdowns(text, [t]),
            )
        )
    return out


def count_breakdowns(annotations: Iterable[BreakdownAnnotation]) -> int:
    return sum(1 for a in annotations if a.label == "B")


SCORES_PROMPT = """\
Evaluate the following conversation among murder mystery players on three metrics,
each an integer from 1 to 5:
- coherence: logical flow and absence of contradictions (1 = contradictory and illogical, 5 = consistent and logical)
- cooperativeness: how collaboratively participants exchange information and work on the problem (1 = uncooperative, 5 = cooperative)
- diversity: absence of repetitive content and presence of varied opinions and perspectives (1 = no diversity, 5 = high diversity)

# Conversation
{dialogue}

# Output format
Answer with exactly three lines:
coherence: <1-5>
cooperativeness: <1-5>
diversity: <1-5>"""

SCORES_REMINDER = (
    "Your answer could not be used. Reply with exactly three lines, each an integer from 1 to 5:\n"
    "coherence: <1-5>\ncooperativeness: <1-5>\ndiversity: <1-5>"
)

_SCORE = {
    name: re.compile(rf"\b{name}\s*[:=]\s*\**\s*(-?\d+(?:\.\d+)?)", re.I)
    for name in ("coherence", "cooperativeness", "diversity")
}


def parse_scores(text: str) -> JudgeScores:
    values = {}
    for name, pattern in _SCORE.items():
        match = pattern.search(text or "")
        if not match:
            raise EvaluationError(f"missing {name} score")
        raw = float(match.group(1))
        if raw != int(raw) or not 1 <= raw <= 5:
            raise EvaluationError(f"{name} score {match.group(1)} is not an integer in 1..5")
        values[name] = int(raw)
    return JudgeScores(**values)


def judge_transcript(transcript: Transcript, backend: Backend, routing: RoutingTable | None = None) -> JudgeScores:
    _require_complete(transcript)
    routing = routing or RoutingTable()
    return _judge_call(
        backend, routing, Purpose.JUDGE_SCORES, SCORES_PROMPT.format(dialogue=format_dialogue(transcript)),
        SCORES_REMINDER, parse_scores,
    )


# -- aggregation --------------------------------------------------------------

METRICS = ("breakdown_count", "coherence", "cooperativeness", "diversity")


def summarize(values: Sequence[int], bins: Sequence[int]) -> dict[str, Any]:
    arr = np.asarray(values, dtype=float)
    counts = {str(b): int(np.sum(arr == b)) for b in bins}
    q1, median, q3 = np.percentile(arr, [25, 50, 75])
    return {
        "n": len(values),
        "values": [int(v) for v in values],
        "histogram": counts,
        "median": float(median),
        "q1": float(q1),
        "q3": float(q3),
        "iqr": float(q3 - q1),
    }


def aggregate_condition(results: Sequence[dict[str, Any]], condition: str, turn_budget: int | None = None) -> dict[str, Any]:
    """Per-metric histogram, median and quartiles for one condition.

    ``results`` are per-transcript dicts with ``breakdown_count`` and the three scores.
    """
    if not results:
        raise ValueError("need at least one result to aggregate")
    if turn_budget is None:
        turn_budget = max(int(r.get("turn_budget", 0)) for r in results) or max(r["breakdown_count"] for r in results)
    out: dict[str, Any] = {"condition": condition, "n": len(results), "metrics": {}}
    out["metrics"]["breakdown_count"] = summarize([r["breakdown_count"] for r in results], range(0, turn_budget + 1))
    for name in ("coherence", "cooperativeness", "diversity"):
        out["metrics"][name] = summarize([r[name] for r in results], range(1, 6))
    return out


def aggregate_csv(aggregates: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["condition", "metric", "value", "count"])
    for agg in aggregates:
        for metric in METRICS:
            for value, count in agg["metrics"][metric]["histogram"].items():
                writer.writerow([agg["condition"], metric, value, count])
    return buf.getvalue()
