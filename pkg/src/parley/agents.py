"""Character agents: prompt assembly plus the think / speak / detect calls."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

from .backend import Backend, BackendError, Purpose, RoutingTable, make_request
from .memory import KnowledgeEntry

log = logging.getLogger(__name__)


class Action(str, Enum):
    SPEAK = "speak"
    LISTEN = "listen"


class PairType(str, Enum):
    WH_QUESTION = "WhQuestion"
    YES_NO_QUESTION = "YesNoQuestion"
    ADDRESSING = "Addressing"
    REQUEST = "Request"
    INVITATION = "Invitation"
    OTHER = "Other"
    NONE = "None"


SECOND_PAIR_PART: dict[PairType, str] = {
    PairType.WH_QUESTION: "(response)",
    PairType.YES_NO_QUESTION: "(response)",
    PairType.ADDRESSING: "(response)",
    PairType.REQUEST: "(acceptance/rejection)",
    PairType.INVITATION: "(acceptance/rejection)",
    PairType.OTHER: "(response)",
}


@dataclass(frozen=True)
class CharacterSheet:
    name: str
    public_profile: str
    background: str
    objectives: tuple[str, ...]
    day_of_incident_actions: tuple[str, ...]
    missions: tuple[str, ...]

    def private_texts(self) -> list[str]:
        return [self.background, *self.objectives, *self.day_of_incident_actions, *self.missions]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "public_profile": self.public_profile,
            "background": self.background,
            "objectives": list(self.objectives),
            "day_of_incident_actions": list(self.day_of_incident_actions),
            "missions": list(self.missions),
        }


@dataclass(frozen=True)
class Utterance:
    turn_index: int
    speaker_name: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("utterance text must be nonempty")

    def to_dict(self) -> dict[str, Any]:
        return {"turn_index": self.turn_index, "speaker_name": self.speaker_name, "text": self.text}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Utterance:
        return cls(int(data["turn_index"]), data["speaker_name"], data["text"])


@dataclass(frozen=True)
class ThinkOutput:
    thought: str
    action: Action
    importance: int

    def __post_init__(self) -> None:
        if not 0 <= self.importance <= 9:
            raise ValueError(f"importance {self.importance} outside 0..9")

    def to_dict(self) -> dict[str, Any]:
        return {"thought": self.thought, "action": self.action.value, "importance": self.importance}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ThinkOutput:
        return cls(data["thought"], Action(data["action"]), int(data["importance"]))


DEFAULT_THINK = ThinkOutput(thought="", action=Action.LISTEN, importance=0)


@dataclass(frozen=True)
class Detection:
    is_first_pair_part: bool = False
    pair_type: PairType = PairType.NONE
    addressee_name: str | None = None
    expected_second_pair_part: str | None = None

    def __post_init__(self) -> None:
        if not self.is_first_pair_part:
            if self.pair_type is not PairType.NONE or self.addressee_name is not None:
                raise ValueError("a non-first-pair-part detection carries no type or addressee")
            if self.expected_second_pair_part is not None:
                raise ValueError("second pair part is only expected after a first pair part")
        elif self.expected_second_pair_part is None:
            raise ValueError("a first pair part must name its expected second pair part")

    def to_dict(self) -> dict[str, Any]:
        return {
            "is_first_pair_part": self.is_first_pair_part,
            "pair_type": self.pair_type.value,
            "addressee_name": self.addressee_name,
            "expected_second_pair_part": self.expected_second_pair_part,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Detection:
        return cls(
            bool(data["is_first_pair_part"]),
            PairType(data["pair_type"]),
            data.get("addressee_name"),
            data.get("expected_second_pair_part"),
        )


NO_DETECTION = Detection()


def canonical_name(name: str) -> str:
    return " ".join(name.split()).casefold()


def match_roster(name: str | None, roster_names: Sequence[str]) -> str | None:
    """Exact roster match after whitespace trimming and case folding."""
    if not name:
        return None
    wanted = canonical_name(name)
    for candidate in roster_names:
        if canonical_name(candidate) == wanted:
            return candidate
    return None


# ---------------------------------------------------------------------------
# Prompt assembly
# ---------------------------------------------------------------------------


def _bullets(items: Sequence[str]) -> str:
    return "\n".join(f"- {item}" for item in items)


def character_section(sheet: CharacterSheet, setting_text: str, others: Sequence[CharacterSheet]) -> str:
    parts = [
        f"# Your character: {sheet.name}",
        f"Profile: {sheet.public_profile}",
        f"Background:\n{sheet.background}",
        f"Objectives:\n{_bullets(sheet.objectives)}",
        f"Your actions on the day of the incident:\n{_bullets(sheet.day_of_incident_actions)}",
        f"Missions:\n{_bullets(sheet.missions)}",
    ]
    if setting_text:
        parts.insert(1, f"Setting:\n{setting_text}")
    if others:
        parts.append(
            "Other participants:\n" + "\n".join(f"- {o.name}: {o.public_profile}" for o in others)
        )
    return "\n\n".join(parts)


def knowledge_section(knowledge: Sequence[KnowledgeEntry]) -> str:
    return "# Things you remember\n" + _bullets([k.text for k in knowledge])


def history_section(history: Sequence[Any]) -> str:
    lines = [f"Turn {u.turn_index}. {u.speaker_name}: {u.text}" for u in history]
    return "# Recent conversation\n" + ("\n".join(lines) if lines else "(nobody has spoken yet)")


def thoughts_section(short_term: Sequence[str]) -> str:
    lines = [f"{i}. {t}" for i, t in enumerate(short_term, start=1) if t]
    return "# Your recent thoughts and remarks\n" + ("\n".join(lines) if lines else "(none yet)")


THINK_FORMAT = """\
# Output format
Decide whether you want to speak next or keep listening, and how important it is for
you to speak now, as an integer from 0 (not at all) to 9 (must speak immediately).
Answer with exactly these three lines and nothing else:
action: speak or listen
importance: 0-9
thought: your plan for what to say or do next, in one or two sentences"""

THINK_REMINDER = (
    "Your previous answer could not be parsed. Reply again with exactly three lines:\n"
    "action: speak|listen\nimportance: <integer 0-9>\nthought: <text>"
)

SPEAK_FORMAT = """\
# Output format
Write only your next utterance as {name}, in character, as spoken words.
Do not prefix it with your name or a turn number. Keep it to a few sentences."""


def build_think_prompt(
    sheet: CharacterSheet,
    history_window: Sequence[Any],
    short_term: Sequence[str],
    knowledge: Sequence[KnowledgeEntry],
    *,
    setting_text: str = "",
    others: Sequence[CharacterSheet] = (),
) -> str:
    sections = [character_section(sheet, setting_text, others)]
    if knowledge:
        sections.append(knowledge_section(knowledge))
    sections.append(history_section(history_window))
    sections.append(thoughts_section(short_term))
    sections.append(THINK_FORMAT)
    return "\n\n".join(sections) + "\n"


def build_speak_prompt(
    sheet: CharacterSheet,
    history_window: Sequence[Any],
    short_term: Sequence[str],
    knowledge: Sequence[KnowledgeEntry],
    constraint: str | None,
    *,
    setting_text: str = "",
    others: Sequence[CharacterSheet] = (),
    next_turn: int | None = None,
) -> str:
    if next_turn is None:
        next_turn = (history_window[-1].turn_index + 1) if history_window else 1
    sections = [character_section(sheet, setting_text, others)]
    if knowledge:
        sections.append(knowledge_section(knowledge))
    sections.append(history_section(history_window))
    sections.append(thoughts_section(short_term))
    slot = f"Turn {next_turn}. {sheet.name}:"
    if constraint:
        slot = (
            f"{slot} {constraint}\n"
            f"You were addressed directly by the previous speaker. Your utterance must be the "
            f"{constraint.strip('()')} to what they said."
        )
    sections.append("# Your turn\n" + slot)
    sections.append(SPEAK_FORMAT.format(name=sheet.name))
    return "\n\n".join(sections) + "\n"


def build_detect_prompt(utterance: Utterance, roster_names: Sequence[str]) -> str:
    names = "\n".join(f"- {n}" for n in roster_names)
    return f"""\
# Task
Decide whether the utterance below is the first part of an adjacency pair (a question,
an address to someone, a request or an invitation that calls for a reply) and, if it is,
whom it selects as the next speaker.

# Participants
{names}

# Utterance
{utterance.speaker_name}: {utterance.text}

# Output format
Answer with exactly these three lines:
first_pair_part: yes or no
type: one of WhQuestion, YesNoQuestion, Addressing, Request, Invitation, Other, None
addressee: the full name of the single participant who is expected to answer, exactly as
listed above, or "everyone" if the utterance is addressed to the whole group, or "none"
"""


DETECT_REMINDER = (
    "Your previous answer could not be parsed. Reply again with exactly three lines:\n"
    "first_pair_part: yes|no\ntype: WhQuestion|YesNoQuestion|Addressing|Request|Invitation|Other|None\n"
    "addressee: <full name>|everyone|none"
)

SYSTEM_ROLEPLAY = "You are a player in a murder mystery game, role-playing the character described below."
SYSTEM_DETECT = "You are a conversation analyst annotating multi-party dialogue."


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class ParseError(ValueError):
    pass


_ACTION = re.compile(r"\baction\s*[:=]\s*\**\s*(speak|listen)\b", re.I)
_IMPORTANCE = re.compile(r"\bimportance\s*[:=]\s*\**\s*(-?\d+(?:\.\d+)?)", re.I)
_THOUGHT = re.compile(r"\bthought\s*[:=]\s*(.*?)(?=\baction\s*[:=]|\bimportance\s*[:=]|\Z)", re.I | re.S)


def clamp_importance(value: float) -> int:
    """Round half-up, then clamp into 0..9."""
    return max(0, min(9, math.floor(value + 0.5)))


def parse_think(text: str) -> ThinkOutput:
    action = _ACTION.search(text or "")
    importance = _IMPORTANCE.search(text or "")
    if not action or not importance:
        raise ParseError(f"think output missing action/importance: {text!r}")
    thought_match = _THOUGHT.search(text)
    thought = thought_match.group(1).strip() if thought_match else ""
    return ThinkOutput(
        thought=thought,
        action=Action(action.group(1).lower()),
        importance=clamp_importance(float(importance.group(1))),
    )


_PAIR_ALIASES = {
    re.sub(r"[^a-z]", "", alias.lower()): pair
    for pair, aliases in {
        PairType.WH_QUESTION: ["WhQuestion", "wh question", "wh-question", "wh_question"],
        PairType.YES_NO_QUESTION: ["YesNoQuestion", "yes/no question", "yes-no question", "yes_no_question"],
        PairType.ADDRESSING: ["Addressing", "address"],
        PairType.REQUEST: ["Request"],
        PairType.INVITATION: ["Invitation", "invite"],
        PairType.OTHER: ["Other"],
        PairType.NONE: ["None", "no"],
    }.items()
    for alias in aliases
}

_FIELD = re.compile(r"^\s*[\-*]?\s*(first_pair_part|first pair part|type|pair_type|addressee)\s*[:=]\s*(.*?)\s*$", re.I | re.M)
_BROADCAST = {"everyone", "all", "everybody", "anyone", "anybody", "the group", "all participants"}
_NOBODY = {"", "none", "nobody", "no one", "n/a", "null", "-"}


def parse_detection(text: str, roster_names: Sequence[str]) -> Detection:
    fields: dict[str, str] = {}
    for key, value in _FIELD.findall(text or ""):
        key = key.lower().replace(" ", "_")
        key = "type" if key == "pair_type" else key
        fields.setdefault(key, value.strip().strip('"').strip("*").strip())
    if "first_pair_part" not in fields:
        raise ParseError(f"detection output missing first_pair_part: {text!r}")
    flag = fields["first_pair_part"].lower()
    if flag not in {"yes", "no", "true", "false"}:
        raise ParseError(f"first_pair_part must be yes/no, got {flag!r}")
    if flag in {"no", "false"}:
        return NO_DETECTION
    pair = _PAIR_ALIASES.get(re.sub(r"[^a-z]", "", fields.get("type", "").lower()))
    if pair is None:
        raise ParseError(f"unknown pair type {fields.get('type')!r}")
    if pair is PairType.NONE:
        pair = PairType.OTHER
    raw_addressee = fields.get("addressee", "")
    addressee = match_roster(raw_addressee, roster_names)
    lowered = raw_addressee.lower()
    if addressee is None and lowered not in _BROADCAST and lowered not in _NOBODY:
        log.warning("detected addressee %r is not a participant; treating as unaddressed", raw_addressee)
    return Detection(True, pair, addressee, SECOND_PAIR_PART[pair])


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------


@dataclass
class Agent:
    sheet: CharacterSheet
    setting_text: str = ""
    others: tuple[CharacterSheet, ...] = ()
    warnings: list[str] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.sheet.name

    def think(
        self,
        shared_history: Sequence[Utterance],
        own_short_term: Sequence[str],
        knowledge: Sequence[KnowledgeEntry],
        backend: Backend,
        routing: RoutingTable,
    ) -> tuple[ThinkOutput, list[str]]:
        """Return the agent's plan and speak/listen bid, plus any parse warnings."""
        prompt = build_think_prompt(
            self.sheet, shared_history, own_short_term, knowledge,
            setting_text=self.setting_text, others=self.others,
        )
        messages = [("system", SYSTEM_ROLEPLAY), ("user", prompt)]
        response = backend.chat(make_request(routing, Purpose.THINK, messages, agent=self.name))
        try:
            return parse_think(response), []
        except ParseError:
            pass
        messages += [("assistant", response), ("user", THINK_REMINDER)]
        response = backend.chat(make_request(routing, Purpose.THINK, messages, agent=self.name))
        try:
            return parse_think(response), []
        except ParseError:
            msg = f"{self.name}: unparseable think output after retry; defaulting to listen"
            log.warning(msg)
            return DEFAULT_THINK, [msg]

    def speak(
        self,
        shared_history: Sequence[Utterance],
        own_short_term: Sequence[str],
        knowledge: Sequence[KnowledgeEntry],
        constraint: str | None,
        turn_index: int,
        backend: Backend,
        routing: RoutingTable,
    ) -> Utterance:
        prompt = build_speak_prompt(
            self.sheet, shared_history, own_short_term, knowledge, constraint,
            setting_text=self.setting_text, others=self.others, next_turn=turn_index,
        )
        messages = [("system", SYSTEM_ROLEPLAY), ("user", prompt)]
        for _ in range(2):
            text = clean_utterance(
                backend.chat(make_request(routing, Purpose.SPEAK, messages, agent=self.name)),
                self.name,
            )
            if text:
                return Utterance(turn_index=turn_index, speaker_name=self.name, text=text)
            log.warning("%s produced an empty utterance", self.name)
        raise BackendError(f"{self.name}: empty utterance twice at turn {turn_index}")


def clean_utterance(text: str, speaker: str) -> str:
    text = (text or "").strip()
    prefix = re.compile(rf"^(?:turn\s*\d+\.?\s*)?{re.escape(speaker)}\s*:\s*", re.I)
    return prefix.sub("", text).strip()


def detect_designation(
    utterance: Utterance,
    roster_names: Sequence[str],
    backend: Backend,
    routing: RoutingTable,
) -> tuple[Detection, list[str]]:
    messages = [("system", SYSTEM_DETECT), ("user", build_detect_prompt(utterance, roster_names))]
    response = backend.chat(make_request(routing, Purpose.DETECT, messages))
    try:
        return parse_detection(response, roster_names), []
    except ParseError:
        pass
    messages += [("assistant", response), ("user", DETECT_REMINDER)]
    response = backend.chat(make_request(routing, Purpose.DETECT, messages))
    try:
        return parse_detection(response, roster_names), []
    except ParseError:
        msg = f"unparseable detection output after retry at turn {utterance.turn_index}"
        log.warning(msg)
        return NO_DETECTION, [msg]
