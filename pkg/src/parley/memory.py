"""Conversation memory: shared history window, per-agent thought history,
and a long-term store of normalized facts with cosine retrieval."""

from __future__ import annotations

import logging
import math
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from .backend import Backend, BackendError, ConfigurationError, Purpose, RoutingTable, make_request

log = logging.getLogger(__name__)


class HistoryWindow:
    """The ``k`` most recent items, oldest first."""

    def __init__(self, capacity: int, items: Iterable[Any] = ()) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[Any] = deque(items, maxlen=capacity)

    def append(self, item: Any) -> HistoryWindow:
        self._items.append(item)
        return self

    @property
    def entries(self) -> list[Any]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def append_history(window: HistoryWindow, item: Any) -> HistoryWindow:
    return window.append(item)


class ShortTermHistory(HistoryWindow):
    """Per-agent window of own thoughts and own utterances."""

    def __init__(self, owner: str, capacity: int) -> None:
        super().__init__(capacity)
        self.owner = owner
        self.total_appends = 0

    def append(self, item: str) -> ShortTermHistory:
        self.total_appends += 1
        super().append(item)
        return self


@dataclass(frozen=True)
class KnowledgeEntry:
    text: str
    embedding: tuple[float, ...]
    source_turn: int
    source_speaker: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "embedding": list(self.embedding),
            "source_turn": self.source_turn,
            "source_speaker": self.source_speaker,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> KnowledgeEntry:
        return cls(
            text=data["text"],
            embedding=tuple(float(x) for x in data["embedding"]),
            source_turn=int(data["source_turn"]),
            source_speaker=data["source_speaker"],
        )


@dataclass
class LongTermStore:
    retrieval_top_l: int = 5
    entries: list[KnowledgeEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.retrieval_top_l < 1:
            raise ValueError("retrieval_top_l must be >= 1")

    @property
    def dimension(self) -> int | None:
        return len(self.entries[0].embedding) if self.entries else None

    def append(self, entry: KnowledgeEntry) -> None:
        dim = self.dimension
        if dim is not None and len(entry.embedding) != dim:
            raise ConfigurationError(
                f"embedding dimension {len(entry.embedding)} does not match store dimension {dim}"
            )
        self.entries.append(entry)

    def snapshot(self) -> list[dict[str, Any]]:
        return [e.to_dict() for e in self.entries]


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine of the angle between ``a`` and ``b``.

    A zero-norm operand has no direction; its similarity is defined as 0.0.
    """
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(y * y for y in b))
    if na == 0.0 or nb == 0.0:
        log.warning("cosine_similarity on a zero-norm vector; returning 0")
        return 0.0
    value = math.fsum(x * y for x, y in zip(a, b)) / (na * nb)
    return max(-1.0, min(1.0, value))


def _is_zero(vec: Sequence[float]) -> bool:
    return all(x == 0.0 for x in vec)


def rank_entries(
    entries: Sequence[KnowledgeEntry], query_vector: Sequence[float], l: int
) -> list[tuple[float, KnowledgeEntry]]:
    """Top-``l`` entries by cosine similarity, ties broken by recency."""
    if _is_zero(query_vector):
        log.warning("retrieval query embedding has zero norm; nothing retrieved")
        return []
    scored = []
    for position, entry in enumerate(entries):
        if _is_zero(entry.embedding):
            log.warning("knowledge entry %r has a zero-norm embedding; skipped", entry.text)
            continue
        scored.append((cosine_similarity(query_vector, entry.embedding), entry.source_turn, position, entry))
    scored.sort(key=lambda item: (-item[0], -item[1], -item[2]))
    return [(sim, entry) for sim, _, _, entry in scored[:l]]


def retrieve(
    store: LongTermStore,
    query_text: str,
    embed_fn: Callable[[Sequence[str]], list[list[float]]],
    l: int | None = None,
) -> list[KnowledgeEntry]:
    l = store.retrieval_top_l if l is None else l
    if l < 1:
        raise ValueError("l must be >= 1")
    if not store.entries or not query_text:
        return []
    try:
        query_vector = embed_fn([query_text])[0]
    except BackendError as exc:
        log.warning("query embedding failed: %s", exc)
        return []
    return [entry for _, entry in rank_entries(store.entries, query_vector, l)]


_BULLET = re.compile(r"^\s*(?:[-*•・]|\d+[.)])\s+(.*\S)\s*$")


def parse_bullets(text: str) -> list[str]:
    facts = []
    for line in (text or "").splitlines():
        match = _BULLET.match(line)
        if match:
            facts.append(match.group(1).strip())
    return facts


NORMALIZE_INSTRUCTIONS = """\
Extract the important facts and pieces of information stated in the utterance below.
Write each fact as one self-contained bullet line starting with "- ", naming people
explicitly instead of using pronouns. Include who said it when that matters.
If the utterance contains no factual information (greetings, backchannels), output nothing."""


def build_normalize_messages(speaker: str, text: str) -> list[tuple[str, str]]:
    return [
        ("system", "You convert conversational utterances into concise bullet-point knowledge."),
        ("user", f"{NORMALIZE_INSTRUCTIONS}\n\nUtterance by {speaker}:\n{text}"),
    ]


def normalize_knowledge(
    speaker: str, text: str, backend: Backend, routing: RoutingTable
) -> list[str]:
    """Ask the economy model for bullet facts in ``text``; ``[]`` on backend failure."""
    if not text.strip():
        raise ValueError("cannot normalize an empty utterance")
    request = make_request(routing, Purpose.NORMALIZE, build_normalize_messages(speaker, text))
    try:
        response = backend.chat(request)
    except BackendError as exc:
        log.warning("knowledge normalization failed: %s", exc)
        return []
    return parse_bullets(response)


def build_entries(
    facts: Sequence[str],
    embed_fn: Callable[[Sequence[str]], list[list[float]]],
    source_turn: int,
    source_speaker: str,
) -> list[KnowledgeEntry]:
    if not facts:
        return []
    vectors = embed_fn(list(facts))
    return [
        KnowledgeEntry(text=fact, embedding=tuple(vec), source_turn=source_turn, source_speaker=source_speaker)
        for fact, vec in zip(facts, vectors)
    ]
