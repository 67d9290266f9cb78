"""Turn-taking engine.

Each turn every agent thinks, a speaker is resolved under the session's
condition, the speaker speaks, memories are committed, and (only under
``CSSN_OR_SS``) the new utterance is checked for a first pair part that
designates the next speaker.
"""

from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Callable, Mapping, Sequence

from . import __version__
from .agents import Action, Agent, Detection, ThinkOutput, Utterance, detect_designation, match_roster
from .backend import Backend, BackendError, ConfigurationError, RoutingTable
from .memory import (
    HistoryWindow,
    KnowledgeEntry,
    LongTermStore,
    ShortTermHistory,
    build_entries,
    normalize_knowledge,
    retrieve,
)
from .scenario import Scenario
from .transcript import Transcript, TurnRecord

log = logging.getLogger(__name__)


class Condition(str, Enum):
    EQUAL = "EQUAL"
    SS = "SS"
    CSSN_OR_SS = "CSSN_OR_SS"


class SelectionReason(str, Enum):
    DESIGNATED = "Designated"
    HIGHEST_BID = "HighestBid"
    TIE_BREAK = "TieBreak"
    SPEAKER_CONTINUES = "SpeakerContinues"
    FIRST_TURN_RANDOM = "FirstTurnRandom"
    EQUAL_SCHEDULE = "EqualSchedule"


def select_most_important(
    bids: Mapping[str, ThinkOutput],
    previous_speaker: str | None,
    rng: random.Random,
) -> tuple[str, SelectionReason]:
    """Self-selection among speak bids.

    The highest importance among agents bidding to speak wins; equal top bids
    are settled uniformly at random.  With no bidders the previous speaker
    keeps the floor, or, on the first turn, a random agent is picked.
    """
    speakers = [name for name, out in bids.items() if out.action is Action.SPEAK]
    if not speakers:
        if previous_speaker is not None:
            return previous_speaker, SelectionReason.SPEAKER_CONTINUES
        return rng.choice(list(bids)), SelectionReason.FIRST_TURN_RANDOM
    top = max(bids[name].importance for name in speakers)
    leaders = [name for name in speakers if bids[name].importance == top]
    if len(leaders) == 1:
        return leaders[0], SelectionReason.HIGHEST_BID
    return rng.choice(leaders), SelectionReason.TIE_BREAK


def schedule_equal(roster: Sequence[str], rng: random.Random, turn_budget: int) -> list[str]:
    """Speaking order in rounds, each round a fresh random permutation of the roster."""
    if not roster:
        raise ValueError("roster must be nonempty")
    order: list[str] = []
    while len(order) < turn_budget:
        round_ = list(roster)
        rng.shuffle(round_)
        order.extend(round_)
    return order[:turn_budget]


def resolve_addressee(detection: Detection | None, roster: Sequence[str]) -> str | None:
    if detection is None or not detection.is_first_pair_part or not detection.addressee_name:
        return None
    agent = match_roster(detection.addressee_name, roster)
    if agent is None:
        log.warning("addressee %r is not in the roster; falling back to self-selection", detection.addressee_name)
    return agent


@dataclass
class SessionState:
    roster: list[str]
    condition: Condition
    turn_budget: int
    seed: int
    rng: random.Random
    turn_index: int = 0
    current_speaker: str | None = None
    next_speaker: str | None = None
    pending_constraint: str | None = None
    schedule: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.turn_budget < 1:
            raise ValueError("turn_budget must be >= 1")
        if len(self.roster) < 2:
            raise ValueError("a session needs at least two agents")


@dataclass
class Memories:
    history: HistoryWindow
    short_term: dict[str, ShortTermHistory]
    long_term: dict[str, LongTermStore]

    @classmethod
    def create(cls, roster: Sequence[str], k: int, l: int, mode: str = "shared") -> Memories:
        if mode == "shared":
            shared = LongTermStore(retrieval_top_l=l)
            stores = {name: shared for name in roster}
        elif mode == "per_agent":
            stores = {name: LongTermStore(retrieval_top_l=l) for name in roster}
        else:
            raise ConfigurationError(f"unknown long-term memory mode {mode!r}")
        return cls(
            history=HistoryWindow(k),
            short_term={name: ShortTermHistory(name, k) for name in roster},
            long_term=stores,
        )

    def distinct_stores(self) -> list[LongTermStore]:
        seen: dict[int, LongTermStore] = {}
        for store in self.long_term.values():
            seen.setdefault(id(store), store)
        return list(seen.values())


class Session:
    """One conversation under a fixed condition."""

    def __init__(
        self,
        scenario: Scenario,
        condition: Condition | str,
        turn_budget: int,
        seed: int,
        backend: Backend,
        *,
        routing: RoutingTable | None = None,
        history_window_k: int = 5,
        retrieval_top_l: int = 5,
        long_term_mode: str = "shared",
        concurrency: int = 4,
        session_id: str | None = None,
    ) -> None:
        condition = Condition(condition)
        roster = scenario.names
        self.scenario = scenario
        self.backend = backend
        self.routing = routing or RoutingTable()
        self.concurrency = max(1, concurrency)
        self.state = SessionState(
            roster=roster, condition=condition, turn_budget=turn_budget, seed=seed, rng=random.Random(seed)
        )
        if condition is Condition.EQUAL:
            self.state.schedule = schedule_equal(roster, self.state.rng, turn_budget)
        self.memories = Memories.create(roster, history_window_k, retrieval_top_l, long_term_mode)
        self.agents = {
            sheet.name: Agent(
                sheet=sheet,
                setting_text=scenario.setting_text,
                others=tuple(c for c in scenario.characters if c.name != sheet.name),
            )
            for sheet in scenario.characters
        }
        self.transcript = Transcript(
            session_id=session_id or f"{condition.value.lower()}-seed{seed}",
            scenario_title=scenario.title,
            condition=condition.value,
            seed=seed,
            turn_budget=turn_budget,
            roster=list(roster),
            settings={
                "history_window_k": history_window_k,
                "retrieval_top_l": retrieval_top_l,
                "long_term_mode": long_term_mode,
                "rng": "python-random-mt19937",
                "routing": self.routing.to_dict(),
            },
            created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            tool_version=__version__,
        )

    # -- helpers -----------------------------------------------------------

    def _embed(self, texts: Sequence[str]) -> list[list[float]]:
        return self.backend.embed(list(texts))

    def _retrieve_all(self, query: Utterance | None) -> dict[str, list[KnowledgeEntry]]:
        if query is None:
            return {name: [] for name in self.state.roster}
        cache: dict[int, list[KnowledgeEntry]] = {}
        result = {}
        for name in self.state.roster:
            store = self.memories.long_term[name]
            if id(store) not in cache:
                cache[id(store)] = retrieve(store, query.text, self._embed)
            result[name] = cache[id(store)]
        return result

    def _think_all(
        self, history: list[Utterance], knowledge: dict[str, list[KnowledgeEntry]]
    ) -> tuple[dict[str, ThinkOutput], list[str]]:
        roster = self.state.roster

        def one(name: str) -> tuple[ThinkOutput, list[str]]:
            return self.agents[name].think(
                history, self.memories.short_term[name].entries, knowledge[name], self.backend, self.routing
            )

        if self.concurrency > 1:
            with ThreadPoolExecutor(max_workers=min(self.concurrency, len(roster))) as pool:
                results = list(pool.map(one, roster))
        else:
            results = [one(name) for name in roster]
        warnings = [w for _, ws in results for w in ws]
        return {name: out for name, (out, _) in zip(roster, results)}, warnings

    # -- the loop ------------------------------------------------------------

    def step_turn(self) -> TurnRecord:
        st = self.state
        if st.turn_index >= st.turn_budget:
            raise RuntimeError("turn budget exhausted")
        turn = st.turn_index + 1
        history = self.memories.history.entries
        previous = history[-1] if history else None

        designated = st.next_speaker
        constraint = st.pending_constraint if designated is not None else None

        knowledge = self._retrieve_all(previous)
        thinks, warnings = self._think_all(history, knowledge)

        if designated is not None:
            speaker, reason = designated, SelectionReason.DESIGNATED
        elif st.condition is Condition.EQUAL:
            speaker, reason = st.schedule[st.turn_index], SelectionReason.EQUAL_SCHEDULE
        elif st.current_speaker is None:
            speaker, reason = st.rng.choice(st.roster), SelectionReason.FIRST_TURN_RANDOM
        else:
            speaker, reason = select_most_important(thinks, st.current_speaker, st.rng)

        utterance = self.agents[speaker].speak(
            history,
            self.memories.short_term[speaker].entries,
            knowledge[speaker],
            constraint,
            turn,
            self.backend,
            self.routing,
        )

        # End-of-turn commit.
        for name in st.roster:
            entry = utterance.text if name == speaker else thinks[name].thought
            self.memories.short_term[name].append(entry)
        self.memories.history.append(utterance)
        facts = normalize_knowledge(speaker, utterance.text, self.backend, self.routing)
        try:
            entries = build_entries(facts, self._embed, turn, speaker)
        except BackendError as exc:
            msg = f"embedding of normalized knowledge failed at turn {turn}: {exc}"
            log.warning(msg)
            warnings.append(msg)
            entries = []
        for store in self.memories.distinct_stores():
            for entry in entries:
                store.append(entry)

        detection = None
        next_speaker = None
        if st.condition is Condition.CSSN_OR_SS:
            detection, detect_warnings = detect_designation(utterance, st.roster, self.backend, self.routing)
            warnings.extend(detect_warnings)
            next_speaker = resolve_addressee(detection, st.roster)
            if next_speaker == speaker:
                next_speaker = None
        st.next_speaker = next_speaker
        st.pending_constraint = detection.expected_second_pair_part if next_speaker else None
        st.current_speaker = speaker
        st.turn_index = turn

        return TurnRecord(
            turn_index=turn,
            speaker=speaker,
            utterance=utterance,
            think_outputs=thinks,
            selection_reason=reason.value,
            detection=detection,
            constraint_applied=constraint,
            next_speaker=next_speaker,
            knowledge_used=[k.text for k in knowledge[speaker]],
            new_knowledge=[e.text for e in entries],
            warnings=warnings,
        )

    def run(self, on_turn: Callable[[TurnRecord], Any] | None = None) -> Transcript:
        transcript = self.transcript
        try:
            while self.state.turn_index < self.state.turn_budget:
                record = self.step_turn()
                transcript.records.append(record)
                if on_turn is not None:
                    on_turn(record)
        except (BackendError, ConfigurationError) as exc:
            log.error("session %s aborted at turn %d: %s", transcript.session_id, self.state.turn_index + 1, exc)
            transcript.status = "Incomplete"
            transcript.error = f"{type(exc).__name__}: {exc}"
        else:
            transcript.status = "Complete"
        stores = self.memories.distinct_stores()
        transcript.knowledge = stores[0].snapshot() if len(stores) == 1 else {
            name: store.snapshot() for name, store in self.memories.long_term.items()
        }
        return transcript


def run_session(
    scenario: Scenario,
    condition: Condition | str,
    turn_budget: int,
    seed: int,
    backend: Backend,
    **kwargs: Any,
) -> Transcript:
    on_turn = kwargs.pop("on_turn", None)
    return Session(scenario, condition, turn_budget, seed, backend, **kwargs).run(on_turn=on_turn)
