import random
from collections import Counter

import pytest

from parley.agents import Action, Detection, PairType, ThinkOutput
from parley.backend import ScriptedBackend
from parley.engine import (
    Condition,
    SelectionReason,
    Session,
    resolve_addressee,
    run_session,
    schedule_equal,
    select_most_important,
)
from parley.scenario import Scenario

from conftest import random_script, think_line

LISTEN = ThinkOutput("", Action.LISTEN, 0)


def speak(i):
    return ThinkOutput("go", Action.SPEAK, i)


class TestSelectMostImportant:
    def test_unique_argmax(self):
        bids = {"A": LISTEN, "B": speak(7), "C": speak(4)}
        assert select_most_important(bids, "A", random.Random(0)) == ("B", SelectionReason.HIGHEST_BID)

    def test_single_bidder(self):
        bids = {"A": LISTEN, "B": LISTEN, "C": speak(0)}
        assert select_most_important(bids, "A", random.Random(0))[0] == "C"

    def test_listener_importance_ignored(self):
        bids = {"A": ThinkOutput("", Action.LISTEN, 9), "B": speak(1)}
        assert select_most_important(bids, None, random.Random(0))[0] == "B"

    def test_all_listen_previous_continues(self):
        bids = {"A": LISTEN, "B": LISTEN, "C": LISTEN}
        assert select_most_important(bids, "C", random.Random(0)) == ("C", SelectionReason.SPEAKER_CONTINUES)

    def test_all_listen_first_turn_random(self):
        bids = {"A": LISTEN, "B": LISTEN, "C": LISTEN}
        picks = {select_most_important(bids, None, random.Random(s))[0] for s in range(50)}
        assert picks == {"A", "B", "C"}
        assert select_most_important(bids, None, random.Random(0))[1] is SelectionReason.FIRST_TURN_RANDOM

    def test_higher_of_two_bidders(self):
        bids = {
            "Emi Kurosawa": speak(8),
            "Daiki Sato": LISTEN,
            "Haruka Mizuno": speak(5),
            "Kenji Arai": LISTEN,
        }
        assert select_most_important(bids, "Daiki Sato", random.Random(0))[0] == "Emi Kurosawa"

    def test_tie_frequencies(self):
        # 1000 seeds; a fair coin stays inside [0.45, 0.55] with probability > 0.998 (|z| < 3.16).
        bids = {"A": LISTEN, "B": speak(5), "C": speak(5)}
        counts = Counter()
        for seed in range(1000):
            who, reason = select_most_important(bids, "A", random.Random(seed))
            assert reason is SelectionReason.TIE_BREAK
            counts[who] += 1
        assert set(counts) == {"B", "C"}
        for who in "BC":
            assert 0.45 <= counts[who] / 1000 <= 0.55


class TestScheduleEqual:
    def test_rounds(self):
        roster = ["A", "B", "C", "D"]
        s = schedule_equal(roster, random.Random(3), 10)
        assert len(s) == 10
        assert sorted(s[:4]) == roster and sorted(s[4:8]) == roster
        assert Counter(s[:8]) == {n: 2 for n in roster}
        assert len(set(s[8:])) == 2

    def test_single_agent(self):
        assert schedule_equal(["A"], random.Random(0), 3) == ["A", "A", "A"]

    def test_deterministic(self):
        assert schedule_equal(["A", "B"], random.Random(5), 4) == schedule_equal(["A", "B"], random.Random(5), 4)

    def test_empty_roster(self):
        with pytest.raises(ValueError):
            schedule_equal([], random.Random(0), 3)

    def test_rounds_are_uniform_permutations(self):
        counts = Counter(tuple(schedule_equal(["A", "B", "C"], random.Random(s), 3)) for s in range(6000))
        assert len(counts) == 6
        assert all(850 <= c <= 1150 for c in counts.values())


class TestResolveAddressee:
    roster = ["Daiki Sato", "Emi Kurosawa", "Haruka Mizuno", "Kenji Arai"]

    def det(self, name):
        return Detection(True, PairType.WH_QUESTION, name, "(response)")

    def test_exact(self):
        assert resolve_addressee(self.det("Daiki Sato"), self.roster) == "Daiki Sato"

    def test_normalized(self):
        assert resolve_addressee(self.det("DAIKI  SATO "), self.roster) == "Daiki Sato"

    def test_everyone(self):
        assert resolve_addressee(self.det("everyone"), self.roster) is None

    def test_no_fuzzy_matching(self):
        assert resolve_addressee(self.det("Daiki"), self.roster) is None

    def test_none(self):
        assert resolve_addressee(None, self.roster) is None
        assert resolve_addressee(Detection(), self.roster) is None


def two_agent(scenario):
    return Scenario(scenario.title, scenario.setting_text, scenario.characters[:2])


def simple_script(names, turns, think=None, detect=None):
    think = think or {n: [think_line("listen", 0)] * turns for n in names}
    return {
        "chat": {
            "Think": think,
            "Speak": {n: [f"{n} line {i}" for i in range(turns)] for n in names},
            "Detect": {"*": detect or ["first_pair_part: no"] * turns},
            "Normalize": {"*": ["- a fact"] * turns},
        }
    }


class TestStepTurn:
    def session(self, scenario, script, condition=Condition.CSSN_OR_SS, budget=3, seed=0):
        return Session(scenario, condition, budget, seed, ScriptedBackend.from_dict(script), concurrency=1)

    def test_designated_speaker_wins(self, scenario):
        names = scenario.names
        s = self.session(scenario, simple_script(names, 2))
        s.state.current_speaker = names[0]
        s.state.next_speaker = names[1]
        s.state.pending_constraint = "(response)"
        rec = s.step_turn()
        assert rec.speaker == names[1]
        assert rec.selection_reason == "Designated"
        assert rec.constraint_applied == "(response)"

    def test_highest_bid(self, scenario):
        a, b, c, d = scenario.names
        think = {
            a: [think_line("listen", 0)],
            b: [think_line("speak", 7)],
            c: [think_line("speak", 4)],
            d: [think_line("listen", 9)],
        }
        s = self.session(scenario, simple_script(scenario.names, 1, think=think))
        s.state.current_speaker = c
        rec = s.step_turn()
        assert (rec.speaker, rec.selection_reason) == (b, "HighestBid")

    def test_all_listen_continues(self, scenario):
        s = self.session(scenario, simple_script(scenario.names, 1))
        s.state.current_speaker = scenario.names[2]
        rec = s.step_turn()
        assert (rec.speaker, rec.selection_reason) == (scenario.names[2], "SpeakerContinues")

    def test_memory_updates(self, scenario):
        names = scenario.names
        think = {n: [think_line("listen", 0, f"{n} thinks")] for n in names}
        s = self.session(scenario, simple_script(names, 1, think=think), budget=1)
        rec = s.step_turn()
        for n in names:
            expected = rec.utterance.text if n == rec.speaker else f"{n} thinks"
            assert s.memories.short_term[n].entries == [expected]
        assert s.memories.history.entries == [rec.utterance]
        assert [e.text for e in s.memories.long_term[names[0]].entries] == ["a fact"]
        assert rec.new_knowledge == ["a fact"]

    def test_detection_sets_next_speaker(self, scenario):
        names = scenario.names
        detect = [f"first_pair_part: yes\ntype: WhQuestion\naddressee: {names[3]}", "first_pair_part: no"]
        s = self.session(scenario, simple_script(names, 2, detect=detect), budget=2)
        s.state.current_speaker = names[0]
        rec1 = s.step_turn()
        assert rec1.speaker == names[0] and rec1.next_speaker == names[3]
        assert s.state.next_speaker == names[3]
        rec2 = s.step_turn()
        assert rec2.speaker == names[3] and rec2.constraint_applied == "(response)"

    def test_self_address_ignored(self, scenario):
        names = scenario.names
        detect = [f"first_pair_part: yes\ntype: Addressing\naddressee: {names[0]}"]
        s = self.session(scenario, simple_script(names, 1, detect=detect), budget=1)
        s.state.current_speaker = names[0]
        rec = s.step_turn()
        assert rec.speaker == names[0]
        assert rec.detection.addressee_name == names[0]
        assert rec.next_speaker is None and s.state.next_speaker is None

    def test_unresolvable_addressee(self, scenario):
        names = scenario.names
        detect = ["first_pair_part: yes\ntype: WhQuestion\naddressee: Sayaka Oda"]
        s = self.session(scenario, simple_script(names, 1, detect=detect), budget=1)
        rec = s.step_turn()
        assert rec.next_speaker is None

    def test_budget_guard(self, scenario):
        s = self.session(scenario, simple_script(scenario.names, 1), budget=1)
        s.step_turn()
        with pytest.raises(RuntimeError):
            s.step_turn()


class TestRunSession:
    def test_single_turn_two_agents(self, scenario):
        sc = two_agent(scenario)
        for condition in Condition:
            t = run_session(sc, condition, 1, 0, ScriptedBackend.from_dict(simple_script(sc.names, 1)))
            assert len(t.records) == 1 and t.status == "Complete"
            assert t.records[0].selection_reason in ("FirstTurnRandom", "EqualSchedule")

    def test_ss_disables_detection(self, scenario):
        script = random_script(scenario.names, 10, random.Random(7), p_designate=1.0)
        t = run_session(scenario, Condition.SS, 10, 7, ScriptedBackend.from_dict(script))
        assert len(t.records) == 10
        assert all(r.selection_reason != "Designated" and r.detection is None for r in t.records)

    def test_equal_counts(self, scenario):
        script = random_script(scenario.names, 8, random.Random(1))
        t = run_session(scenario, Condition.EQUAL, 8, 1, ScriptedBackend.from_dict(script))
        assert Counter(r.speaker for r in t.records) == {n: 2 for n in scenario.names}
        assert all(r.selection_reason == "EqualSchedule" for r in t.records)

    def test_every_agent_gets_one_short_term_append_per_turn(self, scenario):
        script = random_script(scenario.names, 7, random.Random(3))
        s = Session(scenario, "CSSN_OR_SS", 7, 3, ScriptedBackend.from_dict(script), history_window_k=5)
        s.run()
        for n in scenario.names:
            assert s.memories.short_term[n].total_appends == 7
            assert len(s.memories.short_term[n]) == 5

    def test_backend_exhaustion_gives_incomplete_transcript(self, scenario):
        script = random_script(scenario.names, 3, random.Random(0))
        t = run_session(scenario, Condition.SS, 6, 0, ScriptedBackend.from_dict(script))
        assert t.status == "Incomplete"
        assert len(t.records) == 3
        assert "ScriptExhaustedError" in t.error

    def test_streaming_callback(self, scenario):
        script = random_script(scenario.names, 4, random.Random(2))
        seen = []
        t = run_session(scenario, "SS", 4, 2, ScriptedBackend.from_dict(script), on_turn=seen.append)
        assert seen == t.records

    def test_concurrent_thinking_matches_sequential(self, scenario):
        script = random_script(scenario.names, 10, random.Random(11))
        seq = run_session(scenario, "CSSN_OR_SS", 10, 11, ScriptedBackend.from_dict(script), concurrency=1)
        par = run_session(scenario, "CSSN_OR_SS", 10, 11, ScriptedBackend.from_dict(script), concurrency=4)
        assert [r.to_dict() for r in seq.records] == [r.to_dict() for r in par.records]

    def test_per_agent_long_term_mode(self, scenario):
        script = random_script(scenario.names, 4, random.Random(5))
        s = Session(scenario, "SS", 4, 5, ScriptedBackend.from_dict(script), long_term_mode="per_agent")
        t = s.run()
        stores = s.memories.distinct_stores()
        assert len(stores) == 4
        assert set(t.knowledge) == set(scenario.names)

    def test_needs_two_agents(self, scenario):
        sc = Scenario(scenario.title, scenario.setting_text, scenario.characters[:1])
        with pytest.raises(ValueError):
            Session(sc, "SS", 1, 0, ScriptedBackend())

    def test_retrieval_uses_previous_utterance(self, scenario):
        names = scenario.names
        seen = []

        class Spy(ScriptedBackend):
            def embed(self, texts):
                seen.append(list(texts))
                return super().embed(texts)

        s = Session(scenario, "SS", 2, 0, Spy(chat=simple_script(names, 2)["chat"]), concurrency=1)
        s.run()
        first = s.transcript.records[0].utterance.text
        # turn 1: embed facts; turn 2: embed query (u_{t-1}) once, then facts
        assert seen[0] == ["a fact"]
        assert seen[1] == [first]
