from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from parley.scenario import Scenario, load_fixture

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def scenario() -> Scenario:
    return load_fixture()


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def think_line(action: str, importance: int, thought: str = "plan") -> str:
    return f"action: {action}\nimportance: {importance}\nthought: {thought}"


def random_script(names: list[str], turns: int, rng: random.Random, *, p_designate: float = 0.5) -> dict:
    """A scripted backend script with random bids and random designations.

    Every queue holds exactly enough entries for ``turns`` turns.
    """
    think = {}
    for name in names:
        entries = []
        for _ in range(turns):
            if rng.random() < 0.4:
                entries.append(think_line("listen", rng.randint(0, 9), f"{name} listens"))
            else:
                entries.append(think_line("speak", rng.randint(0, 9), f"{name} wants to talk"))
        think[name] = entries
    speak = {name: [f"{name} says line {i}." for i in range(turns)] for name in names}
    detect = []
    for _ in range(turns):
        r = rng.random()
        if r < p_designate:
            who = rng.choice(names + ["everyone", "Nobody Known"])
            kind = rng.choice(["WhQuestion", "YesNoQuestion", "Addressing", "Request", "Invitation"])
            detect.append(f"first_pair_part: yes\ntype: {kind}\naddressee: {who}")
        else:
            detect.append("first_pair_part: no\ntype: None\naddressee: none")
    normalize = [f"- fact {i} a\n- fact {i} b" if rng.random() < 0.7 else "" for i in range(turns)]
    return {
        "chat": {"Think": think, "Speak": speak, "Detect": {"*": detect}, "Normalize": {"*": normalize}},
        "embedding_dim": 6,
    }


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2), encoding="utf-8")
    return path


# -- acceptance reporting -------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion; the outcome is printed in the terminal summary."""

    def register(label: str, detail: str = "") -> None:
        _ACCEPTANCE[request.node.nodeid] = (label, detail)

    return register


def pytest_runtest_logreport(report):
    if report.nodeid in _ACCEPTANCE and report.when == "call":
        label, detail = _ACCEPTANCE[report.nodeid][:2]
        _ACCEPTANCE[report.nodeid] = (label, detail, report.outcome.upper())


def pytest_terminal_summary(terminalreporter):
    rows = [v for v in _ACCEPTANCE.values() if len(v) == 3]
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for label, detail, outcome in sorted(rows):
        verdict = {"PASSED": "PASS", "FAILED": "FAIL", "SKIPPED": "SKIP"}.get(outcome, outcome)
        terminalreporter.write_line(f"{verdict:4}  {label}" + (f"  ({detail})" if detail else ""))
