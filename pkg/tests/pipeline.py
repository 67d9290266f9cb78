"""Builders for end-to-end CLI runs on scripted backends."""

from __future__ import annotations

import random
from pathlib import Path

from parley.scenario import fixture_path, load_fixture

from conftest import random_script, write_json

CATEGORIES = ["IgnoreQuestion", "Repetition", "TopicChangeError", "LackOfInformation", "IgnoreExpectation"]


def judge_script(n_transcripts: int, turn_budget: int, rng: random.Random) -> dict:
    breakdowns, scores = [], []
    for _ in range(n_transcripts):
        lines = []
        for t in range(1, turn_budget + 1):
            if rng.random() < 0.3:
                lines.append(f"turn {t}: B {rng.choice(CATEGORIES)}")
            else:
                lines.append(f"turn {t}: NB")
        breakdowns.append("\n".join(lines))
        scores.append(
            f"coherence: {rng.randint(1, 5)}\ncooperativeness: {rng.randint(1, 5)}\ndiversity: {rng.randint(1, 5)}"
        )
    return {"chat": {"JudgeBreakdown": {"*": breakdowns}, "JudgeScores": {"*": scores}}}


def write_pipeline_inputs(root: Path, *, runs: int = 4, turn_budget: int = 10, seed: int = 0) -> dict[str, Path]:
    """Plan, session script and judge script for a 3-condition plan."""
    rng = random.Random(seed)
    root.mkdir(parents=True, exist_ok=True)
    names = load_fixture().names
    session_script = write_json(root / "session_script.json", random_script(names, turn_budget, rng))
    judge = write_json(root / "judge_script.json", judge_script(3 * runs, turn_budget, rng))
    plan = write_json(
        root / "plan.json",
        {
            "schema_version": 1,
            "scenario_path": str(fixture_path()),
            "conditions": ["EQUAL", "SS", "CSSN_OR_SS"],
            "runs_per_condition": runs,
            "turn_budget": turn_budget,
            "base_seed": 7,
            "backend": {"kind": "scripted", "script_path": "session_script.json"},
        },
    )
    return {"plan": plan, "session_script": session_script, "judge_script": judge}
