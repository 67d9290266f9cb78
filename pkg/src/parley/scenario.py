"""Scenario and experiment-plan files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

from .agents import CharacterSheet
from .backend import RoutingTable

SCHEMA_VERSION = 1
CONDITIONS = ("EQUAL", "SS", "CSSN_OR_SS")
_LIST_FIELDS = ("objectives", "day_of_incident_actions", "missions")
_TEXT_FIELDS = ("name", "public_profile", "background")


class ScenarioError(ValueError):
    """Validation failure; ``problems`` lists every violation found."""

    def __init__(self, source: str, problems: list[str]) -> None:
        self.problems = problems
        super().__init__(f"{source}: " + "; ".join(problems))


@dataclass(frozen=True)
class Scenario:
    title: str
    setting_text: str
    characters: tuple[CharacterSheet, ...]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.characters]

    def character(self, name: str) -> CharacterSheet:
        for c in self.characters:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "title": self.title,
            "setting_text": self.setting_text,
            "characters": [c.to_dict() for c in self.characters],
        }


def _nonempty_text(value: Any) -> bool:
    return isinstance(value, str) and bool(value.strip())


def validate_scenario(data: Any) -> list[str]:
    if not isinstance(data, dict):
        return ["top level must be an object"]
    problems = []
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        problems.append(f"schema_version: unsupported version {version!r}")
    for key in ("title", "setting_text"):
        if not _nonempty_text(data.get(key)):
            problems.append(f"{key}: required nonempty string")
    chars = data.get("characters")
    if not isinstance(chars, list):
        return problems + ["characters: required list"]
    if len(chars) < 2:
        problems.append(f"characters: need at least 2, got {len(chars)}")
    seen: dict[str, int] = {}
    for i, char in enumerate(chars):
        where = f"characters[{i}]"
        if not isinstance(char, dict):
            problems.append(f"{where}: must be an object")
            continue
        for key in _TEXT_FIELDS:
            if not _nonempty_text(char.get(key)):
                problems.append(f"{where}.{key}: required nonempty string")
        for key in _LIST_FIELDS:
            value = char.get(key)
            if not isinstance(value, list) or not value:
                problems.append(f"{where}.{key}: required nonempty list of strings")
            else:
                for j, item in enumerate(value):
                    if not _nonempty_text(item):
                        problems.append(f"{where}.{key}[{j}]: must be a nonempty string")
        name = char.get("name")
        if _nonempty_text(name):
            key = " ".join(name.split()).casefold()
            if key in seen:
                problems.append(f"{where}.name: duplicate character name {name!r} (also characters[{seen[key]}])")
            else:
                seen[key] = i
    return problems


def scenario_from_dict(data: dict[str, Any], source: str = "<scenario>") -> Scenario:
    problems = validate_scenario(data)
    if problems:
        raise ScenarioError(source, problems)
    return Scenario(
        title=data["title"],
        setting_text=data["setting_text"],
        characters=tuple(
            CharacterSheet(
                name=c["name"].strip(),
                public_profile=c["public_profile"],
                background=c["background"],
                objectives=tuple(c["objectives"]),
                day_of_incident_actions=tuple(c["day_of_incident_actions"]),
                missions=tuple(c["missions"]),
            )
            for c in data["characters"]
        ),
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ScenarioError(str(path), [f"invalid JSON: {exc}"]) from exc
    return scenario_from_dict(data, str(path))


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def fixture_path() -> Path:
    return Path(str(resources.files("parley") / "data" / "lighthouse_reunion.json"))


def load_fixture() -> Scenario:
    return load_scenario(fixture_path())


@dataclass(frozen=True)
class SessionConfig:
    """Everything needed to run one session."""

    session_id: str
    scenario_path: str
    condition: str
    turn_budget: int
    seed: int
    run_index: int = 0
    history_window_k: int = 5
    retrieval_top_l: int = 5
    long_term_mode: str = "shared"
    routing: dict[str, Any] = field(default_factory=dict)
    backend: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "scenario_path": self.scenario_path,
            "condition": self.condition,
            "turn_budget": self.turn_budget,
            "seed": self.seed,
            "run_index": self.run_index,
            "history_window_k": self.history_window_k,
            "retrieval_top_l": self.retrieval_top_l,
            "long_term_mode": self.long_term_mode,
            "routing": self.routing,
            "backend": self.backend,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SessionConfig:
        condition = data["condition"]
        seed = int(data["seed"])
        return cls(
            session_id=data.get("session_id") or f"{condition.lower()}-seed{seed}",
            scenario_path=data["scenario_path"],
            condition=condition,
            turn_budget=int(data["turn_budget"]),
            seed=seed,
            run_index=int(data.get("run_index", 0)),
            history_window_k=int(data.get("history_window_k", 5)),
            retrieval_top_l=int(data.get("retrieval_top_l", 5)),
            long_term_mode=data.get("long_term_mode", "shared"),
            routing=data.get("routing") or {},
            backend=data.get("backend") or {},
        )


@dataclass(frozen=True)
class ExperimentPlan:
    scenario_path: str
    conditions: tuple[str, ...]
    runs_per_condition: int
    turn_budget: int
    base_seed: int = 0
    history_window_k: int = 5
    retrieval_top_l: int = 5
    long_term_mode: str = "shared"
    routing: dict[str, Any] = field(default_factory=dict)
    backend: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario_path": self.scenario_path,
            "conditions": list(self.conditions),
            "runs_per_condition": self.runs_per_condition,
            "turn_budget": self.turn_budget,
            "base_seed": self.base_seed,
            "history_window_k": self.history_window_k,
            "retrieval_top_l": self.retrieval_top_l,
            "long_term_mode": self.long_term_mode,
            "routing": self.routing,
            "backend": self.backend,
        }


def validate_plan(data: Any) -> list[str]:
    if not isinstance(data, dict):
        return ["top level must be an object"]
    problems = []
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        problems.append(f"schema_version: unsupported version {version!r}")
    if not _nonempty_text(data.get("scenario_path")):
        problems.append("scenario_path: required nonempty string")
    conditions = data.get("conditions")
    if not isinstance(conditions, list) or not conditions:
        problems.append("conditions: required nonempty list")
    else:
        for c in conditions:
            if c not in CONDITIONS:
                problems.append(f"conditions: unknown condition {c!r} (expected one of {', '.join(CONDITIONS)})")
        if len(set(conditions)) != len(conditions):
            problems.append("conditions: duplicates not allowed")
    for key, minimum in (("runs_per_condition", 1), ("turn_budget", 1), ("history_window_k", 1), ("retrieval_top_l", 1)):
        value = data.get(key, 5 if key in ("history_window_k", "retrieval_top_l") else None)
        if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
            problems.append(f"{key}: required integer >= {minimum}")
    if not isinstance(data.get("base_seed", 0), int):
        problems.append("base_seed: must be an integer")
    if data.get("long_term_mode", "shared") not in ("shared", "per_agent"):
        problems.append("long_term_mode: must be 'shared' or 'per_agent'")
    try:
        RoutingTable.from_dict(data.get("routing"))
    except (ValueError, TypeError) as exc:
        problems.append(f"routing: {exc}")
    return problems


def load_plan(path: str | Path) -> ExperimentPlan:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(str(path), [f"invalid JSON: {exc}"]) from exc
    problems = validate_plan(data)
    if problems:
        raise ScenarioError(str(path), problems)
    base = path.parent

    def _resolve(p: str) -> str:
        candidate = Path(p)
        return str(candidate if candidate.is_absolute() else (base / candidate).resolve())

    backend = dict(data.get("backend") or {})
    for key in ("script_path", "api_key_file"):
        if backend.get(key):
            backend[key] = _resolve(backend[key])
    return ExperimentPlan(
        scenario_path=_resolve(data["scenario_path"]),
        conditions=tuple(data["conditions"]),
        runs_per_condition=data["runs_per_condition"],
        turn_budget=data["turn_budget"],
        base_seed=data.get("base_seed", 0),
        history_window_k=data.get("history_window_k", 5),
        retrieval_top_l=data.get("retrieval_top_l", 5),
        long_term_mode=data.get("long_term_mode", "shared"),
        routing=data.get("routing") or {},
        backend=backend,
    )


def expand_plan(plan: ExperimentPlan) -> list[SessionConfig]:
    """One config per (condition, run), condition-major.

    Seeds are ``base_seed`` plus the session's position in this ordering, so
    no two sessions of a plan share a seed.
    """
    configs = []
    for c, condition in enumerate(plan.conditions):
        for run in range(plan.runs_per_condition):
            seed = plan.base_seed + c * plan.runs_per_condition + run
            configs.append(
                SessionConfig(
                    session_id=f"{condition.lower()}-run{run:03d}",
                    scenario_path=plan.scenario_path,
                    condition=condition,
                    turn_budget=plan.turn_budget,
                    seed=seed,
                    run_index=run,
                    history_window_k=plan.history_window_k,
                    retrieval_top_l=plan.retrieval_top_l,
                    long_term_mode=plan.long_term_mode,
                    routing=plan.routing,
                    backend=plan.backend,
                )
            )
    return configs


def with_seed(plan: ExperimentPlan, base_seed: int) -> ExperimentPlan:
    return replace(plan, base_seed=base_seed)
