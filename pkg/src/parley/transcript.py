"""Transcript records and their JSONL persistence.

File layout: a ``header`` line, one ``turn`` line per completed turn, and a
``footer`` line carrying status and the knowledge-store snapshot.  Turns are
appended as they complete, so a crashed session still leaves a readable
(footer-less, hence incomplete) file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, IO

from .agents import Detection, ThinkOutput, Utterance

VOLATILE_KEYS = frozenset({"created_at", "latency_ms", "tool_version"})


class TranscriptFormatError(ValueError):
    def __init__(self, path: str, line: int, message: str) -> None:
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass
class TurnRecord:
    turn_index: int
    speaker: str
    utterance: Utterance
    think_outputs: dict[str, ThinkOutput]
    selection_reason: str
    detection: Detection | None = None
    constraint_applied: str | None = None
    next_speaker: str | None = None
    knowledge_used: list[str] = field(default_factory=list)
    new_knowledge: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "turn",
            "turn_index": self.turn_index,
            "speaker": self.speaker,
            "utterance": self.utterance.to_dict(),
            "think_outputs": {k: v.to_dict() for k, v in self.think_outputs.items()},
            "selection_reason": self.selection_reason,
            "detection": self.detection.to_dict() if self.detection else None,
            "constraint_applied": self.constraint_applied,
            "next_speaker": self.next_speaker,
            "knowledge_used": self.knowledge_used,
            "new_knowledge": self.new_knowledge,
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TurnRecord:
        return cls(
            turn_index=int(data["turn_index"]),
            speaker=data["speaker"],
            utterance=Utterance.from_dict(data["utterance"]),
            think_outputs={k: ThinkOutput.from_dict(v) for k, v in data["think_outputs"].items()},
            selection_reason=data["selection_reason"],
            detection=Detection.from_dict(data["detection"]) if data.get("detection") else None,
            constraint_applied=data.get("constraint_applied"),
            next_speaker=data.get("next_speaker"),
            knowledge_used=list(data.get("knowledge_used", [])),
            new_knowledge=list(data.get("new_knowledge", [])),
            warnings=list(data.get("warnings", [])),
        )


@dataclass
class Transcript:
    session_id: str
    scenario_title: str
    condition: str
    seed: int
    turn_budget: int
    roster: list[str] = field(default_factory=list)
    settings: dict[str, Any] = field(default_factory=dict)
    records: list[TurnRecord] = field(default_factory=list)
    knowledge: Any = field(default_factory=list)
    status: str = "Incomplete"
    error: str | None = None
    call_log_ref: str | None = None
    created_at: str = ""
    tool_version: str = ""

    @property
    def complete(self) -> bool:
        return self.status == "Complete" and len(self.records) == self.turn_budget

    def header(self) -> dict[str, Any]:
        return {
            "type": "header",
            "session_id": self.session_id,
            "scenario_title": self.scenario_title,
            "condition": self.condition,
            "seed": self.seed,
            "turn_budget": self.turn_budget,
            "roster": self.roster,
            "settings": self.settings,
            "call_log_ref": self.call_log_ref,
            "created_at": self.created_at,
            "tool_version": self.tool_version,
        }

    def footer(self) -> dict[str, Any]:
        return {
            "type": "footer",
            "status": self.status,
            "error": self.error,
            "turns_completed": len(self.records),
            "knowledge_store": self.knowledge,
        }

    def lines(self) -> list[dict[str, Any]]:
        return [self.header(), *(r.to_dict() for r in self.records), self.footer()]


def dump_line(obj: dict[str, Any]) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n"


class TranscriptWriter:
    """Streams a transcript to disk turn by turn."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._fh: IO[str] | None = None

    def open(self, transcript: Transcript) -> None:
        self._fh = open(self.path, "w", encoding="utf-8")
        self._fh.write(dump_line(transcript.header()))
        self._fh.flush()

    def write_turn(self, record: TurnRecord) -> None:
        assert self._fh is not None
        self._fh.write(dump_line(record.to_dict()))
        self._fh.flush()

    def close(self, transcript: Transcript) -> None:
        assert self._fh is not None
        self._fh.write(dump_line(transcript.footer()))
        self._fh.close()
        self._fh = None


def write_transcript(transcript: Transcript, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in transcript.lines():
            fh.write(dump_line(line))


def read_transcript(path: str | Path) -> Transcript:
    path = Path(path)
    header = None
    footer = None
    records: list[TurnRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise TranscriptFormatError(str(path), lineno, f"invalid JSON ({exc.msg})") from exc
            kind = obj.get("type") if isinstance(obj, dict) else None
            try:
                if kind == "header" and header is None and lineno == 1:
                    header = obj
                elif kind == "turn" and header is not None and footer is None:
                    records.append(TurnRecord.from_dict(obj))
                elif kind == "footer" and header is not None and footer is None:
                    footer = obj
                else:
                    raise TranscriptFormatError(str(path), lineno, f"unexpected line of type {kind!r}")
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, TranscriptFormatError):
                    raise
                raise TranscriptFormatError(str(path), lineno, f"malformed {kind} line: {exc!r}") from exc
    if header is None:
        raise TranscriptFormatError(str(path), 1, "missing header line")
    t = Transcript(
        session_id=header["session_id"],
        scenario_title=header["scenario_title"],
        condition=header["condition"],
        seed=int(header["seed"]),
        turn_budget=int(header["turn_budget"]),
        roster=list(header.get("roster", [])),
        settings=header.get("settings", {}),
        records=records,
        call_log_ref=header.get("call_log_ref"),
        created_at=header.get("created_at", ""),
        tool_version=header.get("tool_version", ""),
    )
    if footer is None:
        t.status = "Incomplete"
        t.error = "missing footer (session interrupted)"
    else:
        t.status = footer["status"]
        t.error = footer.get("error")
        t.knowledge = footer.get("knowledge_store", [])
    return t


def canonical(obj: Any) -> Any:
    """Drop volatile fields (timestamps, latencies, version) recursively."""
    if isinstance(obj, dict):
        return {k: canonical(v) for k, v in sorted(obj.items()) if k not in VOLATILE_KEYS}
    if isinstance(obj, list):
        return [canonical(v) for v in obj]
    return obj


def canonical_lines(path: str | Path) -> list[str]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            if raw.strip():
                out.append(json.dumps(canonical(json.loads(raw)), ensure_ascii=False, sort_keys=True))
    return out


def render(transcript: Transcript, verbose: bool = False) -> str:
    """Plain-text rendering for human review."""
    out = [
        f"# {transcript.scenario_title}",
        f"session {transcript.session_id} | condition {transcript.condition} | seed {transcript.seed} | "
        f"{len(transcript.records)}/{transcript.turn_budget} turns | {transcript.status}",
        "",
    ]
    for r in transcript.records:
        marker = f" {r.constraint_applied}" if r.constraint_applied else ""
        out.append(f"Turn {r.turn_index} [{r.selection_reason}] {r.speaker}:{marker}")
        out.append(f"    {r.utterance.text}")
        if r.detection and r.detection.is_first_pair_part:
            target = r.detection.addressee_name or "(no single addressee)"
            out.append(f"    >> first pair part: {r.detection.pair_type.value} -> {target}")
        if verbose:
            for name, t in r.think_outputs.items():
                out.append(f"    . {name}: {t.action.value} ({t.importance}) {t.thought}")
        out.append("")
    if transcript.error:
        out.append(f"!! {transcript.error}")
    return "\n".join(out).rstrip() + "\n"
