"""Command-line interface: run experiments, evaluate transcripts, compute
statistics, replay sessions, and compare output directories."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import __version__
from .backend import (
    AuthenticationError,
    Backend,
    ConfigurationError,
    HttpBackend,
    RoutingTable,
    ScriptedBackend,
    backend_from_config,
)
from .engine import Session
from .evaluation import (
    METRICS,
    EvaluationError,
    aggregate_condition,
    aggregate_csv,
    analyze_breakdowns,
    analyze_breakdowns_per_turn,
    count_breakdowns,
    judge_transcript,
)
from .scenario import ScenarioError, SessionConfig, expand_plan, load_plan, load_scenario, with_seed
from .stats import stats_report
from .transcript import (
    TranscriptFormatError,
    TranscriptWriter,
    canonical,
    canonical_lines,
    read_transcript,
    render,
)

log = logging.getLogger("parley")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2
EVALUABLE_THRESHOLD = 0.9


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _backend_override(spec: str | None, base: dict[str, Any]) -> dict[str, Any]:
    if not spec:
        return base
    if spec == "live":
        return {**base, "kind": "live"}
    if spec.startswith("scripted:"):
        return {"kind": "scripted", "script_path": str(Path(spec.split(":", 1)[1]).resolve())}
    raise ValueError(f"--backend must be 'live' or 'scripted:<path>', got {spec!r}")


# -- run ----------------------------------------------------------------------


def run_one(config: SessionConfig, scenario, out_dir: Path, think_concurrency: int = 4) -> dict[str, Any]:
    entry = {
        "session_id": config.session_id,
        "condition": config.condition,
        "run_index": config.run_index,
        "seed": config.seed,
        "path": f"{config.session_id}.jsonl",
        "call_log": f"{config.session_id}.calls.jsonl",
    }
    backend: Backend | None = None
    try:
        backend = backend_from_config(config.backend)
        session = Session(
            scenario,
            config.condition,
            config.turn_budget,
            config.seed,
            backend,
            routing=RoutingTable.from_dict(config.routing),
            history_window_k=config.history_window_k,
            retrieval_top_l=config.retrieval_top_l,
            long_term_mode=config.long_term_mode,
            concurrency=think_concurrency,
            session_id=config.session_id,
        )
        session.transcript.call_log_ref = entry["call_log"]
        writer = TranscriptWriter(out_dir / entry["path"])
        writer.open(session.transcript)
        try:
            transcript = session.run(on_turn=writer.write_turn)
        finally:
            writer.close(session.transcript)
        entry["status"] = transcript.status
        entry["turns"] = len(transcript.records)
        entry["error"] = transcript.error
    except Exception as exc:  # one broken session must not sink the batch
        log.exception("session %s failed", config.session_id)
        entry.update(status="Failed", turns=0, error=f"{type(exc).__name__}: {exc}")
    finally:
        if backend is not None:
            backend.call_log.write_jsonl(out_dir / entry["call_log"])
            if isinstance(backend, HttpBackend):
                backend.close()
    return entry


def cmd_run(args: argparse.Namespace) -> int:
    try:
        plan = load_plan(args.plan)
        if args.seed_override is not None:
            plan = with_seed(plan, args.seed_override)
        backend_cfg = _backend_override(args.backend, plan.backend)
        plan = type(plan)(**{**plan.__dict__, "backend": backend_cfg})
        scenario = load_scenario(plan.scenario_path)
    except (ScenarioError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if backend_cfg.get("kind") == "live":
        try:
            probe = backend_from_config(backend_cfg)
            assert isinstance(probe, HttpBackend)
            probe.verify()
            probe.close()
        except AuthenticationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    elif not Path(backend_cfg.get("script_path", "")).is_file():
        print(f"error: script file not found: {backend_cfg.get('script_path')}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    configs = expand_plan(plan)
    workers = max(1, args.concurrency)
    if workers == 1:
        entries = [run_one(c, scenario, out_dir) for c in configs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(lambda c: run_one(c, scenario, out_dir), configs))

    complete = sum(1 for e in entries if e["status"] == "Complete")
    manifest = {
        "tool_version": __version__,
        "created_at": _now(),
        "plan": plan.to_dict(),
        "sessions": entries,
        "counts": {"total": len(entries), "complete": complete, "failed": len(entries) - complete},
    }
    _write_json(out_dir / "manifest.json", manifest)
    print(f"{complete}/{len(entries)} sessions complete -> {out_dir}")
    return EXIT_OK if complete == len(entries) else EXIT_PARTIAL


# -- evaluate -----------------------------------------------------------------


def cmd_evaluate(args: argparse.Namespace) -> int:
    paths = sorted(glob.glob(args.transcripts))
    paths = [p for p in paths if not p.endswith(".calls.jsonl")]
    if not paths:
        print(f"error: no transcripts match {args.transcripts!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        base_cfg: dict[str, Any] = {}
        routing = RoutingTable()
        if args.plan:
            plan = load_plan(args.plan)
            base_cfg, routing = plan.backend, RoutingTable.from_dict(plan.routing)
        backend_cfg = _backend_override(args.backend, base_cfg)
        if not backend_cfg:
            raise ValueError("no backend configured; pass --backend or --plan")
        backend = backend_from_config(backend_cfg)
    except (ScenarioError, ValueError, FileNotFoundError, KeyError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(args.out)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    analyze = analyze_breakdowns_per_turn if args.per_turn else analyze_breakdowns
    results: list[dict[str, Any]] = []
    excluded: list[dict[str, str]] = []
    for path in paths:
        try:
            transcript = read_transcript(path)
            annotations = analyze(transcript, backend, routing)
            scores = judge_transcript(transcript, backend, routing)
        except (TranscriptFormatError, EvaluationError) as exc:
            log.warning("excluding %s: %s", path, exc)
            excluded.append({"path": path, "reason": str(exc)})
            continue
        except AuthenticationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except Exception as exc:
            log.warning("excluding %s: %s", path, exc)
            excluded.append({"path": path, "reason": f"{type(exc).__name__}: {exc}"})
            continue
        sid = transcript.session_id
        with open(out_dir / "annotations" / f"{sid}.jsonl", "w", encoding="utf-8") as fh:
            for a in annotations:
                fh.write(json.dumps({"session_id": sid, **a.to_dict()}, sort_keys=True) + "\n")
        results.append(
            {
                "session_id": sid,
                "condition": transcript.condition,
                "turn_budget": transcript.turn_budget,
                "breakdown_count": count_breakdowns(annotations),
                "categories": [a.category.value for a in annotations if a.category],
                **scores.to_dict(),
            }
        )

    with open(out_dir / "scores.jsonl", "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(
                json.dumps(
                    {k: r[k] for k in ("session_id", "condition", "coherence", "cooperativeness", "diversity", "breakdown_count")},
                    sort_keys=True,
                )
                + "\n"
            )
    conditions = sorted({r["condition"] for r in results})
    aggregates = [
        aggregate_condition([r for r in results if r["condition"] == c], c) for c in conditions
    ]
    for agg in aggregates:
        cats: dict[str, int] = {}
        for r in results:
            if r["condition"] == agg["condition"]:
                for cat in r["categories"]:
                    cats[cat] = cats.get(cat, 0) + 1
        agg["breakdown_categories"] = dict(sorted(cats.items()))
    fraction = len(results) / len(paths)
    report = {
        "tool_version": __version__,
        "total": len(paths),
        "evaluated": len(results),
        "excluded": excluded,
        "evaluable_fraction": fraction,
        "meets_evaluable_threshold": fraction >= EVALUABLE_THRESHOLD,
        "conditions": aggregates,
    }
    _write_json(out_dir / "aggregate.json", report)
    (out_dir / "aggregate.csv").write_text(aggregate_csv(aggregates), encoding="utf-8")
    print(f"evaluated {len(results)}/{len(paths)} transcripts ({len(excluded)} excluded) -> {out_dir}")
    return EXIT_OK if results and fraction >= EVALUABLE_THRESHOLD else EXIT_PARTIAL


# -- stats --------------------------------------------------------------------


def compute_stats(aggregate: dict[str, Any]) -> dict[str, Any]:
    conditions = aggregate["conditions"]
    if len(conditions) < 2:
        raise ValueError(f"need at least two conditions, got {len(conditions)}")
    out: dict[str, Any] = {"conditions": [c["condition"] for c in conditions], "metrics": {}}
    for metric in METRICS:
        groups = [(c["condition"], c["metrics"][metric]["values"]) for c in conditions]
        try:
            out["metrics"][metric] = stats_report(groups)
        except ValueError as exc:
            out["metrics"][metric] = {"test": "kruskal-wallis", "applicable": False, "reason": str(exc)}
    return out


def cmd_stats(args: argparse.Namespace) -> int:
    try:
        aggregate = json.loads(Path(args.aggregate).read_text(encoding="utf-8"))
        report = compute_stats(aggregate)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report)
    for metric, r in report["metrics"].items():
        if r["applicable"]:
            print(f"{metric}: H={r['statistic']:.3f} df={r['df']} p={r['p']:.3g}")
        else:
            print(f"{metric}: not applicable ({r['reason']})")
    return EXIT_OK


# -- replay / diff ------------------------------------------------------------


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        transcript = read_transcript(args.transcript)
    except (OSError, TranscriptFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    sys.stdout.write(render(transcript, verbose=args.verbose))
    return EXIT_OK


def _canonical_file(path: Path) -> list[str]:
    if path.name.endswith(".calls.jsonl"):
        # Concurrent think calls interleave, so arrival order and seq are not stable.
        records = []
        for raw in path.read_text(encoding="utf-8").splitlines():
            if raw.strip():
                rec = canonical(json.loads(raw))
                rec.pop("seq", None)
                records.append(json.dumps(rec, sort_keys=True))
        return sorted(records)
    if path.suffix == ".jsonl":
        return canonical_lines(path)
    return [json.dumps(canonical(json.loads(path.read_text(encoding="utf-8"))), sort_keys=True)]


def canonical_diff(a: Path, b: Path) -> list[str]:
    """Relative paths whose canonical contents differ (or exist on one side only)."""
    if a.is_file() and b.is_file():
        return [] if _canonical_file(a) == _canonical_file(b) else [a.name]
    names_a = {p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.suffix in (".json", ".jsonl")}
    names_b = {p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.suffix in (".json", ".jsonl")}
    diffs = sorted(str(n) for n in names_a ^ names_b)
    for name in sorted(names_a & names_b):
        if _canonical_file(a / name) != _canonical_file(b / name):
            diffs.append(str(name))
    return diffs


def cmd_diff(args: argparse.Namespace) -> int:
    diffs = canonical_diff(Path(args.a), Path(args.b))
    for d in diffs:
        print(f"differs: {d}")
    if not diffs:
        print("identical (canonical)")
    return EXIT_OK if not diffs else EXIT_PARTIAL


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parley", description=__doc__)
    parser.add_argument("--version", action="version", version=f"parley {__version__}")
    parser.add_argument("-v", "--verbosity", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every session of an experiment plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", help="'live' or 'scripted:<path>' (overrides the plan)")
    p.add_argument("--concurrency", type=int, default=1, help="sessions run in parallel")
    p.add_argument("--seed-override", type=int, help="replace the plan's base_seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="breakdown analysis and judge scores for transcripts")
    p.add_argument("--transcripts", required=True, help="glob, e.g. 'out/*.jsonl'")
    p.add_argument("--out", required=True)
    p.add_argument("--backend", help="'live' or 'scripted:<path>'")
    p.add_argument("--plan", help="plan file supplying backend and routing settings")
    p.add_argument("--per-turn", action="store_true", help="one breakdown judge call per turn")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="Kruskal-Wallis and Dunn tests over an aggregate report")
    p.add_argument("--aggregate", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("replay", help="render a transcript for reading")
    p.add_argument("transcript")
    p.add_argument("--verbose", action="store_true", help="include every agent's think output")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("diff", help="compare two outputs ignoring timestamps and latencies")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_diff)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbosity, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
