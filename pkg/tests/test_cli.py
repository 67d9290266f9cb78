import json

import pytest

from parley.cli import canonical_diff, main

from golden_trace import GOLDEN
from pipeline import write_pipeline_inputs


@pytest.fixture
def inputs(tmp_path):
    return write_pipeline_inputs(tmp_path / "in", runs=2, turn_budget=6)


def run_plan(inputs, out, *extra):
    return main(["run", "--plan", str(inputs["plan"]), "--out", str(out), *extra])


class TestRun:
    def test_writes_transcripts_and_manifest(self, inputs, tmp_path):
        out = tmp_path / "out"
        assert run_plan(inputs, out) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["counts"] == {"total": 6, "complete": 6, "failed": 0}
        for entry in manifest["sessions"]:
            assert (out / entry["path"]).is_file()
            assert (out / entry["call_log"]).is_file()

    def test_session_concurrency_gives_same_outputs(self, inputs, tmp_path):
        assert run_plan(inputs, tmp_path / "a") == 0
        assert run_plan(inputs, tmp_path / "b", "--concurrency", "3") == 0
        assert canonical_diff(tmp_path / "a", tmp_path / "b") == []

    def test_seed_override_changes_seeds(self, inputs, tmp_path):
        run_plan(inputs, tmp_path / "out", "--seed-override", "99")
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert sorted(e["seed"] for e in manifest["sessions"]) == list(range(99, 105))

    def test_short_script_gives_partial_exit(self, inputs, tmp_path):
        script = json.loads(inputs["session_script"].read_text())
        for queue in script["chat"]["Speak"].values():
            del queue[2:]
        inputs["session_script"].write_text(json.dumps(script))
        assert run_plan(inputs, tmp_path / "out") == 1
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["counts"]["failed"] > 0

    def test_missing_plan_is_usage_error(self, tmp_path):
        assert main(["run", "--plan", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2

    def test_bad_backend_spec(self, inputs, tmp_path):
        assert run_plan(inputs, tmp_path / "o", "--backend", "carrier-pigeon") == 2

    def test_unknown_command(self):
        assert main(["fly"]) == 2


class TestEvaluateAndStats:
    def test_round_trip(self, inputs, tmp_path):
        out = tmp_path / "out"
        assert run_plan(inputs, out) == 0
        ev = tmp_path / "eval"
        code = main(["evaluate", "--transcripts", str(out / "*.jsonl"), "--out", str(ev),
                     "--backend", f"scripted:{inputs['judge_script']}"])
        assert code == 0
        agg = json.loads((ev / "aggregate.json").read_text())
        assert agg["evaluated"] == 6 and agg["excluded"] == []
        assert len(list((ev / "annotations").glob("*.jsonl"))) == 6
        assert len((ev / "scores.jsonl").read_text().splitlines()) == 6
        assert main(["stats", "--aggregate", str(ev / "aggregate.json"), "--out", str(ev / "stats.json")]) == 0
        stats = json.loads((ev / "stats.json").read_text())
        assert set(stats["metrics"]) == {"breakdown_count", "coherence", "cooperativeness", "diversity"}

    def test_no_transcripts(self, tmp_path):
        assert main(["evaluate", "--transcripts", str(tmp_path / "*.jsonl"), "--out", str(tmp_path / "e"),
                     "--backend", "scripted:x.json"]) == 2

    def test_exclusion_below_threshold(self, inputs, tmp_path):
        out = tmp_path / "out"
        run_plan(inputs, out)
        judge = json.loads(inputs["judge_script"].read_text())
        judge["chat"]["JudgeScores"]["*"][0] = "coherence: eleven"
        judge["chat"]["JudgeScores"]["*"].insert(1, "still not a score")
        inputs["judge_script"].write_text(json.dumps(judge))
        ev = tmp_path / "eval"
        code = main(["evaluate", "--transcripts", str(out / "*.jsonl"), "--out", str(ev),
                     "--backend", f"scripted:{inputs['judge_script']}"])
        agg = json.loads((ev / "aggregate.json").read_text())
        assert len(agg["excluded"]) == 1 and agg["evaluated"] == 5
        assert agg["meets_evaluable_threshold"] is False
        assert code == 1

    def test_stats_needs_two_conditions(self, tmp_path):
        path = tmp_path / "agg.json"
        path.write_text(json.dumps({"conditions": [{"condition": "SS", "metrics": {}}]}))
        assert main(["stats", "--aggregate", str(path), "--out", str(tmp_path / "s.json")]) == 2


class TestReplayDiff:
    def test_replay_golden(self, capsys):
        assert main(["replay", str(GOLDEN), "--verbose"]) == 0
        text = capsys.readouterr().out
        assert "Turn 4 [Designated] Kenji Arai: (response)" in text
        assert ". Emi Kurosawa:" in text

    def test_replay_malformed(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"type": "header"}\nnot json\n')
        assert main(["replay", str(bad)]) == 2
        assert "bad.jsonl:" in capsys.readouterr().err

    def test_diff_ignores_timestamps(self, tmp_path):
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        lines = GOLDEN.read_text().splitlines()
        a.write_text("\n".join(lines) + "\n")
        first = json.loads(lines[0])
        first["created_at"] = "2031-01-01T00:00:00+00:00"
        b.write_text("\n".join([json.dumps(first)] + lines[1:]) + "\n")
        assert main(["diff", str(a), str(b)]) == 0
        b.write_text("\n".join(lines[:-1]) + "\n")
        assert main(["diff", str(a), str(b)]) == 1
