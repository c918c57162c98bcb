from __future__ import annotations

import json
import shutil

import pytest

from _support import QA_QUERY, REPORT_QUERY, WIDE, ablation_backend, scenario_file, scripted
from knowflow.backends import ScriptedBackend, load_scenario
from knowflow.errors import CheckpointError, IncompatibleConfigError, NothingToExportError, RoundRangeError
from knowflow.graph import NodeState, parse_graph, serialize_graph, validate
from knowflow.orchestrator import (
    EXIT_ABORTED,
    EXIT_DEGRADED,
    EXIT_OK,
    PHASES,
    Checkpoint,
    RunConfig,
    export_dot,
    export_planner_dialogue,
    load_checkpoint,
    resume,
    run,
    write_dialogue,
)
from knowflow.planner import SEQUENTIAL
from knowflow.prompts import PLANNER
from knowflow.trace import load_trace, read_events

QA = "scripted:" + str(scenario_file("qa_chain.json"))
REPORT = "scripted:" + str(scenario_file("report_parallel.json"))


def test_qa_chain_run(tmp_path):
    trace = run(RunConfig(QA_QUERY, backend=QA, trace_path=tmp_path / "t.jsonl"))
    assert trace.exit_code == EXIT_OK and trace.status == "success"
    assert trace.collect_rounds == [["n1"], ["n2"], ["n3"], ["n8"], ["n6"], ["n7"]]
    assert trace.conclusion.answer == "1927"
    assert trace.final_graph.query_node.state is NodeState.SUCCESS
    calls = [tc.tool_name for rt in trace.rounds for r in rt.records for tc in r.tool_calls]
    assert calls == ["search_wiki_revision", "extract_url_content", "extract_url_content", "download_media_from_url", "ocr2text"]


def test_traces_are_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    ta = run(RunConfig(QA_QUERY, backend=QA, trace_path=a))
    tb = run(RunConfig(QA_QUERY, backend=QA, trace_path=b))
    assert a.read_bytes() == b.read_bytes()
    assert ta.run_id == tb.run_id and len(ta.run_id) == 12


def test_timings_are_opt_in(tmp_path):
    trace = run(RunConfig(QA_QUERY, backend=QA, trace_path=tmp_path / "t.jsonl", trace_timings=True))
    text = (tmp_path / "t.jsonl").read_text()
    assert '"latency"' in text and '"elapsed"' in text
    assert set(trace.timings) == {"plan", "collect", "refine", "conclude"}


def test_report_run_writes_report(tmp_path):
    out = tmp_path / "report.md"
    trace = run(RunConfig(REPORT_QUERY, mode="report", backend=REPORT, report_path=out))
    assert [set(r) for r in trace.collect_rounds] == [{"n3", "n4s", "n7"}, {"n2", "n4", "n6"}]
    assert set(trace.conclusion.sources) == {"n2", "n3", "n4", "n4s", "n6", "n7"}
    assert out.read_text().startswith("Multi-Agent AI Scientists in 2025")


def test_event_log_shape(tmp_path):
    path = tmp_path / "t.jsonl"
    run(RunConfig(REPORT_QUERY, mode="report", backend=REPORT, trace_path=path))
    kinds = [e["event"] for e in read_events(path)]
    assert kinds[0] == "run_start" and kinds[-1] == "run_end"
    assert kinds.count("plan_step") == 3 and kinds.count("round_start") == 2
    assert kinds.count("node_executed") == 6 and kinds.count("refine") == 2
    assert kinds.count("snapshot") == 3 and kinds[-2] == "conclusion"


def test_trace_reloads_from_disk(tmp_path):
    path, snaps = tmp_path / "t.jsonl", tmp_path / "snaps"
    live = run(RunConfig(REPORT_QUERY, mode="report", backend=REPORT, trace_path=path, snapshot_dir=snaps))
    assert sorted(p.name for p in snaps.iterdir()) == ["round_000.json", "round_001.json", "round_002.json"]
    loaded = load_trace(path, snaps)
    assert loaded.collect_rounds == live.collect_rounds
    assert loaded.conclusion == live.conclusion
    assert loaded.steps == live.steps
    assert loaded.snapshots == live.snapshots
    assert loaded.final_graph == live.final_graph
    assert [r.records for r in loaded.rounds] == [r.records for r in live.rounds]
    with pytest.raises(FileNotFoundError):
        load_trace(path)


def _checkpoints(config: RunConfig) -> tuple[list[Checkpoint], bytes]:
    seen: list[Checkpoint] = []
    run(config, checkpoint_hook=seen.append)
    return seen, config.trace_path.read_bytes()


@pytest.mark.parametrize("snapshots", [False, True])
def test_resume_from_every_checkpoint(tmp_path, snapshots):
    full = tmp_path / "full.jsonl"
    snap_dir = tmp_path / "snaps" if snapshots else None
    cfg = RunConfig(REPORT_QUERY, mode="report", backend=REPORT, trace_path=full, snapshot_dir=snap_dir)
    checkpoints, reference = _checkpoints(cfg)
    assert {c.phase for c in checkpoints} == set(PHASES)
    lines = reference.splitlines(keepends=True)
    for i, ckpt in enumerate(checkpoints):
        part = tmp_path / f"part{i}.jsonl"
        part.write_bytes(b"".join(lines[: ckpt.event_count]))
        cfg2 = RunConfig(REPORT_QUERY, mode="report", backend=REPORT, trace_path=part, snapshot_dir=snap_dir)
        trace = resume(ckpt, cfg2)
        assert part.read_bytes() == reference, f"diverged after {ckpt.phase} round {ckpt.round}"
        assert trace.exit_code == EXIT_OK


def test_resume_from_saved_file_discards_later_events(tmp_path):
    path, ckpt_path = tmp_path / "t.jsonl", tmp_path / "t.ckpt"
    seen: list[Checkpoint] = []
    run(RunConfig(QA_QUERY, backend=QA, trace_path=path), checkpoint_hook=seen.append)
    reference = path.read_bytes()
    mid = seen[5]
    mid.save(ckpt_path)
    # The interrupted run had written past the checkpoint, including a torn line.
    lines = reference.splitlines(keepends=True)
    path.write_bytes(b"".join(lines[: mid.event_count + 2]) + b'{"torn')
    resume(ckpt_path, RunConfig(QA_QUERY, backend=QA, trace_path=path))
    assert path.read_bytes() == reference


def test_resume_rejects_mismatches(tmp_path):
    seen: list[Checkpoint] = []
    run(RunConfig(QA_QUERY, backend=QA, trace_path=tmp_path / "t.jsonl"), checkpoint_hook=seen.append)
    with pytest.raises(IncompatibleConfigError):
        resume(seen[2], RunConfig("another question", backend=QA))
    short = tmp_path / "short.jsonl"
    short.write_text('{"event": "run_start", "round": 0, "run_id": "x", "config": {}}\n')
    with pytest.raises(CheckpointError):
        resume(seen[4], RunConfig(QA_QUERY, backend=QA, trace_path=short))
    bad = tmp_path / "bad.ckpt"
    bad.write_text("{}")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_text(seen[0].to_json().replace('"pre-collect"', '"lunch"'))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_checkpoint_file_tracks_progress(tmp_path):
    ckpt_path = tmp_path / "run.ckpt"
    run(RunConfig(QA_QUERY, backend=QA, checkpoint_path=ckpt_path))
    last = load_checkpoint(ckpt_path)
    assert last.phase == "pre-conclude" and last.round == 6
    assert all(n.state is NodeState.SUCCESS for n in parse_graph(last.graph).nodes if n.id != "task")


def test_ablation_round_counts():
    flow = run(RunConfig("collect eight facts", backend=ablation_backend()))
    seq = run(RunConfig("collect eight facts", planner_mode=SEQUENTIAL, backend=ablation_backend()))
    assert flow.collect_rounds == [["a"], ["b"], WIDE]
    assert len(seq.collect_rounds) == 10 and all(len(r) == 1 for r in seq.collect_rounds)
    assert flow.exit_code == seq.exit_code == EXIT_OK


def test_refinement_recovers_from_failure():
    on = run(RunConfig("collect eight facts", backend=ablation_backend(fail="w3")))
    off = run(RunConfig("collect eight facts", refinement_enabled=False, backend=ablation_backend(fail="w3")))
    assert on.exit_code == EXIT_OK and on.collect_rounds[-1] == ["w3"]
    assert on.final_graph.node("w3").description.endswith("from a mirror")
    assert off.exit_code == EXIT_DEGRADED and off.conclusion.reason == "blocked"
    assert len(off.collect_rounds) == 3


def test_blocked_run_tries_one_structural_refine(tmp_path):
    path = tmp_path / "t.jsonl"
    trace = run(RunConfig(QA_QUERY, backend=_failing_qa("n3"), trace_path=path))
    assert trace.exit_code == EXIT_DEGRADED and trace.conclusion.reason == "blocked"
    refines = [e for e in read_events(path) if e["event"] == "refine"]
    assert [e["trigger"] for e in refines] == ["round"] * 3 + ["blocked"]
    unresolved = trace.events[-2]["exchanges"][0]["messages"][-1]["content"]
    assert "- n7 (solve, pending)" in unresolved


def _failing_qa(node: str) -> ScriptedBackend:
    scen = load_scenario(scenario_file("qa_chain.json"))
    bad = scripted([(rf"\A\[execute\] node_id: {node}$", '{"failed": "offline"}')])
    scen.entries[:0] = bad.scenario.entries
    return ScriptedBackend(type(scen)(scen.entries, scen.tools, scen.strict))


def test_round_budget_gives_partial_conclusion():
    trace = run(RunConfig(QA_QUERY, backend=QA, max_rounds=2))
    assert trace.exit_code == EXIT_DEGRADED and trace.conclusion.reason == "max_rounds"
    assert trace.collect_rounds == [["n1"], ["n2"]] and trace.conclusion.sources == ()


def test_planner_failure_aborts(tmp_path):
    path = tmp_path / "t.jsonl"
    trace = run(RunConfig("q", backend=scripted([(".", "no graph here")]), trace_path=path))
    assert trace.exit_code == EXIT_ABORTED and "planner output rejected" in trace.error
    assert [e["event"] for e in read_events(path)] == ["run_start", "abort", "run_end"]


def test_conclusion_failure_aborts():
    scen = load_scenario(scenario_file("qa_chain.json"))
    entries = [e for e in scen.entries if "conclude" not in str(e.key)]
    trace = run(RunConfig(QA_QUERY, backend=ScriptedBackend(type(scen)(entries, scen.tools))))
    assert trace.exit_code == EXIT_ABORTED
    assert trace.final_graph.query_node.state is NodeState.FAILURE


def test_dialogue_export(tmp_path):
    trace = run(RunConfig(REPORT_QUERY, mode="report", backend=REPORT))
    records = export_planner_dialogue(trace)
    assert len(records) == 3
    for rec, step in zip(records, trace.steps):
        user, assistant = rec["messages"]
        assert user["role"] == "user" and assistant["role"] == "assistant"
        assert user["content"].startswith(PLANNER)
        assert parse_graph(user["content"].split("Input graph:\n", 1)[1]) == step.before
        assert validate(parse_graph(assistant["content"])).ok
    path = tmp_path / "d.jsonl"
    write_dialogue(records, path)
    assert [json.loads(line) for line in path.read_text().splitlines()] == records
    seq = run(RunConfig("collect eight facts", planner_mode=SEQUENTIAL, backend=ablation_backend()))
    with pytest.raises(NothingToExportError):
        export_planner_dialogue(seq)


def test_dot_export():
    trace = run(RunConfig(REPORT_QUERY, mode="report", backend=REPORT))
    dot = export_dot(trace, 1)
    assert '"n3" [label="n3: search", shape=box, style="rounded,filled", fillcolor="palegreen"];' in dot
    assert '"n2" [label="n2: solve", shape=box, style="rounded,filled", fillcolor="white"];' in dot
    with pytest.raises(RoundRangeError):
        export_dot(trace, 9)


def test_run_id_ignores_output_locations(tmp_path):
    a = RunConfig(QA_QUERY, backend=QA, trace_path=tmp_path / "x")
    b = RunConfig(QA_QUERY, backend="scripted:/elsewhere.json")
    assert a.derived_run_id() == b.derived_run_id()
    assert a.derived_run_id() != RunConfig(QA_QUERY, backend=QA, max_rounds=3).derived_run_id()


def test_copy_of_fixture_replays(tmp_path):
    copy = tmp_path / "s.json"
    shutil.copy(scenario_file("qa_chain.json"), copy)
    assert run(RunConfig(QA_QUERY, backend=f"scripted:{copy}")).conclusion.answer == "1927"


def _count_exchanges(events) -> int:
    total = 0
    for e in events:
        total += len(e.get("exchanges", []))
    return total


@pytest.mark.parametrize("fixture, mode", [("qa_chain.json", "qa"), ("report_parallel.json", "report")])
def test_every_exchange_is_traced_once(tmp_path, fixture, mode):
    backend = ScriptedBackend(load_scenario(scenario_file(fixture)))
    query = QA_QUERY if mode == "qa" else REPORT_QUERY
    trace = run(RunConfig(query, mode=mode, backend=backend, trace_path=tmp_path / "t.jsonl"))
    events = read_events(tmp_path / "t.jsonl")
    assert _count_exchanges(events) == len(backend.requests)
    traced_tools = sum(len(e["tool_calls"]) for e in events if e["event"] == "node_executed")
    assert traced_tools == len(backend.scenario.tools)
    for text in trace.snapshots.values():
        assert validate(parse_graph(text)).ok


def test_dot_of_planned_graph():
    trace = run(RunConfig(REPORT_QUERY, mode="report", backend=REPORT))
    dot = export_dot(trace, 0)
    assert sum(1 for line in dot.splitlines() if "shape=box" in line) == 7
    assert export_dot(trace, 0) == dot


def test_loop_terminates_on_fuzzed_scenarios():
    import random

    from _support import executor_pairs_for, random_dag

    rng = random.Random(8)
    for _ in range(40):
        g = random_dag(rng, rng.randint(1, 10), p=0.3)
        fail = {n for n in g.node_ids if n != "task" and rng.random() < 0.2}
        revive = rng.choice(sorted(fail)) if fail and rng.random() < 0.5 else None
        pairs = [(r"\A\{\n \"nodes\"", serialize_graph(g))]
        if revive:
            # The refiner drops one failed node, which may unblock the rest.
            pairs.append((rf"(?s)\A\[refine round=\d+\].*\"node_id\": \"{revive}\", [^\n]*\"failure\"",
                          json.dumps({"ops": [{"op": "DelNode", "node_id": revive}]})))
        pairs += executor_pairs_for(g, fail) + [(r"\A\[refine", "no changes"), (r"\A\[conclude", "done")]
        budget = rng.randint(1, 12)
        trace = run(RunConfig("objective", backend=scripted(pairs), max_rounds=budget))
        assert len(trace.collect_rounds) <= budget
        assert trace.exit_code in (EXIT_OK, EXIT_DEGRADED)
        if trace.exit_code == EXIT_OK:
            assert all(n.state is NodeState.SUCCESS for n in trace.final_graph.nodes
                       if n.id in trace.final_graph.predecessors("task"))
