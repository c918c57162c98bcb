from __future__ import annotations

import json
import random

import pytest

from _support import FUZZ_KINDS, VALID_KINDS, ExpandingPlanner, fuzz_planner_output, random_dag, scripted
from knowflow.errors import InvalidInputError, PlannerOutputError
from knowflow.graph import FlowEdge, FlowGraph, FlowNode, NodeState, TaskType, new_graph, serialize_graph
from knowflow.planner import (
    SEQUENTIAL,
    PlannerConfig,
    chain_graph,
    check_expansion,
    expand_once,
    plan,
    plan_sequential,
)


def _grown(base: FlowGraph, extra_nodes, extra_edges) -> FlowGraph:
    return FlowGraph(base.nodes + tuple(extra_nodes), base.edges + tuple(extra_edges), base.query_node_id)


def test_check_expansion_reports_additions(tiny_graph):
    after = _grown(tiny_graph, [FlowNode("c", TaskType.SEARCH, "more")], [FlowEdge("c", "b", "x")])
    assert check_expansion(tiny_graph, after) == (frozenset({"c"}), frozenset({("c", "b")}))
    assert check_expansion(tiny_graph, tiny_graph) == (frozenset(), frozenset())


def test_check_expansion_rejects_edges_between_old_nodes(tiny_graph):
    after = _grown(tiny_graph, [FlowNode("c", TaskType.SEARCH, "m")], [FlowEdge("c", "task"), FlowEdge("a", "task")])
    with pytest.raises(Exception, match="two existing nodes"):
        check_expansion(tiny_graph, after)


def test_report_style_planning(report_backend, report_query):
    graph, steps = plan(report_query, report_backend)
    assert [s.changed for s in steps] == [True, True, False]
    assert steps[0].added_node_ids == {"n2", "n4", "n6"}
    assert steps[1].added_node_ids == {"n3", "n4s", "n7"}
    assert steps[1].added_edge_pairs == {("n3", "n2"), ("n4s", "n4"), ("n7", "n6")}
    assert steps[2].after == steps[2].before == graph
    assert len(graph.nodes) == 7


def test_expand_once_repairs_a_bad_reply(tiny_graph):
    good = serialize_graph(_grown(tiny_graph, [FlowNode("c", TaskType.SOLVE, "z")], [FlowEdge("c", "task")]))
    backend = scripted([(r"\A\[plan-repair step=4 attempt=1\]", good), (r"\A\{", "this is not a graph")])
    step = expand_once(tiny_graph, backend, iteration=4)
    assert step.changed and step.added_node_ids == {"c"}
    assert len(step.exchanges) == 2
    assert "Your reply was rejected" in step.exchanges[1].messages[-1].content


def test_expand_once_gives_up_after_repairs(tiny_graph):
    backend = scripted([(".", "nope")])
    with pytest.raises(PlannerOutputError) as info:
        expand_once(tiny_graph, backend, PlannerConfig(repair_attempts=2))
    assert info.value.raw_output == "nope"
    assert len(backend.requests) == 3


def test_expand_once_requires_pending_graph(tiny_graph):
    ran = tiny_graph.with_nodes([tiny_graph.node("a").evolve(state=NodeState.FAILURE)])
    with pytest.raises(InvalidInputError):
        expand_once(ran, scripted([], strict=False))


def test_planner_fuzz_sample():
    rng = random.Random(11)
    for i in range(120):
        base = random_dag(rng, rng.randint(0, 6))
        kind = FUZZ_KINDS[i % len(FUZZ_KINDS)]
        text, added = fuzz_planner_output(rng, base, kind)
        backend = scripted([(".", text)])
        if kind in VALID_KINDS:
            step = expand_once(base, backend, PlannerConfig(repair_attempts=0))
            assert step.added_node_ids == added
            assert step.changed == bool(added)
        else:
            with pytest.raises(PlannerOutputError):
                expand_once(base, backend, PlannerConfig(repair_attempts=0))


def test_plan_stops_at_the_iteration_cap():
    planner = ExpandingPlanner()
    graph, steps = plan("q", planner, PlannerConfig(max_iterations=5))
    assert len(steps) == 5 and all(s.changed for s in steps)
    assert planner.calls == 5
    assert len(graph.nodes) == 6


def test_plan_rejects_sequential_config():
    with pytest.raises(InvalidInputError):
        plan("q", ExpandingPlanner(), PlannerConfig(planner_mode=SEQUENTIAL))


@pytest.mark.parametrize(
    "reply",
    [
        '["look it up", "work it out"]',
        '{"steps": ["look it up", "work it out"]}',
        '[{"content": "look it up", "task_type": "search"}, {"content": "work it out"}]',
        '["look it up", "work it out",]',
    ],
)
def test_sequential_formats(reply):
    g = plan_sequential("q", scripted([(r"\A\[plan-sequential\]", reply)]))
    assert g.node_ids == ["s1", "s2", "task"]
    assert [e.pair for e in g.edges] == [("s1", "s2"), ("s2", "task")]


def test_sequential_report_fixture(report_backend, report_query):
    g = plan_sequential(report_query, report_backend)
    chain = ["n3", "n4s", "n7", "n2", "n4", "n6", "task"]
    assert {e.pair for e in g.edges} == set(zip(chain, chain[1:]))


@pytest.mark.parametrize(
    "reply",
    ['{"plan": []}', '[{"node_id": "task", "content": "x"}]', '[{"content": "x", "task_type": "answer"}]', '[""]',
     '[{"node_id": "a", "content": "x"}, {"node_id": "a", "content": "y"}]'],
)
def test_sequential_rejects_bad_steps(reply):
    with pytest.raises(PlannerOutputError):
        plan_sequential("q", scripted([(".", reply)]), PlannerConfig(repair_attempts=0, planner_mode=SEQUENTIAL))


def test_chain_graph_of_nothing_is_the_bare_query():
    assert chain_graph("q", []) == new_graph("q")


def test_planner_request_is_the_bare_graph():
    backend = scripted([], strict=False)
    graph, steps = plan("what now", backend)
    assert len(steps) == 1 and not steps[0].changed
    sent = backend.requests[0][-1].content
    assert json.loads(sent) == {"nodes": [{"node_id": "task", "task_type": "answer", "content": "what now"}], "edges": []}
