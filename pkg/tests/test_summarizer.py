from __future__ import annotations

import random

import pytest

from _support import longest_chain, random_dag, scripted
from knowflow.errors import AlreadyConcludedError, ConclusionError, InvalidInputError
from knowflow.graph import FlowEdge, FlowGraph, FlowNode, NodeState, TaskType
from knowflow.summarizer import SummaryMode, answer_inputs, conclude, render_request, unresolved_inputs


def _finished(graph: FlowGraph, failed=()) -> FlowGraph:
    return graph.with_nodes(
        n.evolve(state=NodeState.FAILURE) if n.id in failed else n.evolve(state=NodeState.SUCCESS, context=f"ctx-{n.id}")
        for n in graph.nodes
        if n.id != graph.query_node_id
    )


@pytest.fixture
def diamond() -> FlowGraph:
    nodes = [FlowNode("task", TaskType.ANSWER, "q")] + [
        FlowNode(i, TaskType.SEARCH, f"do {i}") for i in ("a", "b", "c", "d", "side")
    ]
    edges = [FlowEdge("a", "b"), FlowEdge("a", "c"), FlowEdge("b", "d"), FlowEdge("c", "task"), FlowEdge("d", "task")]
    return FlowGraph(tuple(nodes), tuple(edges))


def test_qa_uses_direct_predecessors(diamond):
    g = _finished(diamond)
    assert [i.node_id for i in answer_inputs(g, SummaryMode.QA)] == ["c", "d"]
    assert answer_inputs(g, "qa")[0].context == "ctx-c"


def test_report_uses_every_success_in_layer_order(diamond):
    g = _finished(diamond, failed={"b"})
    assert [i.node_id for i in answer_inputs(g, SummaryMode.REPORT)] == ["a", "side", "c", "d"]
    assert unresolved_inputs(g, SummaryMode.REPORT) == ["b"]
    assert unresolved_inputs(g, SummaryMode.QA) == []


def test_preconditions(diamond):
    with pytest.raises(InvalidInputError, match="not yet terminal"):
        answer_inputs(diamond, SummaryMode.QA)
    assert answer_inputs(diamond, SummaryMode.QA, partial=True) == []
    g = _finished(diamond)
    done = g.with_nodes([g.query_node.evolve(state=NodeState.SUCCESS, context="x")])
    with pytest.raises(AlreadyConcludedError):
        answer_inputs(done, SummaryMode.QA)


def test_input_sets_match_rules_on_random_graphs():
    rng = random.Random(2)
    for _ in range(50):
        g = random_dag(rng, rng.randint(1, 12), states=True)
        g = g.with_nodes(n.evolve(state=NodeState.FAILURE) for n in g.nodes if n.state in (NodeState.PENDING, NodeState.RUNNING) and n.id != "task")
        ok = {n.id for n in g.nodes if n.state is NodeState.SUCCESS}
        direct = {e.source for e in g.edges if e.target == "task"}
        qa = [i.node_id for i in answer_inputs(g, SummaryMode.QA)]
        report = [i.node_id for i in answer_inputs(g, SummaryMode.REPORT)]
        assert set(qa) == ok & direct
        assert set(report) == ok
        depth = longest_chain(g)
        assert report == sorted(report, key=lambda n: (depth[n], n))


def test_request_text(diamond):
    g = _finished(diamond, failed={"d"})
    text = render_request(g, SummaryMode.QA, answer_inputs(g, "qa"), unresolved_inputs(g, "qa"))
    assert text.splitlines() == [
        "[conclude mode=qa]",
        "objective: q",
        "knowledge:",
        "[context c] (search) do c",
        "ctx-c",
        "unresolved:",
        "- d (search, failure): do d",
    ]


def test_conclude_marks_query_done(diamond):
    g = _finished(diamond)
    out, conclusion = conclude(g, SummaryMode.QA, scripted([(r"\A\[conclude mode=qa\]", " 1927 ")]))
    assert conclusion.answer == "1927" and conclusion.sources == ("c", "d") and not conclusion.degraded
    assert out.query_node.state is NodeState.SUCCESS and out.query_node.context == "1927"


def test_degraded_conclusion(diamond):
    _, conclusion = conclude(diamond, "report", scripted([(".", "partial")]), partial=True, reason="blocked")
    assert conclusion.degraded and conclusion.reason == "blocked" and conclusion.sources == ()


def test_backend_failure_fails_the_query(diamond):
    g = _finished(diamond)
    with pytest.raises(ConclusionError) as info:
        conclude(g, SummaryMode.QA, scripted([]))
    assert info.value.graph.query_node.state is NodeState.FAILURE
    with pytest.raises(ConclusionError):
        conclude(g, SummaryMode.QA, scripted([(".", "  ")]))
