from __future__ import annotations

import pytest

from _support import QA_QUERY, REPORT_QUERY, scenario_file
from knowflow.backends import ScriptedBackend, load_scenario
from knowflow.graph import FlowEdge, FlowGraph, FlowNode, TaskType


@pytest.fixture
def tiny_graph() -> FlowGraph:
    return FlowGraph(
        (
            FlowNode("task", TaskType.ANSWER, "objective"),
            FlowNode("a", TaskType.SEARCH, "look something up"),
            FlowNode("b", TaskType.SOLVE, "work it out"),
        ),
        (FlowEdge("a", "b", "feeds"), FlowEdge("b", "task", "answer")),
    )


@pytest.fixture
def qa_backend() -> ScriptedBackend:
    return ScriptedBackend(load_scenario(scenario_file("qa_chain.json")))


@pytest.fixture
def report_backend() -> ScriptedBackend:
    return ScriptedBackend(load_scenario(scenario_file("report_parallel.json")))


@pytest.fixture
def qa_query() -> str:
    return QA_QUERY


@pytest.fixture
def report_query() -> str:
    return REPORT_QUERY


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance_results", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title = results[number]
        terminalreporter.write_line(f"C{number:<2} {'PASS' if ok else 'FAIL'}  {title}")
