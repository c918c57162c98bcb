"""Conclusion generation for the query node."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, NamedTuple

from . import prompts
from .backends import Backend, Message, complete
from .errors import AlreadyConcludedError, BackendError, ConclusionError, InvalidInputError
from .graph import FlowGraph, NodeState, TaskType, ensure_valid, layer_index


class SummaryMode(str, Enum):
    QA = "qa"
    REPORT = "report"


class AnswerInput(NamedTuple):
    node_id: str
    task_type: TaskType
    description: str
    context: str


@dataclass(frozen=True)
class Conclusion:
    answer: str
    mode: SummaryMode
    sources: tuple[str, ...]
    degraded: bool = False
    reason: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "answer": self.answer,
            "mode": self.mode.value,
            "sources": list(self.sources),
            "degraded": self.degraded,
            "reason": self.reason,
        }


def _layer_order(graph: FlowGraph, ids) -> list[str]:
    depth = layer_index(graph)
    return sorted(ids, key=lambda n: (depth[n], n))


def _check_concludable(graph: FlowGraph, partial: bool) -> None:
    ensure_valid(graph)
    if graph.query_node.state is not NodeState.PENDING:
        raise AlreadyConcludedError(f"query node is already {graph.query_node.state.value}")
    if not partial:
        open_nodes = [n.id for n in graph.nodes if n.id != graph.query_node_id and not n.state.terminal]
        if open_nodes:
            raise InvalidInputError(f"nodes not yet terminal: {', '.join(open_nodes)}")


def _candidates(graph: FlowGraph, mode: SummaryMode) -> list[str]:
    if mode is SummaryMode.QA:
        return graph.predecessors(graph.query_node_id)
    return [n.id for n in graph.nodes if n.id != graph.query_node_id]


def answer_inputs(graph: FlowGraph, mode: SummaryMode, *, partial: bool = False) -> list[AnswerInput]:
    """Knowledge handed to the summarizer.

    ``qa`` uses only the successful direct predecessors of the query node;
    ``report`` uses every successful node. Both are ordered by layer, then id.
    ``partial`` allows non-terminal nodes to remain (degraded conclusions).
    """
    mode = SummaryMode(mode)
    _check_concludable(graph, partial)
    chosen = [n for n in _candidates(graph, mode) if graph.node(n).state is NodeState.SUCCESS]
    out = []
    for node_id in _layer_order(graph, chosen):
        n = graph.node(node_id)
        out.append(AnswerInput(n.id, n.task_type, n.description, n.context or ""))
    return out


def unresolved_inputs(graph: FlowGraph, mode: SummaryMode) -> list[str]:
    """Candidate nodes that did not succeed; only their descriptions are sent."""
    left = [n for n in _candidates(graph, mode) if graph.node(n).state is not NodeState.SUCCESS]
    return _layer_order(graph, left)


def render_request(graph: FlowGraph, mode: SummaryMode, inputs: list[AnswerInput], unresolved: list[str]) -> str:
    lines = [f"[conclude mode={mode.value}]", f"objective: {graph.query_node.description}", "knowledge:"]
    if not inputs:
        lines.append("(none)")
    for item in inputs:
        lines.append(f"[context {item.node_id}] ({item.task_type.value}) {item.description}")
        lines.append(item.context)
    if unresolved:
        lines.append("unresolved:")
        for node_id in unresolved:
            n = graph.node(node_id)
            lines.append(f"- {n.id} ({n.task_type.value}, {n.state.value}): {n.description}")
    return "\n".join(lines)


def conclude(
    graph: FlowGraph,
    mode: SummaryMode,
    backend: Backend,
    *,
    partial: bool = False,
    reason: str | None = None,
) -> tuple[FlowGraph, Conclusion]:
    """Execute the query node in one exchange.

    A backend failure marks the query node failed and raises
    :class:`ConclusionError` carrying that graph.
    """
    mode = SummaryMode(mode)
    inputs = answer_inputs(graph, mode, partial=partial)
    instruction = prompts.SUMMARIZER_QA if mode is SummaryMode.QA else prompts.SUMMARIZER_REPORT
    messages = [
        Message("system", instruction),
        Message("user", render_request(graph, mode, inputs, unresolved_inputs(graph, mode))),
    ]
    query = graph.query_node
    try:
        answer = complete(messages, backend).response.strip()
        if not answer:
            raise BackendError("summarizer returned an empty answer")
    except BackendError as exc:
        failed = graph.with_nodes([query.evolve(state=NodeState.FAILURE, context=None)])
        raise ConclusionError(f"conclusion failed: {exc}", failed) from exc
    done = ensure_valid(graph.with_nodes([query.evolve(state=NodeState.SUCCESS, context=answer)]))
    sources = tuple(i.node_id for i in inputs)
    return done, Conclusion(answer, mode, sources, degraded=reason is not None, reason=reason)
