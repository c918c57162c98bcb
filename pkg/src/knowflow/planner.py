"""Initial flow construction: iterative one-step expansion to a fixpoint, and
the linear step-list baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import prompts
from .backends import Backend, BackendExchange, Message, complete
from .errors import FlowError, InvalidInputError, PlannerOutputError
from .graph import (
    FlowEdge,
    FlowGraph,
    FlowNode,
    NodeState,
    TaskType,
    ensure_valid,
    loads_lenient,
    new_graph,
    parse_graph,
    serialize_graph,
)

FLOW = "flow"
SEQUENTIAL = "sequential"


@dataclass(frozen=True)
class PlannerConfig:
    max_iterations: int = 8
    repair_attempts: int = 2
    planner_mode: str = FLOW

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be >= 1")
        if self.repair_attempts < 0:
            raise InvalidInputError("repair_attempts must be >= 0")
        if self.planner_mode not in (FLOW, SEQUENTIAL):
            raise InvalidInputError(f"unknown planner mode {self.planner_mode!r}")


@dataclass(frozen=True)
class ExpansionStep:
    iteration: int
    before: FlowGraph
    after: FlowGraph
    changed: bool
    added_node_ids: frozenset[str]
    added_edge_pairs: frozenset[tuple[str, str]]
    exchanges: tuple[BackendExchange, ...] = field(default=(), compare=False, repr=False)


class _GateError(FlowError):
    pass


def check_expansion(before: FlowGraph, after: FlowGraph) -> tuple[frozenset[str], frozenset[tuple[str, str]]]:
    """Accept ``after`` only as a pure superset of ``before`` whose new edges
    each touch a new node. Returns the added node ids and edge pairs."""
    if after.query_node_id != before.query_node_id:
        raise _GateError(f"query node changed from {before.query_node_id} to {after.query_node_id}")
    for n in before.nodes:
        if not after.has_node(n.id):
            raise _GateError(f"node {n.id} was removed")
        m = after.node(n.id)
        if (m.task_type, m.description) != (n.task_type, n.description):
            raise _GateError(f"node {n.id} was modified")
    for e in before.edges:
        kept = after.edge(e.source, e.target)
        if kept is None:
            raise _GateError(f"edge {e.source}->{e.target} was removed")
        if kept.relation != e.relation:
            raise _GateError(f"edge {e.source}->{e.target} was relabelled")
    for n in after.nodes:
        if n.state is not NodeState.PENDING or n.context is not None:
            raise _GateError(f"node {n.id} is not pending")
    added_nodes = frozenset(n.id for n in after.nodes if not before.has_node(n.id))
    added_edges = frozenset(e.pair for e in after.edges if before.edge(e.source, e.target) is None)
    for s, t in sorted(added_edges):
        if s not in added_nodes and t not in added_nodes:
            raise _GateError(f"new edge {s}->{t} connects two existing nodes")
    return added_nodes, added_edges


def _run_with_repair(backend: Backend, messages: list[Message], repair_attempts: int, tag: str, accept):
    """Query the backend, re-prompting with the rejection reason until
    ``accept`` returns without raising or the repair budget runs out."""
    exchanges: list[BackendExchange] = []
    raw = ""
    for attempt in range(repair_attempts + 1):
        ex = complete(messages, backend)
        exchanges.append(ex)
        raw = ex.response
        try:
            return accept(raw), exchanges
        except FlowError as exc:
            reason = str(exc)
        messages = messages + [
            Message("assistant", raw),
            Message("user", f"[{tag} attempt={attempt + 1}]\nYour reply was rejected: {reason}\nReply again."),
        ]
    raise PlannerOutputError(f"planner output rejected after {repair_attempts} repairs: {reason}", raw)


def expand_once(
    graph: FlowGraph, planner: Backend, config: PlannerConfig | None = None, iteration: int = 0
) -> ExpansionStep:
    config = config or PlannerConfig()
    ensure_valid(graph)
    if any(n.state is not NodeState.PENDING for n in graph.nodes):
        raise InvalidInputError("planning requires an all-pending graph")
    messages = [Message("system", prompts.PLANNER), Message("user", serialize_graph(graph))]

    def accept(raw: str):
        after = parse_graph(raw)
        return after, check_expansion(graph, after)

    (after, (nodes, edges)), exchanges = _run_with_repair(
        planner, messages, config.repair_attempts, f"plan-repair step={iteration}", accept
    )
    changed = bool(nodes or edges)
    return ExpansionStep(
        iteration, graph, after if changed else graph, changed, nodes, edges, tuple(exchanges)
    )


def plan(
    query: str, planner: Backend, config: PlannerConfig | None = None
) -> tuple[FlowGraph, list[ExpansionStep]]:
    """Expand from the bare query node until the planner echoes its input or
    ``max_iterations`` steps have run."""
    config = config or PlannerConfig()
    if config.planner_mode != FLOW:
        raise InvalidInputError("plan() requires planner_mode='flow'")
    graph = new_graph(query)
    steps: list[ExpansionStep] = []
    for i in range(config.max_iterations):
        step = expand_once(graph, planner, config, iteration=i)
        steps.append(step)
        graph = step.after
        if not step.changed:
            break
    return graph, steps


def _parse_steps(raw: str, query_id: str) -> list[FlowNode]:
    data = loads_lenient(raw)
    if isinstance(data, dict) and set(data) == {"steps"}:
        data = data["steps"]
    if not isinstance(data, list):
        raise _GateError("expected a list of steps")
    nodes: list[FlowNode] = []
    ids: set[str] = set()
    for i, item in enumerate(data, start=1):
        if isinstance(item, str):
            item = {"content": item}
        if not isinstance(item, dict) or not {"content"} <= set(item) <= {"node_id", "task_type", "content"}:
            raise _GateError(f"step {i} is not a step object")
        node_id = item.get("node_id", f"s{i}")
        kind = item.get("task_type", TaskType.SOLVE.value)
        if kind not in (TaskType.SEARCH.value, TaskType.SOLVE.value):
            raise _GateError(f"step {i} has task_type {kind!r}")
        if not isinstance(node_id, str) or not node_id or node_id in ids or node_id == query_id:
            raise _GateError(f"step {i} has a bad or repeated node_id {node_id!r}")
        if not isinstance(item["content"], str) or not item["content"].strip():
            raise _GateError(f"step {i} has empty content")
        ids.add(node_id)
        nodes.append(FlowNode(node_id, TaskType(kind), item["content"]))
    return nodes


def chain_graph(query: str, steps: list[FlowNode]) -> FlowGraph:
    """Linear pipeline ``s1 -> s2 -> ... -> sn -> query``."""
    root = new_graph(query)
    order = [n.id for n in steps] + [root.query_node_id]
    edges = [FlowEdge(a, b, "next step") for a, b in zip(order, order[1:])]
    return ensure_valid(FlowGraph(root.nodes + tuple(steps), tuple(edges), root.query_node_id))


def plan_sequential(query: str, planner: Backend, config: PlannerConfig | None = None) -> FlowGraph:
    config = config or PlannerConfig(planner_mode=SEQUENTIAL)
    if config.planner_mode != SEQUENTIAL:
        raise InvalidInputError("plan_sequential() requires planner_mode='sequential'")
    root = new_graph(query)
    messages = [
        Message("system", prompts.SEQUENTIAL_PLANNER),
        Message("user", f"[plan-sequential]\nobjective: {query}"),
    ]
    steps, _ = _run_with_repair(
        planner,
        messages,
        config.repair_attempts,
        "plan-sequential-repair",
        lambda raw: _parse_steps(raw, root.query_node_id),
    )
    return chain_graph(query, steps)
