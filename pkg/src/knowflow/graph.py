"""Knowledge-flow data model: typed subtask nodes, labelled dependency edges,
structural validation, frontier/layer computation and the text interchange
format.

Graph values are immutable. Every helper that "changes" a graph returns a
new one; nodes and edges are kept in lexicographic order so that equality
is structural and serialization is byte-stable.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import Any

from .errors import GraphParseError, InvalidInputError, StructuralError

QUERY_NODE_ID = "task"


class TaskType(str, Enum):
    SEARCH = "search"
    SOLVE = "solve"
    ANSWER = "answer"

    @classmethod
    def parse(cls, token: str) -> TaskType:
        try:
            return cls(token)
        except ValueError:
            raise GraphParseError(f"unknown task type {token!r}") from None


class NodeState(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    SUCCESS = "success"
    FAILURE = "failure"

    @property
    def terminal(self) -> bool:
        return self in (NodeState.SUCCESS, NodeState.FAILURE)


@dataclass(frozen=True)
class FlowNode:
    id: str
    task_type: TaskType
    description: str
    state: NodeState = NodeState.PENDING
    context: str | None = None

    def evolve(self, **changes: Any) -> FlowNode:
        return replace(self, **changes)


@dataclass(frozen=True)
class FlowEdge:
    """``source`` provides knowledge to ``target``."""

    source: str
    target: str
    relation: str = ""

    @property
    def pair(self) -> tuple[str, str]:
        return (self.source, self.target)


@dataclass(frozen=True)
class Violation:
    kind: str
    ids: tuple[str, ...]
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(str(v) for v in self.violations)


@dataclass(frozen=True)
class FlowGraph:
    nodes: tuple[FlowNode, ...] = ()
    edges: tuple[FlowEdge, ...] = ()
    query_node_id: str = QUERY_NODE_ID

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: n.id)))
        object.__setattr__(self, "edges", tuple(sorted(self.edges, key=lambda e: e.pair)))

    @cached_property
    def _by_id(self) -> dict[str, FlowNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def _preds(self) -> dict[str, list[str]]:
        preds: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            preds.setdefault(e.target, []).append(e.source)
        return preds

    @cached_property
    def _succs(self) -> dict[str, list[str]]:
        succs: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            succs.setdefault(e.source, []).append(e.target)
        return succs

    @cached_property
    def _edge_by_pair(self) -> dict[tuple[str, str], FlowEdge]:
        return {e.pair: e for e in self.edges}

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    @property
    def query_node(self) -> FlowNode:
        return self._by_id[self.query_node_id]

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._by_id

    def node(self, node_id: str) -> FlowNode:
        return self._by_id[node_id]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._by_id

    def edge(self, source: str, target: str) -> FlowEdge | None:
        return self._edge_by_pair.get((source, target))

    def predecessors(self, node_id: str) -> list[str]:
        """Direct providers of ``node_id``, sorted by id."""
        return sorted(self._preds.get(node_id, ()))

    def successors(self, node_id: str) -> list[str]:
        return sorted(self._succs.get(node_id, ()))

    def with_nodes(self, updated: Iterable[FlowNode]) -> FlowGraph:
        """Copy with the given nodes swapped in by id."""
        swap = {n.id: n for n in updated}
        return FlowGraph(
            tuple(swap.get(n.id, n) for n in self.nodes), self.edges, self.query_node_id
        )

    def pending_ids(self) -> list[str]:
        return [n.id for n in self.nodes if n.state is NodeState.PENDING]


def new_graph(query: str) -> FlowGraph:
    """Initial flow holding only the query node."""
    if not query or not query.strip():
        raise InvalidInputError("query must be non-empty")
    return FlowGraph((FlowNode(QUERY_NODE_ID, TaskType.ANSWER, query),), (), QUERY_NODE_ID)


# -- validation ---------------------------------------------------------------


def find_cycles(node_ids: Iterable[str], edges: Iterable[tuple[str, str]]) -> list[tuple[str, ...]]:
    """Cycles found as back edges of an iterative DFS; each cycle is listed once
    as the path from the back-edge head around to its tail."""
    children: dict[str, list[str]] = {n: [] for n in node_ids}
    for s, t in edges:
        if s in children and t in children:
            children[s].append(t)
    for kids in children.values():
        kids.sort()

    WHITE, GRAY, BLACK = 0, 1, 2
    color = dict.fromkeys(children, WHITE)
    cycles: list[tuple[str, ...]] = []
    for root in sorted(children):
        if color[root] != WHITE:
            continue
        color[root] = GRAY
        path = [root]
        stack = [iter(children[root])]
        while stack:
            child = next(stack[-1], None)
            if child is None:
                stack.pop()
                color[path.pop()] = BLACK
                continue
            if color[child] == GRAY:
                cycles.append(tuple(path[path.index(child):]))
            elif color[child] == WHITE:
                color[child] = GRAY
                path.append(child)
                stack.append(iter(children[child]))
    return cycles


def validate(graph: FlowGraph) -> ValidationReport:
    """Check every structural invariant; violations are returned, never raised."""
    out: list[Violation] = []
    seen: set[str] = set()
    for n in graph.nodes:
        if not n.id:
            out.append(Violation("empty_id", ("",), "node with empty id"))
        elif n.id in seen:
            out.append(Violation("duplicate_node", (n.id,), f"duplicate node id {n.id}"))
        seen.add(n.id)
        if not n.description:
            out.append(Violation("empty_description", (n.id,), f"node {n.id} has empty description"))
        if n.state is NodeState.SUCCESS:
            if not n.context:
                out.append(Violation("context_state", (n.id,), f"success node {n.id} has no context"))
        elif n.context is not None:
            out.append(
                Violation("context_state", (n.id,), f"node {n.id} in state {n.state.value} carries context")
            )

    pairs: set[tuple[str, str]] = set()
    for e in graph.edges:
        if e.source == e.target:
            out.append(Violation("self_loop", (e.source,), f"self loop on {e.source}"))
        for end in (e.source, e.target):
            if end not in seen:
                out.append(
                    Violation("dangling_endpoint", (end,), f"edge {e.source}->{e.target} references absent node {end}")
                )
        if e.pair in pairs:
            out.append(Violation("duplicate_edge", e.pair, f"duplicate edge {e.source}->{e.target}"))
        pairs.add(e.pair)

    for cyc in find_cycles(seen, (e.pair for e in graph.edges if e.source != e.target)):
        out.append(Violation("cycle", tuple(sorted(cyc)), "cycle " + " -> ".join(cyc + cyc[:1])))

    q = graph.query_node_id
    if q not in seen:
        out.append(Violation("query_missing", (q,), f"query node {q!r} not in graph"))
    else:
        if graph.node(q).task_type is not TaskType.ANSWER:
            out.append(Violation("query_not_answer", (q,), f"query node {q} is not of type answer"))
        if graph.successors(q):
            out.append(Violation("query_has_outgoing", (q,), f"query node {q} has outgoing edges"))
    for n in graph.nodes:
        if n.task_type is TaskType.ANSWER and n.id != q:
            out.append(Violation("extra_answer_node", (n.id,), f"answer-type node {n.id} is not the query node"))
    return ValidationReport(tuple(out))


def ensure_valid(graph: FlowGraph) -> FlowGraph:
    report = validate(graph)
    if not report.ok:
        raise StructuralError(report)
    return graph


# -- scheduling ---------------------------------------------------------------


def frontier(graph: FlowGraph) -> list[str]:
    """Pending nodes whose every direct predecessor succeeded, sorted by id."""
    ensure_valid(graph)
    ok = NodeState.SUCCESS
    return [
        n.id
        for n in graph.nodes
        if n.state is NodeState.PENDING and all(graph.node(p).state is ok for p in graph.predecessors(n.id))
    ]


def layer_index(graph: FlowGraph) -> dict[str, int]:
    """Length of the longest predecessor chain ending at each node."""
    indeg = {n.id: len(graph.predecessors(n.id)) for n in graph.nodes}
    depth = dict.fromkeys(indeg, 0)
    ready = [n for n, d in indeg.items() if d == 0]
    while ready:
        u = ready.pop()
        for v in graph.successors(u):
            depth[v] = max(depth[v], depth[u] + 1)
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
    return depth


def topological_layers(graph: FlowGraph) -> list[list[str]]:
    ensure_valid(graph)
    depth = layer_index(graph)
    layers: list[list[str]] = [[] for _ in range(max(depth.values(), default=-1) + 1)]
    for node_id in sorted(depth):
        layers[depth[node_id]].append(node_id)
    return layers


# -- interchange format -------------------------------------------------------

_NODE_KEYS = {"node_id", "task_type", "content"}
_NODE_OPTIONAL = {"state", "context"}
_EDGE_KEYS = {"from", "to", "relationship"}


def _strip_trailing_commas(text: str) -> str:
    """Blank out commas that directly precede ``]`` or ``}``.

    Hand-written flows often carry them. Offsets are preserved so decoder
    error positions still point into the original text.
    """
    chars = list(text)
    in_str = escaped = False
    pending: int | None = None
    for i, ch in enumerate(chars):
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
            pending = None
        elif ch == ",":
            pending = i
        elif ch in "]}":
            if pending is not None:
                chars[pending] = " "
            pending = None
        elif not ch.isspace():
            pending = None
    return "".join(chars)


def loads_lenient(text: str) -> Any:
    """``json.loads`` that tolerates trailing commas."""
    try:
        return json.loads(_strip_trailing_commas(text))
    except json.JSONDecodeError as exc:
        raise GraphParseError(exc.msg, exc.lineno, exc.colno) from None


def _require_str(obj: Mapping[str, Any], key: str, where: str) -> str:
    value = obj[key]
    if not isinstance(value, str):
        raise GraphParseError(f"{where}: field {key!r} must be a string")
    return value


def graph_from_dict(data: Any) -> FlowGraph:
    """Build a graph from decoded interchange data (no validation)."""
    if not isinstance(data, dict):
        raise GraphParseError("flow must be an object with 'nodes' and 'edges'")
    if set(data) != {"nodes", "edges"}:
        extra = sorted(set(data) - {"nodes", "edges"})
        missing = sorted({"nodes", "edges"} - set(data))
        raise GraphParseError(f"bad top-level keys (unknown {extra}, missing {missing})")
    if not isinstance(data["nodes"], list) or not isinstance(data["edges"], list):
        raise GraphParseError("'nodes' and 'edges' must be lists")

    nodes = []
    for i, raw in enumerate(data["nodes"]):
        where = f"nodes[{i}]"
        if not isinstance(raw, dict):
            raise GraphParseError(f"{where}: expected an object")
        keys = set(raw)
        if not _NODE_KEYS <= keys or keys - _NODE_KEYS - _NODE_OPTIONAL:
            raise GraphParseError(f"{where}: fields must be {sorted(_NODE_KEYS)} plus optional {sorted(_NODE_OPTIONAL)}")
        state = NodeState.PENDING
        if "state" in raw:
            try:
                state = NodeState(_require_str(raw, "state", where))
            except ValueError:
                raise GraphParseError(f"{where}: unknown state {raw['state']!r}") from None
        context = _require_str(raw, "context", where) if "context" in raw else None
        nodes.append(
            FlowNode(
                _require_str(raw, "node_id", where),
                TaskType.parse(_require_str(raw, "task_type", where)),
                _require_str(raw, "content", where),
                state,
                context,
            )
        )

    edges = []
    for i, raw in enumerate(data["edges"]):
        where = f"edges[{i}]"
        if not isinstance(raw, dict):
            raise GraphParseError(f"{where}: expected an object")
        if set(raw) != _EDGE_KEYS:
            raise GraphParseError(f"{where}: fields must be exactly {sorted(_EDGE_KEYS)}")
        edges.append(
            FlowEdge(
                _require_str(raw, "from", where),
                _require_str(raw, "to", where),
                _require_str(raw, "relationship", where),
            )
        )

    # The query node is the unique answer-type node; validate() reports the rest.
    answers = [n.id for n in nodes if n.task_type is TaskType.ANSWER]
    query = answers[0] if len(answers) == 1 else ""
    return FlowGraph(tuple(nodes), tuple(edges), query)


def parse_graph(text: str) -> FlowGraph:
    """Decode and validate a flow in the interchange format."""
    return ensure_valid(graph_from_dict(loads_lenient(text)))


def _is_extended(graph: FlowGraph) -> bool:
    return any(n.state is not NodeState.PENDING or n.context is not None for n in graph.nodes)


def node_to_dict(node: FlowNode, extended: bool) -> dict[str, str]:
    out = {"node_id": node.id, "task_type": node.task_type.value, "content": node.description}
    if extended:
        out["state"] = node.state.value
        if node.context is not None:
            out["context"] = node.context
    return out


def edge_to_dict(edge: FlowEdge) -> dict[str, str]:
    return {"from": edge.source, "to": edge.target, "relationship": edge.relation}


def graph_to_dict(graph: FlowGraph, extended: bool | None = None) -> dict[str, list]:
    if extended is None:
        extended = _is_extended(graph)
    return {
        "nodes": [node_to_dict(n, extended) for n in graph.nodes],
        "edges": [edge_to_dict(e) for e in graph.edges],
    }


def serialize_graph(graph: FlowGraph, extended: bool | None = None) -> str:
    """Render in the interchange layout, one node or edge object per line.

    Per-node ``state``/``context`` are emitted when ``extended`` is true, or by
    default as soon as any node has left the pending state.
    """
    ensure_valid(graph)
    data = graph_to_dict(graph, extended)

    def block(key: str) -> str:
        items = data[key]
        if not items:
            return f' "{key}": []'
        body = ",\n".join("  " + json.dumps(item, ensure_ascii=False) for item in items)
        return f' "{key}": [\n{body}\n ]'

    return "{\n" + block("nodes") + ",\n" + block("edges") + "\n}\n"


# -- DOT export ---------------------------------------------------------------

_STATE_FILL = {
    NodeState.PENDING: "white",
    NodeState.RUNNING: "lightyellow",
    NodeState.SUCCESS: "palegreen",
    NodeState.FAILURE: "lightcoral",
}


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def to_dot(graph: FlowGraph) -> str:
    ensure_valid(graph)
    lines = ["digraph flow {", "  rankdir=BT;"]
    for n in graph.nodes:
        style = "rounded,filled,bold" if n.id == graph.query_node_id else "rounded,filled"
        lines.append(
            f"  {_dot_quote(n.id)} [label={_dot_quote(f'{n.id}: {n.task_type.value}')}, shape=box, "
            f'style="{style}", fillcolor="{_STATE_FILL[n.state]}"];'
        )
    for e in graph.edges:
        attrs = f" [label={_dot_quote(e.relation)}]" if e.relation else ""
        lines.append(f"  {_dot_quote(e.source)} -> {_dot_quote(e.target)}{attrs};")
    lines.append("}")
    return "\n".join(lines) + "\n"
