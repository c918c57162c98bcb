"""Graph rewriting between execution rounds.

Six operations (add/delete/modify on nodes and edges) are applied one at a
time with full validation; a plan is applied all-or-nothing.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Any, Union

from . import prompts
from .backends import Backend, Message, complete
from .errors import (
    DuplicateNodeError,
    FlowError,
    InvalidOpError,
    MissingTargetError,
    PlanApplicationError,
    PlanParseError,
    ProtectedNodeError,
    RefinementError,
    StructuralError,
)
from .graph import (
    FlowEdge,
    FlowGraph,
    FlowNode,
    NodeState,
    TaskType,
    ensure_valid,
    loads_lenient,
    serialize_graph,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AddNode:
    node_id: str
    task_type: TaskType
    content: str


@dataclass(frozen=True)
class DelNode:
    node_id: str


@dataclass(frozen=True)
class ModNode:
    node_id: str
    content: str | None = None
    task_type: TaskType | None = None


@dataclass(frozen=True)
class AddEdge:
    source: str
    target: str
    relation: str = ""


@dataclass(frozen=True)
class DelEdge:
    source: str
    target: str


@dataclass(frozen=True)
class ModEdge:
    source: str
    target: str
    relation: str | None = None
    new_source: str | None = None
    new_target: str | None = None


GraphOp = Union[AddNode, DelNode, ModNode, AddEdge, DelEdge, ModEdge]
OP_KINDS = ("AddNode", "DelNode", "ModNode", "AddEdge", "DelEdge", "ModEdge")


@dataclass(frozen=True)
class RefinementPlan:
    ops: tuple[GraphOp, ...] = ()
    rationale: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"ops": [op_to_dict(op) for op in self.ops], "rationale": self.rationale}


def op_to_dict(op: GraphOp) -> dict[str, Any]:
    kind = type(op).__name__
    if isinstance(op, AddNode):
        return {"op": kind, "node_id": op.node_id, "task_type": op.task_type.value, "content": op.content}
    if isinstance(op, DelNode):
        return {"op": kind, "node_id": op.node_id}
    if isinstance(op, ModNode):
        out: dict[str, Any] = {"op": kind, "node_id": op.node_id}
        if op.content is not None:
            out["content"] = op.content
        if op.task_type is not None:
            out["task_type"] = op.task_type.value
        return out
    if isinstance(op, AddEdge):
        return {"op": kind, "from": op.source, "to": op.target, "relationship": op.relation}
    if isinstance(op, DelEdge):
        return {"op": kind, "from": op.source, "to": op.target}
    out = {"op": kind, "from": op.source, "to": op.target}
    for key, value in (("relationship", op.relation), ("new_from", op.new_source), ("new_to", op.new_target)):
        if value is not None:
            out[key] = value
    return out


# -- wire format ----------------------------------------------------------------

_FIELDS = {
    "AddNode": ({"node_id", "task_type", "content"}, set()),
    "DelNode": ({"node_id"}, set()),
    "ModNode": ({"node_id"}, {"content", "task_type"}),
    "AddEdge": ({"from", "to"}, {"relationship"}),
    "DelEdge": ({"from", "to"}, set()),
    "ModEdge": ({"from", "to"}, {"relationship", "new_from", "new_to"}),
}

_NO_CHANGES = re.compile(r"^\W*no changes\W*$", re.IGNORECASE)
_FENCE = re.compile(r"^```[a-zA-Z]*\n(.*)\n```$", re.DOTALL)


def _task_type(value: Any, where: str) -> TaskType:
    try:
        return TaskType(value)
    except ValueError:
        raise PlanParseError(f"{where}: unknown task type {value!r}") from None


def op_from_dict(raw: Any, where: str = "op") -> GraphOp:
    if not isinstance(raw, dict) or raw.get("op") not in _FIELDS:
        raise PlanParseError(f"{where}: 'op' must be one of {', '.join(OP_KINDS)}")
    kind = raw["op"]
    required, optional = _FIELDS[kind]
    keys = set(raw) - {"op"}
    if not required <= keys or keys - required - optional:
        raise PlanParseError(f"{where}: {kind} takes {sorted(required)} plus optional {sorted(optional)}")
    for key in keys:
        if not isinstance(raw[key], str):
            raise PlanParseError(f"{where}: field {key!r} must be a string")
        if key in ("node_id", "from", "to", "new_from", "new_to") and not raw[key]:
            raise PlanParseError(f"{where}: field {key!r} must be non-empty")

    if kind == "AddNode":
        return AddNode(raw["node_id"], _task_type(raw["task_type"], where), raw["content"])
    if kind == "DelNode":
        return DelNode(raw["node_id"])
    if kind == "ModNode":
        if not keys & optional:
            raise PlanParseError(f"{where}: ModNode needs content and/or task_type")
        ttype = _task_type(raw["task_type"], where) if "task_type" in raw else None
        return ModNode(raw["node_id"], raw.get("content"), ttype)
    if kind == "AddEdge":
        return AddEdge(raw["from"], raw["to"], raw.get("relationship", ""))
    if kind == "DelEdge":
        return DelEdge(raw["from"], raw["to"])
    if not keys & optional:
        raise PlanParseError(f"{where}: ModEdge needs relationship, new_from or new_to")
    return ModEdge(raw["from"], raw["to"], raw.get("relationship"), raw.get("new_from"), raw.get("new_to"))


def parse_plan(text: str) -> RefinementPlan:
    """Decode ``{"ops": [...], "rationale": ...}`` or the ``no changes`` token."""
    body = text.strip()
    fenced = _FENCE.match(body)
    if fenced:
        body = fenced.group(1).strip()
    if _NO_CHANGES.match(body):
        return RefinementPlan()
    try:
        data = loads_lenient(body)
    except FlowError as exc:
        raise PlanParseError(f"refinement plan is not JSON: {exc}") from None
    if not isinstance(data, dict) or "ops" not in data or set(data) - {"ops", "rationale"}:
        raise PlanParseError("refinement plan must be an object with 'ops' and optional 'rationale'")
    if not isinstance(data["ops"], list):
        raise PlanParseError("'ops' must be a list")
    rationale = data.get("rationale")
    if rationale is not None and not isinstance(rationale, str):
        raise PlanParseError("'rationale' must be text")
    ops = tuple(op_from_dict(raw, f"ops[{i}]") for i, raw in enumerate(data["ops"]))
    return RefinementPlan(ops, rationale)


def serialize_plan(plan: RefinementPlan) -> str:
    return json.dumps(plan.to_dict(), ensure_ascii=False)


# -- application ----------------------------------------------------------------


def _require_node(graph: FlowGraph, node_id: str) -> FlowNode:
    if not graph.has_node(node_id):
        raise MissingTargetError(f"no node {node_id!r}")
    return graph.node(node_id)


def _require_edge(graph: FlowGraph, source: str, target: str) -> FlowEdge:
    edge = graph.edge(source, target)
    if edge is None:
        raise MissingTargetError(f"no edge {source}->{target}")
    return edge


def _apply(graph: FlowGraph, op: GraphOp) -> FlowGraph:
    q = graph.query_node_id
    nodes, edges = graph.nodes, graph.edges

    if isinstance(op, AddNode):
        if not op.node_id:
            raise InvalidOpError("AddNode needs a node id")
        if graph.has_node(op.node_id):
            raise DuplicateNodeError(f"node {op.node_id!r} already exists")
        nodes = nodes + (FlowNode(op.node_id, op.task_type, op.content),)
    elif isinstance(op, DelNode):
        _require_node(graph, op.node_id)
        if op.node_id == q:
            raise ProtectedNodeError("the query node cannot be deleted")
        nodes = tuple(n for n in nodes if n.id != op.node_id)
        edges = tuple(e for e in edges if op.node_id not in e.pair)
    elif isinstance(op, ModNode):
        node = _require_node(graph, op.node_id)
        if op.content is None and op.task_type is None:
            raise InvalidOpError("ModNode changes nothing")
        if op.node_id == q and op.task_type not in (None, TaskType.ANSWER):
            raise ProtectedNodeError("the query node cannot be retyped")
        changes: dict[str, Any] = {}
        if op.task_type is not None:
            changes["task_type"] = op.task_type
        if op.content is not None and op.content != node.description:
            changes["description"] = op.content
            # Gathered knowledge no longer answers the rewritten task.
            if node.state.terminal:
                changes.update(state=NodeState.PENDING, context=None)
        new = node.evolve(**changes)
        nodes = tuple(new if n.id == op.node_id else n for n in nodes)
    elif isinstance(op, AddEdge):
        _require_node(graph, op.source)
        _require_node(graph, op.target)
        edges = edges + (FlowEdge(op.source, op.target, op.relation),)
    elif isinstance(op, DelEdge):
        _require_edge(graph, op.source, op.target)
        edges = tuple(e for e in edges if e.pair != (op.source, op.target))
    elif isinstance(op, ModEdge):
        old = _require_edge(graph, op.source, op.target)
        if op.relation is None and op.new_source is None and op.new_target is None:
            raise InvalidOpError("ModEdge changes nothing")
        source = op.new_source if op.new_source is not None else old.source
        target = op.new_target if op.new_target is not None else old.target
        _require_node(graph, source)
        _require_node(graph, target)
        relation = op.relation if op.relation is not None else old.relation
        edges = tuple(e for e in edges if e.pair != old.pair) + (FlowEdge(source, target, relation),)
    else:
        raise InvalidOpError(f"not a graph op: {op!r}")

    return ensure_valid(FlowGraph(nodes, edges, q))


def apply_op(graph: FlowGraph, op: GraphOp) -> FlowGraph:
    """Return a new graph with ``op`` applied; the input is never modified.

    Raises a :class:`RefinementError` subclass for bad targets and
    :class:`StructuralError` when the result would be invalid (cycle,
    duplicate edge, second answer node, ...).
    """
    ensure_valid(graph)
    return _apply(graph, op)


def apply_plan(graph: FlowGraph, plan: RefinementPlan) -> FlowGraph:
    """Apply ops in order, all or nothing.

    On failure raises :class:`PlanApplicationError` whose ``graph`` is the
    untouched input.
    """
    ensure_valid(graph)
    current = graph
    for i, op in enumerate(plan.ops):
        try:
            current = _apply(current, op)
        except (RefinementError, StructuralError) as exc:
            raise PlanApplicationError(i, exc, graph) from exc
    return current


# -- backend-driven refinement --------------------------------------------------


@dataclass(frozen=True)
class RefineOutcome:
    graph: FlowGraph
    plan: RefinementPlan
    repairs: int
    degraded: bool


def refine_detailed(
    graph: FlowGraph, refiner: Backend, *, round_number: int = 0, repair_attempts: int = 2
) -> RefineOutcome:
    ensure_valid(graph)
    messages = [
        Message("system", prompts.REFINER),
        Message("user", f"[refine round={round_number}]\n" + serialize_graph(graph, extended=True)),
    ]
    for attempt in range(repair_attempts + 1):
        raw = complete(messages, refiner).response
        try:
            plan = parse_plan(raw)
            return RefineOutcome(apply_plan(graph, plan), plan, attempt, False)
        except (PlanParseError, PlanApplicationError) as exc:
            reason = str(exc)
        messages = messages + [
            Message("assistant", raw),
            Message(
                "user",
                f"[refine-repair round={round_number} attempt={attempt + 1}]\n"
                f"Your plan was rejected: {reason}\nReply with a corrected plan.",
            ),
        ]
    log.warning("refinement in round %d degraded to the empty plan: %s", round_number, reason)
    return RefineOutcome(graph, RefinementPlan(), repair_attempts, True)


def refine(
    graph: FlowGraph, refiner: Backend, *, round_number: int = 0, repair_attempts: int = 2
) -> tuple[FlowGraph, RefinementPlan]:
    outcome = refine_detailed(graph, refiner, round_number=round_number, repair_attempts=repair_attempts)
    return outcome.graph, outcome.plan
