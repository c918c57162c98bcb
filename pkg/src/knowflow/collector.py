"""Knowledge collection: execute every ready node concurrently, distill each
trajectory into a context, and merge outcomes into a new graph."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Union

from . import prompts
from .backends import Backend, BackendExchange, Message, complete
from .errors import BackendError, InvalidInputError, NoProgressError, ScenarioMissError, UnknownToolError, describe
from .graph import FlowGraph, FlowNode, NodeState, frontier
from .tools import ToolCallRecord, Toolkit, ToolRegistry

log = logging.getLogger(__name__)

TrajectoryItem = Union[BackendExchange, ToolCallRecord]


@dataclass(frozen=True)
class ExecutorConfig:
    max_parallel: int = 8
    per_node_timeout: float = 120.0
    max_tool_calls: int = 25
    retries: int = 1
    distill_max_chars: int = 2000

    def __post_init__(self) -> None:
        if self.max_parallel < 1 or self.max_tool_calls < 1:
            raise InvalidInputError("max_parallel and max_tool_calls must be >= 1")
        if self.retries < 0 or self.per_node_timeout <= 0 or self.distill_max_chars < 1:
            raise InvalidInputError("retries >= 0, per_node_timeout > 0, distill_max_chars >= 1 required")


@dataclass(frozen=True)
class ExecutionRecord:
    node_id: str
    outcome_state: NodeState
    context: str | None
    exchanges: tuple[BackendExchange, ...]
    tool_calls: tuple[ToolCallRecord, ...]
    elapsed: float = field(default=0.0, compare=False)
    error: str | None = None

    def __post_init__(self) -> None:
        if not self.outcome_state.terminal:
            raise InvalidInputError("execution outcome must be success or failure")
        if (self.context is not None) != (self.outcome_state is NodeState.SUCCESS):
            raise InvalidInputError("context must be present exactly on success")

    def to_dict(self, timings: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "node_id": self.node_id,
            "state": self.outcome_state.value,
            "context": self.context,
            "error": self.error,
            "exchanges": [ex.to_dict(timings) for ex in self.exchanges],
            "tool_calls": [tc.to_dict() for tc in self.tool_calls],
        }
        if timings:
            out["elapsed"] = round(self.elapsed, 6)
        return out


# -- executor wire protocol -----------------------------------------------------


def parse_action(response: str) -> tuple[str, str, str]:
    """Classify an executor reply as ``("tool", name, args)``,
    ``("final", text, "")`` or ``("failed", reason, "")``.

    Replies that are not a recognised JSON object count as a final answer.
    """
    text = response.strip()
    if not text:
        return ("failed", "empty reply", "")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        return ("final", text, "")
    if isinstance(data, dict):
        if "tool" in data:
            args = data.get("arguments", "")
            if not isinstance(args, str):
                args = json.dumps(args, sort_keys=True, ensure_ascii=False)
            return ("tool", str(data["tool"]), args)
        if "failed" in data:
            return ("failed", str(data["failed"]), "")
        if "final" in data:
            return ("final", str(data["final"]), "")
    return ("final", text, "")


def render_task(node: FlowNode, upstream_contexts: Sequence[tuple[str, str]]) -> str:
    lines = [
        f"[execute] node_id: {node.id}",
        f"task_type: {node.task_type.value}",
        f"description: {node.description}",
    ]
    if upstream_contexts:
        lines.append("upstream contexts:")
        for node_id, context in upstream_contexts:
            lines.append(f"[context {node_id}]")
            lines.append(context)
    else:
        lines.append("upstream contexts: (none)")
    return "\n".join(lines)


def _tool_message(node_id: str, index: int, record: ToolCallRecord) -> str:
    ok = "true" if record.ok else "false"
    return f"[tool_result node={node_id} call={index} tool={record.tool_name} ok={ok}]\n{record.result}"


def render_trajectory(trajectory: Sequence[TrajectoryItem]) -> str:
    parts = []
    for item in trajectory:
        if isinstance(item, ToolCallRecord):
            status = "ok" if item.ok else "error"
            parts.append(f"tool {item.tool_name}({item.arguments}) -> {status}: {item.result}")
        else:
            parts.append(f"assistant: {item.response}")
    return "\n".join(parts)


def _complete_retrying(backend: Backend, messages: list[Message], retries: int) -> BackendExchange:
    for attempt in range(retries + 1):
        try:
            return complete(messages, backend)
        except ScenarioMissError:
            raise
        except BackendError as exc:
            if attempt == retries:
                raise
            log.warning("executor call failed, retrying (%d/%d): %s", attempt + 1, retries, exc)
    raise AssertionError("unreachable")


def distill_context(
    trajectory: Sequence[TrajectoryItem],
    executor: Backend,
    *,
    node: FlowNode | None = None,
    max_chars: int = 2000,
    retries: int = 0,
) -> tuple[str, BackendExchange]:
    """One extra exchange summarizing a successful trajectory.

    Returns the context (truncated to ``max_chars``) and the exchange.
    """
    if not trajectory:
        raise InvalidInputError("cannot distill an empty trajectory")
    header = f"[distill] node_id: {node.id}\ndescription: {node.description}\n" if node else "[distill]\n"
    messages = [
        Message("system", prompts.DISTILL),
        Message("user", header + "trajectory:\n" + render_trajectory(trajectory)),
    ]
    ex = _complete_retrying(executor, messages, retries)
    context = ex.response.strip()[:max_chars].strip()
    if not context:
        raise BackendError("distillation returned an empty context")
    return context, ex


def execute_node(
    node: FlowNode,
    upstream_contexts: Sequence[tuple[str, str]],
    executor: Backend,
    tools: Toolkit,
    config: ExecutorConfig | None = None,
) -> ExecutionRecord:
    """Run one node to a terminal outcome. Backend, tool and budget problems
    become a failure record rather than an exception."""
    config = config or ExecutorConfig()
    if node.state is not NodeState.PENDING:
        raise InvalidInputError(f"node {node.id} is {node.state.value}, expected pending")
    start = time.monotonic()
    deadline = start + config.per_node_timeout
    exchanges: list[BackendExchange] = []
    calls: list[ToolCallRecord] = []
    trajectory: list[TrajectoryItem] = []

    def finish(state: NodeState, context: str | None = None, error: str | None = None) -> ExecutionRecord:
        return ExecutionRecord(
            node.id, state, context, tuple(exchanges), tuple(calls), time.monotonic() - start, error
        )

    messages = [Message("system", prompts.EXECUTOR), Message("user", render_task(node, upstream_contexts))]
    try:
        while True:
            if time.monotonic() > deadline:
                return finish(NodeState.FAILURE, error="timeout")
            ex = _complete_retrying(executor, messages, config.retries)
            exchanges.append(ex)
            trajectory.append(ex)
            action, value, args = parse_action(ex.response)
            if action == "failed":
                return finish(NodeState.FAILURE, error=f"executor reported failure: {value}")
            if action == "final":
                break
            if len(calls) >= config.max_tool_calls:
                return finish(NodeState.FAILURE, error="tool-call budget exceeded")
            try:
                record = tools.invoke(value, args)
            except UnknownToolError as exc:
                reply = f"[tool_result node={node.id} call={len(calls) + 1} tool={value} ok=false]\n{exc}"
            else:
                calls.append(record)
                trajectory.append(record)
                reply = _tool_message(node.id, len(calls), record)
            messages = messages + [Message("assistant", ex.response), Message("tool", reply)]

        if time.monotonic() > deadline:
            return finish(NodeState.FAILURE, error="timeout")
        context, ex = distill_context(
            trajectory, executor, node=node, max_chars=config.distill_max_chars, retries=config.retries
        )
        exchanges.append(ex)
    except BackendError as exc:
        return finish(NodeState.FAILURE, error=describe(exc))
    return finish(NodeState.SUCCESS, context=context)


def upstream_contexts(graph: FlowGraph, node_id: str) -> list[tuple[str, str]]:
    """Contexts of the successful direct predecessors, by node id."""
    out = []
    for p in graph.predecessors(node_id):
        pred = graph.node(p)
        if pred.state is NodeState.SUCCESS:
            out.append((p, pred.context or ""))
    return out


def executable_nodes(graph: FlowGraph) -> list[str]:
    return [n for n in frontier(graph) if n != graph.query_node_id]


def collect_round(
    graph: FlowGraph,
    executor: Backend,
    tools: ToolRegistry,
    config: ExecutorConfig | None = None,
) -> tuple[FlowGraph, list[ExecutionRecord]]:
    """Execute all ready non-query nodes with bounded parallelism.

    Raises :class:`NoProgressError` when nothing is executable.
    """
    config = config or ExecutorConfig()
    ready = executable_nodes(graph)
    if not ready:
        raise NoProgressError("no executable nodes besides the query node")

    def run(node_id: str) -> ExecutionRecord:
        return execute_node(
            graph.node(node_id), upstream_contexts(graph, node_id), executor, tools.instance(), config
        )

    with ThreadPoolExecutor(max_workers=min(config.max_parallel, len(ready))) as pool:
        records = list(pool.map(run, ready))

    merged = graph.with_nodes(
        graph.node(r.node_id).evolve(state=r.outcome_state, context=r.context) for r in records
    )
    return merged, records
