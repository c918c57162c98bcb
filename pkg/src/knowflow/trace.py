"""Append-only line-delimited event log and run-trace containers."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backends import BackendExchange, Message
from .collector import ExecutionRecord
from .graph import FlowGraph, NodeState, parse_graph
from .planner import ExpansionStep
from .refiner import RefinementPlan, parse_plan
from .summarizer import Conclusion, SummaryMode
from .tools import ToolCallRecord


class TraceLog:
    """Event list mirrored to a JSONL file, flushed after every event."""

    def __init__(self, path: str | os.PathLike[str] | None = None, prior: list[dict] | None = None) -> None:
        self.path = Path(path) if path else None
        self.events: list[dict[str, Any]] = list(prior or [])
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", encoding="utf-8") as fh:
                for ev in self.events:
                    fh.write(_line(ev))

    def emit(self, event: str, round_number: int, **fields: Any) -> dict[str, Any]:
        ev = {"event": event, "round": round_number, **fields}
        self.events.append(ev)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(_line(ev))
                fh.flush()
        return ev

    def __len__(self) -> int:
        return len(self.events)


def _line(event: dict[str, Any]) -> str:
    return json.dumps(event, ensure_ascii=False) + "\n"


def read_events(path: str | os.PathLike[str], limit: int | None = None) -> list[dict[str, Any]]:
    """Decode a trace file; a torn final line (crash mid-write) is dropped."""
    events = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if limit is not None and len(events) >= limit:
                break
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError:
                break
    return events


@dataclass
class RoundTrace:
    round: int
    frontier: list[str]
    records: list[ExecutionRecord] = field(default_factory=list)
    plan: RefinementPlan | None = None
    snapshot: str | None = None


@dataclass
class RunTrace:
    run_id: str
    config: dict[str, Any]
    steps: list[ExpansionStep] = field(default_factory=list)
    rounds: list[RoundTrace] = field(default_factory=list)
    snapshots: dict[int, str] = field(default_factory=dict)
    conclusion: Conclusion | None = None
    final_graph: FlowGraph | None = None
    status: str = "running"
    exit_code: int | None = None
    error: str | None = None
    timings: dict[str, float] = field(default_factory=dict)
    events: list[dict[str, Any]] = field(default_factory=list)

    @property
    def collect_rounds(self) -> list[list[str]]:
        """Executed node ids per collect round."""
        return [[r.node_id for r in rt.records] for rt in self.rounds]

    def round(self, number: int) -> RoundTrace:
        for rt in self.rounds:
            if rt.round == number:
                return rt
        raise KeyError(number)


# -- reconstruction ---------------------------------------------------------------


def exchange_from_dict(data: dict[str, Any]) -> BackendExchange:
    msgs = tuple(Message(m["role"], m["content"]) for m in data["messages"])
    return BackendExchange(msgs, data["response"], data["fingerprint"], data.get("latency", 0.0))


def record_from_dict(data: dict[str, Any]) -> ExecutionRecord:
    return ExecutionRecord(
        data["node_id"],
        NodeState(data["state"]),
        data.get("context"),
        tuple(exchange_from_dict(e) for e in data.get("exchanges", [])),
        tuple(ToolCallRecord(**tc) for tc in data.get("tool_calls", [])),
        data.get("elapsed", 0.0),
        data.get("error"),
    )


def snapshot_text(event: dict[str, Any], snapshot_dir: str | os.PathLike[str] | None) -> str:
    if "graph" in event:
        return event["graph"]
    if snapshot_dir is None:
        raise FileNotFoundError(f"snapshot {event['snapshot']} needs a snapshot directory")
    return Path(snapshot_dir, event["snapshot"]).read_text(encoding="utf-8")


def trace_from_events(
    events: list[dict[str, Any]], snapshot_dir: str | os.PathLike[str] | None = None
) -> RunTrace:
    """Rebuild a :class:`RunTrace` from its event log."""
    if not events or events[0]["event"] != "run_start":
        raise ValueError("trace does not start with a run_start event")
    head = events[0]
    trace = RunTrace(head["run_id"], head["config"], events=list(events))
    rounds: dict[int, RoundTrace] = {}
    for ev in events[1:]:
        kind, number = ev["event"], ev["round"]
        if kind == "plan_step":
            trace.steps.append(
                ExpansionStep(
                    ev["iteration"],
                    parse_graph(ev["before"]),
                    parse_graph(ev["after"]),
                    ev["changed"],
                    frozenset(ev["added_nodes"]),
                    frozenset(tuple(p) for p in ev["added_edges"]),
                    tuple(exchange_from_dict(e) for e in ev["exchanges"]),
                )
            )
        elif kind == "round_start":
            rounds[number] = RoundTrace(number, list(ev["frontier"]))
            trace.rounds.append(rounds[number])
        elif kind == "node_executed":
            rounds[number].records.append(record_from_dict(ev))
        elif kind == "refine" and ev.get("trigger") == "round":
            rounds[number].plan = parse_plan(json.dumps({"ops": ev["ops"], "rationale": ev["rationale"]}))
        elif kind == "snapshot":
            text = snapshot_text(ev, snapshot_dir)
            trace.snapshots[number] = text
            if number in rounds:
                rounds[number].snapshot = ev.get("snapshot")
        elif kind == "conclusion":
            trace.conclusion = Conclusion(
                ev["answer"], SummaryMode(ev["mode"]), tuple(ev["sources"]), ev["degraded"], ev["reason"]
            )
            trace.final_graph = parse_graph(ev["graph"])
        elif kind == "abort":
            trace.error = ev["error"]
        elif kind == "run_end":
            trace.status = ev["status"]
            trace.exit_code = ev["exit_code"]
    return trace


def load_trace(path: str | os.PathLike[str], snapshot_dir: str | os.PathLike[str] | None = None) -> RunTrace:
    return trace_from_events(read_events(path), snapshot_dir)
