"""End-to-end driver: plan, then alternate collect rounds and refinement until
only the query node is left, then conclude.

Every phase boundary produces a :class:`Checkpoint`; :func:`resume` picks a
run up from one and reproduces the rest of the trace exactly (with scripted
backends).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from . import prompts
from .backends import Backend, RecordingBackend, ScriptedScenario, make_backend
from .collector import ExecutorConfig, collect_round, executable_nodes
from .errors import (
    BackendError,
    CheckpointError,
    ConclusionError,
    FlowError,
    IncompatibleConfigError,
    InvalidInputError,
    NothingToExportError,
    PlannerOutputError,
    RoundRangeError,
    describe,
)
from .graph import FlowGraph, frontier, parse_graph, serialize_graph, to_dot
from .planner import FLOW, SEQUENTIAL, PlannerConfig, plan, plan_sequential
from .refiner import refine_detailed
from .summarizer import SummaryMode, conclude
from .tools import ToolRegistry, default_registry
from .trace import RoundTrace, RunTrace, TraceLog, read_events, trace_from_events

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DEGRADED = 2
EXIT_ABORTED = 3

PRE_COLLECT = "pre-collect"
PRE_REFINE = "pre-refine"
PRE_CONCLUDE = "pre-conclude"
PHASES = (PRE_COLLECT, PRE_REFINE, PRE_CONCLUDE)


@dataclass
class RunConfig:
    query: str
    mode: SummaryMode = SummaryMode.QA
    planner_mode: str = FLOW
    refinement_enabled: bool = True
    max_rounds: int = 12
    backend: str | Backend = "remote"
    tools: ToolRegistry | None = None
    tool_availability: dict[str, str] = field(default_factory=dict)
    trace_path: str | os.PathLike[str] | None = None
    snapshot_dir: str | os.PathLike[str] | None = None
    report_path: str | os.PathLike[str] | None = None
    checkpoint_path: str | os.PathLike[str] | None = None
    executor: ExecutorConfig = field(default_factory=ExecutorConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    refine_repair_attempts: int = 2
    trace_timings: bool = False
    run_id: str | None = None

    def __post_init__(self) -> None:
        self.mode = SummaryMode(self.mode)
        if not self.query or not self.query.strip():
            raise InvalidInputError("query must be non-empty")
        if self.max_rounds < 1:
            raise InvalidInputError("max_rounds must be >= 1")
        if self.planner_mode not in (FLOW, SEQUENTIAL):
            raise InvalidInputError(f"unknown planner mode {self.planner_mode!r}")
        if self.planner.planner_mode != self.planner_mode:
            self.planner = PlannerConfig(self.planner.max_iterations, self.planner.repair_attempts, self.planner_mode)

    def echo(self) -> dict[str, Any]:
        """Run-defining settings; output locations are left out so that the
        same run written to different places logs identically."""
        backend = self.backend
        if not isinstance(backend, str):
            backend = getattr(backend, "label", type(backend).__name__)
        elif backend.startswith("scripted:"):
            backend = "scripted"
        return {
            "query": self.query,
            "mode": self.mode.value,
            "planner_mode": self.planner_mode,
            "refinement_enabled": self.refinement_enabled,
            "max_rounds": self.max_rounds,
            "backend": backend,
            "tool_availability": dict(sorted(self.tool_availability.items())),
            "executor": asdict(self.executor),
            "planner": asdict(self.planner),
            "refine_repair_attempts": self.refine_repair_attempts,
        }

    def derived_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        blob = json.dumps(self.echo(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class Checkpoint:
    run_id: str
    query: str
    round: int
    phase: str
    graph: str
    event_count: int
    blocked_refines: int = 0
    reason: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, indent=1) + "\n"

    def save(self, path: str | os.PathLike[str]) -> None:
        tmp = Path(f"{path}.tmp")
        tmp.write_text(self.to_json(), encoding="utf-8")
        os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike[str]) -> Checkpoint:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        ckpt = Checkpoint(**data)
    except (OSError, ValueError, TypeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return _checked(ckpt)


def _checked(ckpt: Checkpoint) -> Checkpoint:
    if ckpt.phase not in PHASES:
        raise CheckpointError(f"unknown phase {ckpt.phase!r}")
    try:
        parse_graph(ckpt.graph)
    except FlowError as exc:
        raise CheckpointError(f"checkpoint graph is invalid: {exc}") from exc
    return ckpt


def _resolve_backend(config: RunConfig) -> tuple[Backend, ScriptedScenario | None]:
    if isinstance(config.backend, str):
        return make_backend(config.backend)
    scenario = getattr(config.backend, "scenario", None)
    return config.backend, scenario if isinstance(scenario, ScriptedScenario) else None


class _Run:
    def __init__(self, config: RunConfig, hook: Callable[[Checkpoint], None] | None, log_: TraceLog) -> None:
        self.config = config
        self.hook = hook
        self.log = log_
        backend, scenario = _resolve_backend(config)
        self.backend = backend
        self.recorder = RecordingBackend(backend)
        self.tools = config.tools or default_registry(
            scenario.tools if scenario else (), config.tool_availability
        )
        self.trace = RunTrace(config.derived_run_id(), config.echo(), events=log_.events)
        self.snapshot_dir = Path(config.snapshot_dir) if config.snapshot_dir else None
        if self.snapshot_dir:
            self.snapshot_dir.mkdir(parents=True, exist_ok=True)
        self.timings = config.trace_timings

    # -- helpers

    def _exchanges(self) -> list[dict]:
        return [ex.to_dict(self.timings) for ex in self.recorder.drain()]

    def _timed(self, name: str, start: float) -> None:
        self.trace.timings[name] = self.trace.timings.get(name, 0.0) + time.perf_counter() - start

    def checkpoint(self, graph: FlowGraph, round_number: int, phase: str, blocked: int, reason: str | None) -> None:
        ckpt = Checkpoint(
            self.trace.run_id,
            self.config.query,
            round_number,
            phase,
            serialize_graph(graph, extended=True),
            len(self.log),
            blocked,
            reason,
        )
        if self.config.checkpoint_path:
            ckpt.save(self.config.checkpoint_path)
        if self.hook:
            self.hook(ckpt)

    def snapshot(self, graph: FlowGraph, round_number: int) -> None:
        text = serialize_graph(graph, extended=True)
        self.trace.snapshots[round_number] = text
        if self.snapshot_dir:
            name = f"round_{round_number:03d}.json"
            (self.snapshot_dir / name).write_text(text, encoding="utf-8")
            self.log.emit("snapshot", round_number, snapshot=name)
            ref = name
        else:
            self.log.emit("snapshot", round_number, graph=text)
            ref = None
        for rt in self.trace.rounds:
            if rt.round == round_number:
                rt.snapshot = ref

    def finish(self, status: str, exit_code: int, round_number: int) -> RunTrace:
        self.trace.status = status
        self.trace.exit_code = exit_code
        self.log.emit("run_end", round_number, status=status, exit_code=exit_code)
        return self.trace

    def abort(self, exc: Exception, round_number: int) -> RunTrace:
        self.trace.error = describe(exc)
        self.log.emit("abort", round_number, error=self.trace.error, exchanges=self._exchanges())
        return self.finish("aborted", EXIT_ABORTED, round_number)

    # -- phases

    def plan(self) -> FlowGraph:
        start = time.perf_counter()
        cfg = self.config
        if cfg.planner_mode == SEQUENTIAL:
            graph = plan_sequential(cfg.query, self.recorder, cfg.planner)
            self.log.emit("plan_sequential", 0, graph=serialize_graph(graph), exchanges=self._exchanges())
        else:
            graph, steps = plan(cfg.query, self.recorder, cfg.planner)
            self.recorder.drain()
            for step in steps:
                self.trace.steps.append(step)
                self.log.emit(
                    "plan_step",
                    0,
                    iteration=step.iteration,
                    changed=step.changed,
                    added_nodes=sorted(step.added_node_ids),
                    added_edges=[list(p) for p in sorted(step.added_edge_pairs)],
                    before=serialize_graph(step.before),
                    after=serialize_graph(step.after),
                    exchanges=[ex.to_dict(self.timings) for ex in step.exchanges],
                )
        self._timed("plan", start)
        self.snapshot(graph, 0)
        return graph

    def refine(self, graph: FlowGraph, round_number: int, trigger: str) -> FlowGraph:
        start = time.perf_counter()
        outcome = refine_detailed(
            graph, self.recorder, round_number=round_number, repair_attempts=self.config.refine_repair_attempts
        )
        if trigger == "round":
            for rt in self.trace.rounds:
                if rt.round == round_number:
                    rt.plan = outcome.plan
        self.log.emit(
            "refine",
            round_number,
            trigger=trigger,
            ops=outcome.plan.to_dict()["ops"],
            rationale=outcome.plan.rationale,
            repairs=outcome.repairs,
            degraded=outcome.degraded,
            changed=outcome.graph != graph,
            exchanges=self._exchanges(),
        )
        self._timed("refine", start)
        return outcome.graph

    def collect(self, graph: FlowGraph, round_number: int) -> FlowGraph:
        start = time.perf_counter()
        ready = executable_nodes(graph)
        self.trace.rounds.append(RoundTrace(round_number, ready))
        self.log.emit("round_start", round_number, frontier=ready)
        graph, records = collect_round(graph, self.backend, self.tools, self.config.executor)
        for rec in records:
            self.trace.round(round_number).records.append(rec)
            self.log.emit("node_executed", round_number, **rec.to_dict(self.timings))
        self._timed("collect", start)
        return graph

    def conclude(self, graph: FlowGraph, round_number: int, reason: str | None) -> RunTrace:
        start = time.perf_counter()
        cfg = self.config
        try:
            graph, conclusion = conclude(
                graph, cfg.mode, self.recorder, partial=reason is not None, reason=reason
            )
        except ConclusionError as exc:
            self.trace.final_graph = exc.graph
            return self.abort(exc, round_number)
        self._timed("conclude", start)
        self.trace.conclusion = conclusion
        self.trace.final_graph = graph
        self.log.emit(
            "conclusion",
            round_number,
            **conclusion.to_dict(),
            graph=serialize_graph(graph, extended=True),
            exchanges=self._exchanges(),
        )
        if cfg.report_path and cfg.mode is SummaryMode.REPORT:
            Path(cfg.report_path).write_text(conclusion.answer + "\n", encoding="utf-8")
        if conclusion.degraded:
            return self.finish("degraded", EXIT_DEGRADED, round_number)
        return self.finish("success", EXIT_OK, round_number)

    def loop(self, graph: FlowGraph, round_number: int, phase: str, blocked: int, reason: str | None) -> RunTrace:
        cfg = self.config
        q = graph.query_node_id
        try:
            while True:
                if phase == PRE_COLLECT:
                    self.checkpoint(graph, round_number, phase, blocked, reason)
                    if not executable_nodes(graph):
                        if q in frontier(graph):
                            phase = PRE_CONCLUDE
                            continue
                        # The query (or something upstream of it) waits on a failure.
                        # One structural repair attempt per stall before giving up.
                        if cfg.refinement_enabled and blocked == 0:
                            blocked = 1
                            refined = self.refine(graph, round_number, "blocked")
                            if refined != graph:
                                graph = refined
                                continue
                        reason, phase = "blocked", PRE_CONCLUDE
                        continue
                    if round_number >= cfg.max_rounds:
                        reason, phase = "max_rounds", PRE_CONCLUDE
                        continue
                    round_number += 1
                    blocked = 0
                    graph = self.collect(graph, round_number)
                    phase = PRE_REFINE
                elif phase == PRE_REFINE:
                    self.checkpoint(graph, round_number, phase, blocked, reason)
                    if cfg.refinement_enabled:
                        graph = self.refine(graph, round_number, "round")
                    self.snapshot(graph, round_number)
                    phase = PRE_COLLECT
                else:
                    self.checkpoint(graph, round_number, PRE_CONCLUDE, blocked, reason)
                    return self.conclude(graph, round_number, reason)
        except BackendError as exc:
            self.trace.final_graph = graph
            return self.abort(exc, round_number)


def run(config: RunConfig, *, checkpoint_hook: Callable[[Checkpoint], None] | None = None) -> RunTrace:
    """Execute a whole run. Failures are reported through the trace's
    ``status``/``exit_code`` rather than raised."""
    r = _Run(config, checkpoint_hook, TraceLog(config.trace_path))
    r.log.emit("run_start", 0, run_id=r.trace.run_id, config=r.trace.config)
    try:
        graph = r.plan()
    except (PlannerOutputError, BackendError) as exc:
        return r.abort(exc, 0)
    return r.loop(graph, 0, PRE_COLLECT, 0, None)


def resume(
    checkpoint: Checkpoint | str | os.PathLike[str],
    config: RunConfig,
    *,
    checkpoint_hook: Callable[[Checkpoint], None] | None = None,
) -> RunTrace:
    """Continue a run from a checkpoint.

    When ``config.trace_path`` holds the interrupted run's log, events past the
    checkpoint are discarded and the log is continued in place.
    """
    ckpt = _checked(checkpoint) if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if ckpt.query != config.query:
        raise IncompatibleConfigError("checkpoint belongs to a run with a different query")
    prior: list[dict] = []
    if config.trace_path and Path(config.trace_path).exists():
        prior = read_events(config.trace_path, limit=ckpt.event_count)
        if len(prior) != ckpt.event_count:
            raise CheckpointError(
                f"trace has {len(prior)} events but the checkpoint expects {ckpt.event_count}"
            )
    if config.run_id is None:
        config.run_id = ckpt.run_id
    r = _Run(config, checkpoint_hook, TraceLog(config.trace_path, prior))
    if prior:
        try:
            rebuilt = trace_from_events(prior, config.snapshot_dir)
        except FileNotFoundError as exc:
            raise CheckpointError(f"cannot rebuild the trace: {exc}") from exc
        r.trace.steps, r.trace.rounds, r.trace.snapshots = rebuilt.steps, rebuilt.rounds, rebuilt.snapshots
    graph = parse_graph(ckpt.graph)
    return r.loop(graph, ckpt.round, ckpt.phase, ckpt.blocked_refines, ckpt.reason)


# -- exports ----------------------------------------------------------------------


def export_planner_dialogue(trace: RunTrace) -> list[dict[str, Any]]:
    """One single-turn chat record per planning step: the planner instruction
    with the input flow, answered by the output flow."""
    if not trace.steps:
        raise NothingToExportError("trace has no planning steps")
    records = []
    for step in trace.steps:
        user = f"{prompts.PLANNER}\n\nInput graph:\n{serialize_graph(step.before)}"
        records.append(
            {
                "messages": [
                    {"role": "user", "content": user},
                    {"role": "assistant", "content": serialize_graph(step.after)},
                ]
            }
        )
    return records


def write_dialogue(records: list[dict[str, Any]], path: str | os.PathLike[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def export_dot(trace: RunTrace, round_number: int) -> str:
    if round_number not in trace.snapshots:
        known = ", ".join(map(str, sorted(trace.snapshots))) or "none"
        raise RoundRangeError(f"no snapshot for round {round_number} (have {known})")
    return to_dot(parse_graph(trace.snapshots[round_number]))
