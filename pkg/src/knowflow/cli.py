"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .backends import RecordingBackend, dump_scenario, make_backend, scenario_from_exchanges
from .collector import ExecutorConfig
from .errors import FlowError
from .orchestrator import (
    EXIT_ABORTED,
    RunConfig,
    export_dot,
    export_planner_dialogue,
    load_checkpoint,
    resume,
    run,
    write_dialogue,
)
from .planner import FLOW, SEQUENTIAL
from .tools import TOOL_NAMES


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="knowflow", description="Run a research query as a dependency graph of subtasks.")
    p.add_argument("--query", help="research objective (optional with --resume)")
    p.add_argument("--mode", choices=("qa", "report"), default="qa")
    p.add_argument("--planner", choices=(FLOW, SEQUENTIAL), default=FLOW)
    p.add_argument("--no-refine", action="store_true", help="skip graph refinement between rounds")
    p.add_argument("--max-rounds", type=int, default=12)
    p.add_argument("--backend", default="remote", help="scripted:PATH or remote")
    p.add_argument("--trace", type=Path, help="append-only JSONL event log")
    p.add_argument("--snapshots", type=Path, help="directory for per-round graph snapshots")
    p.add_argument("--checkpoint", type=Path, help="checkpoint file (default: TRACE.ckpt)")
    p.add_argument("--dot-round", type=int, help="write DOT for this round's snapshot")
    p.add_argument("--dot-out", type=Path, help="DOT output path (default: round_N.dot)")
    p.add_argument("--report-out", type=Path, help="write the report (report mode)")
    p.add_argument("--resume", type=Path, metavar="CHECKPOINT")
    p.add_argument("--export-dialogue", type=Path, help="write planner dialogue records (JSONL)")
    p.add_argument("--record-scenario", type=Path, help="dump all exchanges as a replayable scenario")
    p.add_argument("--disable-tool", action="append", default=[], choices=TOOL_NAMES, metavar="NAME")
    p.add_argument("--max-parallel", type=int, default=8)
    p.add_argument("--timeout", type=float, default=120.0, help="per-node timeout in seconds")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    try:
        checkpoint = load_checkpoint(args.resume) if args.resume else None
        query = args.query or (checkpoint.query if checkpoint else None)
        if not query:
            print("error: --query is required", file=sys.stderr)
            return EXIT_ABORTED
        backend, scenario = make_backend(args.backend)
        recorder = RecordingBackend(backend) if args.record_scenario else None
        ckpt_path = args.checkpoint or (Path(f"{args.trace}.ckpt") if args.trace else None)
        config = RunConfig(
            query=query,
            mode=args.mode,
            planner_mode=args.planner,
            refinement_enabled=not args.no_refine,
            max_rounds=args.max_rounds,
            backend=recorder or backend,
            tool_availability={name: "disabled" for name in args.disable_tool},
            trace_path=args.trace,
            snapshot_dir=args.snapshots,
            report_path=args.report_out,
            checkpoint_path=ckpt_path,
            executor=ExecutorConfig(max_parallel=args.max_parallel, per_node_timeout=args.timeout),
        )
        trace = resume(checkpoint, config) if checkpoint else run(config)
    except FlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORTED

    if trace.conclusion is not None:
        print(trace.conclusion.answer)
        if trace.conclusion.degraded:
            print(f"warning: degraded conclusion ({trace.conclusion.reason})", file=sys.stderr)
    if trace.error:
        print(f"error: {trace.error}", file=sys.stderr)

    try:
        if args.dot_round is not None:
            out = args.dot_out or Path(f"round_{args.dot_round}.dot")
            out.write_text(export_dot(trace, args.dot_round), encoding="utf-8")
        if args.export_dialogue:
            write_dialogue(export_planner_dialogue(trace), args.export_dialogue)
        if args.record_scenario and recorder is not None:
            dump_scenario(
                scenario_from_exchanges(recorder.exchanges, scenario.tools if scenario else ()), args.record_scenario
            )
    except FlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    return trace.exit_code if trace.exit_code is not None else EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
