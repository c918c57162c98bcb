"""Research orchestration over a dynamic dependency graph of typed subtasks."""

from .backends import (
    BackendExchange,
    Message,
    RecordingBackend,
    RemoteBackend,
    ScriptedBackend,
    ScriptedScenario,
    complete,
    fingerprint,
    load_scenario,
)
from .collector import ExecutionRecord, ExecutorConfig, collect_round, distill_context, execute_node
from .graph import (
    FlowEdge,
    FlowGraph,
    FlowNode,
    NodeState,
    TaskType,
    frontier,
    new_graph,
    parse_graph,
    serialize_graph,
    to_dot,
    topological_layers,
    validate,
)
from .orchestrator import (
    Checkpoint,
    RunConfig,
    export_dot,
    export_planner_dialogue,
    load_checkpoint,
    resume,
    run,
)
from .planner import ExpansionStep, PlannerConfig, expand_once, plan, plan_sequential
from .refiner import (
    AddEdge,
    AddNode,
    DelEdge,
    DelNode,
    ModEdge,
    ModNode,
    RefinementPlan,
    apply_op,
    apply_plan,
    parse_plan,
    refine,
)
from .summarizer import Conclusion, SummaryMode, answer_inputs, conclude
from .tools import ToolCallRecord, ToolRegistry, Toolkit, default_registry, invoke_tool
from .trace import RunTrace, load_trace

__all__ = [
    "AddEdge",
    "AddNode",
    "BackendExchange",
    "Checkpoint",
    "Conclusion",
    "DelEdge",
    "DelNode",
    "ExecutionRecord",
    "ExecutorConfig",
    "ExpansionStep",
    "FlowEdge",
    "FlowGraph",
    "FlowNode",
    "Message",
    "ModEdge",
    "ModNode",
    "NodeState",
    "PlannerConfig",
    "RecordingBackend",
    "RefinementPlan",
    "RemoteBackend",
    "RunConfig",
    "RunTrace",
    "ScriptedBackend",
    "ScriptedScenario",
    "SummaryMode",
    "TaskType",
    "ToolCallRecord",
    "ToolRegistry",
    "Toolkit",
    "answer_inputs",
    "apply_op",
    "apply_plan",
    "collect_round",
    "complete",
    "conclude",
    "default_registry",
    "distill_context",
    "execute_node",
    "expand_once",
    "export_dot",
    "export_planner_dialogue",
    "fingerprint",
    "frontier",
    "invoke_tool",
    "load_checkpoint",
    "load_scenario",
    "load_trace",
    "new_graph",
    "parse_graph",
    "parse_plan",
    "plan",
    "plan_sequential",
    "refine",
    "resume",
    "run",
    "serialize_graph",
    "to_dot",
    "topological_layers",
    "validate",
]

__version__ = "0.1.0"
