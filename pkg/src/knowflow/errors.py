"""Exception types raised by the engine."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .graph import FlowGraph, ValidationReport


class FlowError(Exception):
    """Base class for all engine errors."""


class InvalidInputError(FlowError, ValueError):
    """A caller-supplied argument violates a precondition."""


class GraphParseError(FlowError, ValueError):
    """Graph text could not be decoded.

    ``lineno``/``colno`` are 1-based; both are 0 when no position applies.
    """

    def __init__(self, message: str, lineno: int = 0, colno: int = 0) -> None:
        self.lineno = lineno
        self.colno = colno
        where = f" (line {lineno}, column {colno})" if lineno else ""
        super().__init__(f"{message}{where}")


class StructuralError(FlowError):
    """A graph fails structural validation."""

    def __init__(self, report: ValidationReport, message: str | None = None) -> None:
        self.report = report
        super().__init__(message or f"invalid flow graph: {report}")


class RefinementError(FlowError):
    """A single graph operation could not be applied."""


class MissingTargetError(RefinementError):
    pass


class DuplicateNodeError(RefinementError):
    pass


class ProtectedNodeError(RefinementError):
    pass


class InvalidOpError(RefinementError):
    pass


class PlanApplicationError(FlowError):
    """An op inside a refinement plan failed; nothing was applied.

    ``graph`` is the untouched input graph.
    """

    def __init__(self, index: int, cause: Exception, graph: FlowGraph) -> None:
        self.index = index
        self.cause = cause
        self.graph = graph
        super().__init__(f"op {index} failed: {cause}")


class PlanParseError(FlowError, ValueError):
    """Refinement plan text is malformed."""


class PlannerOutputError(FlowError):
    """The planner backend never produced an acceptable graph."""

    def __init__(self, message: str, raw_output: str) -> None:
        self.raw_output = raw_output
        super().__init__(message)


class BackendError(FlowError):
    """Transport, credential, or protocol failure talking to a backend."""


class ScenarioMissError(BackendError):
    def __init__(self, fingerprint: str) -> None:
        self.fingerprint = fingerprint
        super().__init__(f"no scripted response for request {fingerprint}")


class ScenarioFormatError(FlowError, ValueError):
    def __init__(self, message: str, lineno: int = 0) -> None:
        self.lineno = lineno
        where = f" (line {lineno})" if lineno else ""
        super().__init__(f"{message}{where}")


class UnknownToolError(FlowError, KeyError):
    def __str__(self) -> str:
        return f"unknown tool: {self.args[0]!r}"


class NoProgressError(FlowError):
    """No non-query node is executable in the current graph."""


class AlreadyConcludedError(FlowError):
    pass


class ConclusionError(FlowError):
    """The summarizer backend failed; ``graph`` has the query node marked failed."""

    def __init__(self, message: str, graph: FlowGraph) -> None:
        self.graph = graph
        super().__init__(message)


class CheckpointError(FlowError):
    pass


class IncompatibleConfigError(FlowError):
    pass


class NothingToExportError(FlowError):
    pass


class RoundRangeError(FlowError, IndexError):
    pass


def describe(exc: BaseException) -> str:
    """Short one-line rendering used in traces and repair prompts."""
    name: Any = type(exc).__name__
    return f"{name}: {exc}"
