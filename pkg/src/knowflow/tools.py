"""Tool registry for node executors.

A :class:`ToolRegistry` is an immutable set of tool descriptors. Each node
execution gets its own :class:`Toolkit` from :meth:`ToolRegistry.instance`,
so stateful tools never leak state between concurrently running nodes.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import httpx

from .errors import UnknownToolError

TOOL_NAMES = (
    "search_google",
    "search_wiki",
    "search_wiki_revision",
    "search_archived_webpage",
    "extract_document_content",
    "extract_url_content",
    "ask_question_about_image",
    "ask_question_about_audio",
    "ask_question_about_video",
    "download_media_from_url",
    "execute_code",
    "browse_url",
    "ocr2text",
)

ENV_TOOL_URL = "KNOWFLOW_TOOL_URL"

# A responder maps canonical arguments to (result, ok).
Responder = Callable[[str], "tuple[str, bool]"]


class ToolKind(str, Enum):
    MOCK = "mock"
    HTTP_STUB = "http_stub"
    DISABLED = "disabled"


def args_key(arguments: str) -> str:
    """Canonical form of tool arguments: compact sorted JSON when the text is
    JSON, otherwise the stripped text."""
    try:
        value = json.loads(arguments)
    except (json.JSONDecodeError, TypeError):
        return arguments.strip()
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class ToolCallRecord:
    tool_name: str
    arguments: str
    result: str
    ok: bool

    def to_dict(self) -> dict[str, Any]:
        return {"tool_name": self.tool_name, "arguments": self.arguments, "result": self.result, "ok": self.ok}


@dataclass(frozen=True)
class ToolSpec:
    """Descriptor for one tool.

    ``canned`` maps canonical arguments (or ``"*"``) to ``(result, ok)``.
    ``responder_factory`` builds a fresh stateful responder per toolkit and
    takes precedence over ``canned``.
    """

    name: str
    kind: ToolKind = ToolKind.MOCK
    canned: Mapping[str, tuple[str, bool]] = field(default_factory=dict)
    url: str | None = None
    responder_factory: Callable[[], Responder] | None = None


class Toolkit:
    """Per-execution tool instances. Not shared across threads."""

    def __init__(self, specs: Mapping[str, ToolSpec], client: httpx.Client | None = None) -> None:
        self._specs = dict(specs)
        self._responders = {
            name: spec.responder_factory() for name, spec in specs.items() if spec.responder_factory is not None
        }
        self._client = client
        self.calls: Counter[str] = Counter()

    def __contains__(self, name: object) -> bool:
        return name in self._specs

    def kind(self, name: str) -> ToolKind:
        return self._spec(name).kind

    def _spec(self, name: str) -> ToolSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise UnknownToolError(name) from None

    def invoke(self, name: str, arguments: str) -> ToolCallRecord:
        spec = self._spec(name)
        self.calls[name] += 1
        if spec.kind is ToolKind.DISABLED:
            return ToolCallRecord(name, arguments, f"tool {name} is not available in this deployment", False)
        if spec.kind is ToolKind.HTTP_STUB:
            result, ok = self._http(spec, arguments)
            return ToolCallRecord(name, arguments, result, ok)
        key = args_key(arguments)
        if name in self._responders:
            result, ok = self._responders[name](key)
        elif key in spec.canned:
            result, ok = spec.canned[key]
        elif "*" in spec.canned:
            result, ok = spec.canned["*"]
        else:
            result, ok = f"no canned result for {name}({key})", False
        return ToolCallRecord(name, arguments, result, ok)

    def _http(self, spec: ToolSpec, arguments: str) -> tuple[str, bool]:
        if not spec.url:
            return f"tool {spec.name} has no endpoint configured", False
        client = self._client or httpx.Client(timeout=60.0)
        try:
            resp = client.post(spec.url, json={"tool": spec.name, "arguments": arguments})
        except httpx.HTTPError as exc:
            return f"tool request failed: {exc}", False
        finally:
            if self._client is None:
                client.close()
        return resp.text, resp.status_code == 200


def invoke_tool(toolkit: Toolkit, tool_name: str, arguments: str) -> ToolCallRecord:
    return toolkit.invoke(tool_name, arguments)


class ToolRegistry:
    def __init__(self, specs: Iterable[ToolSpec] = (), client: httpx.Client | None = None) -> None:
        self._specs: dict[str, ToolSpec] = {}
        self._client = client
        for spec in specs:
            self.register(spec)

    def register(self, spec: ToolSpec) -> None:
        canned = {args_key(k) if k != "*" else k: v for k, v in spec.canned.items()}
        self._specs[spec.name] = ToolSpec(spec.name, spec.kind, canned, spec.url, spec.responder_factory)

    def names(self) -> list[str]:
        return sorted(self._specs)

    def spec(self, name: str) -> ToolSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise UnknownToolError(name) from None

    def availability(self) -> dict[str, str]:
        return {name: self._specs[name].kind.value for name in self.names()}

    def instance(self) -> Toolkit:
        return Toolkit(self._specs, self._client)


DEFAULT_AVAILABILITY = {name: ToolKind.MOCK for name in TOOL_NAMES} | {"execute_code": ToolKind.DISABLED}


def default_registry(
    tool_entries: Iterable[Any] = (),
    availability: Mapping[str, str | ToolKind] | None = None,
    stub_url: str | None = None,
) -> ToolRegistry:
    """All known tools; mocks are fed from scenario ``tool_entries``.

    ``availability`` overrides the kind per tool name; ``http_stub`` tools
    post to ``stub_url`` (default from the environment).
    """
    kinds = dict(DEFAULT_AVAILABILITY)
    for name, kind in (availability or {}).items():
        if name not in kinds:
            raise UnknownToolError(name)
        kinds[name] = ToolKind(kind)
    canned: dict[str, dict[str, tuple[str, bool]]] = {name: {} for name in TOOL_NAMES}
    for entry in tool_entries:
        if entry.name not in canned:
            raise UnknownToolError(entry.name)
        canned[entry.name][entry.args_key] = (entry.result, entry.ok)
    url = stub_url or os.environ.get(ENV_TOOL_URL)
    return ToolRegistry(ToolSpec(name, kinds[name], canned[name], url) for name in TOOL_NAMES)
