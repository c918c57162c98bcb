"""Text-generation backends: scripted replay, remote chat-completions, and a
recording wrapper that turns live traffic into a replayable scenario."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Protocol

import httpx

from .errors import BackendError, InvalidInputError, ScenarioFormatError, ScenarioMissError

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")


class Message(NamedTuple):
    role: str
    content: str


def fingerprint(messages: Sequence[Message | tuple[str, str]]) -> str:
    """Stable hash of a request; identical across processes and platforms."""
    canon = json.dumps([[r, c] for r, c in messages], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:24]


@dataclass(frozen=True)
class BackendExchange:
    messages: tuple[Message, ...]
    response: str
    fingerprint: str
    latency: float = field(default=0.0, compare=False)

    def to_dict(self, timings: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "fingerprint": self.fingerprint,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "response": self.response,
        }
        if timings:
            out["latency"] = round(self.latency, 6)
        return out


class Backend(Protocol):
    def complete(self, messages: Sequence[Message]) -> BackendExchange: ...


def _check_messages(messages: Sequence[Message | tuple[str, str]]) -> tuple[Message, ...]:
    if not messages:
        raise InvalidInputError("messages must be non-empty")
    out = []
    for role, content in messages:
        if role not in ROLES:
            raise InvalidInputError(f"unknown message role {role!r}")
        out.append(Message(role, content))
    return tuple(out)


def complete(messages: Sequence[Message | tuple[str, str]], backend: Backend) -> BackendExchange:
    return backend.complete(_check_messages(messages))


# -- scripted scenarios -------------------------------------------------------

MATCH_KINDS = ("fingerprint", "position", "pattern")


@dataclass(frozen=True)
class ScenarioEntry:
    kind: str
    key: str | int
    response: str


@dataclass(frozen=True)
class ToolEntry:
    name: str
    args_key: str
    result: str
    ok: bool = True


@dataclass
class ScriptedScenario:
    """Canned responses resolved by fingerprint, then call position, then
    regex over the last message (first matching pattern in file order)."""

    entries: list[ScenarioEntry] = field(default_factory=list)
    tools: list[ToolEntry] = field(default_factory=list)
    strict: bool = True

    def __post_init__(self) -> None:
        self._by_fp: dict[str, str] = {}
        self._by_pos: dict[int, str] = {}
        self._patterns: list[tuple[re.Pattern[str], str]] = []
        for e in self.entries:
            if e.kind == "fingerprint":
                if e.key in self._by_fp:
                    raise ScenarioFormatError(f"duplicate fingerprint {e.key}")
                self._by_fp[str(e.key)] = e.response
            elif e.kind == "position":
                if e.key in self._by_pos:
                    raise ScenarioFormatError(f"duplicate position {e.key}")
                self._by_pos[int(e.key)] = e.response
            elif e.kind == "pattern":
                self._patterns.append((re.compile(str(e.key), re.MULTILINE), e.response))
            else:
                raise ScenarioFormatError(f"unknown match kind {e.kind!r}")

    def resolve(self, messages: Sequence[Message], position: int) -> str | None:
        fp = fingerprint(messages)
        if fp in self._by_fp:
            return self._by_fp[fp]
        if position in self._by_pos:
            return self._by_pos[position]
        last = messages[-1].content
        for pattern, response in self._patterns:
            if pattern.search(last):
                return response
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "strict": self.strict,
            "entries": [{"match": {e.kind: e.key}, "response": e.response} for e in self.entries],
            "tools": [
                {"name": t.name, "args_key": t.args_key, "result": t.result, "ok": t.ok} for t in self.tools
            ],
        }


def _line_of(text: str, needle: str, occurrence: int) -> int:
    idx = -1
    for _ in range(occurrence):
        idx = text.find(needle, idx + 1)
        if idx < 0:
            return 0
    return text.count("\n", 0, idx) + 1


def parse_scenario(text: str) -> ScriptedScenario:
    if not text.strip():
        return ScriptedScenario()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(exc.msg, exc.lineno) from None
    if not isinstance(data, dict) or set(data) - {"entries", "tools", "strict"}:
        raise ScenarioFormatError("scenario must be an object with 'entries', 'tools', 'strict'")

    entries: list[ScenarioEntry] = []
    seen: dict[tuple[str, Any], int] = {}
    for i, raw in enumerate(data.get("entries", [])):
        if not isinstance(raw, dict) or set(raw) != {"match", "response"}:
            raise ScenarioFormatError(f"entries[{i}]: expected {{'match', 'response'}}")
        match = raw["match"]
        if not isinstance(match, dict) or len(match) != 1 or next(iter(match)) not in MATCH_KINDS:
            raise ScenarioFormatError(f"entries[{i}]: match needs exactly one of {MATCH_KINDS}")
        kind, key = next(iter(match.items()))
        if kind == "position" and not (isinstance(key, int) and key >= 0):
            raise ScenarioFormatError(f"entries[{i}]: position must be a non-negative integer")
        if kind != "position" and not isinstance(key, str):
            raise ScenarioFormatError(f"entries[{i}]: {kind} must be a string")
        if not isinstance(raw["response"], str):
            raise ScenarioFormatError(f"entries[{i}]: response must be a string")
        if kind in ("fingerprint", "position"):
            n = seen.get((kind, key), 0) + 1
            seen[(kind, key)] = n
            if n > 1:
                raise ScenarioFormatError(
                    f"duplicate {kind} key {key!r}", _line_of(text, json.dumps(key), n)
                )
        if kind == "pattern":
            try:
                re.compile(key)
            except re.error as exc:
                raise ScenarioFormatError(f"entries[{i}]: bad pattern: {exc}") from None
        entries.append(ScenarioEntry(kind, key, raw["response"]))

    tools: list[ToolEntry] = []
    for i, raw in enumerate(data.get("tools", [])):
        if not isinstance(raw, dict) or not {"name", "args_key", "result"} <= set(raw) <= {
            "name", "args_key", "result", "ok"
        }:
            raise ScenarioFormatError(f"tools[{i}]: expected name, args_key, result, ok")
        tools.append(ToolEntry(raw["name"], raw["args_key"], raw["result"], bool(raw.get("ok", True))))

    strict = data.get("strict", True)
    if not isinstance(strict, bool):
        raise ScenarioFormatError("'strict' must be a boolean")
    return ScriptedScenario(entries, tools, strict)


def load_scenario(path: str | os.PathLike[str]) -> ScriptedScenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidInputError(f"cannot read scenario {path}: {exc.strerror}") from exc
    return parse_scenario(text)


def dump_scenario(scenario: ScriptedScenario, path: str | os.PathLike[str]) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


class ScriptedBackend:
    """Deterministic backend replaying a :class:`ScriptedScenario`.

    ``requests`` logs every request in arrival order; safe to call from
    several threads.
    """

    label = "scripted"

    def __init__(self, scenario: ScriptedScenario) -> None:
        self.scenario = scenario
        self.requests: list[tuple[Message, ...]] = []
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[Message]) -> BackendExchange:
        msgs = _check_messages(messages)
        start = time.perf_counter()
        with self._lock:
            position = len(self.requests)
            self.requests.append(msgs)
        response = self.scenario.resolve(msgs, position)
        fp = fingerprint(msgs)
        if response is None:
            if self.scenario.strict:
                raise ScenarioMissError(fp)
            response = msgs[-1].content
        return BackendExchange(msgs, response, fp, time.perf_counter() - start)


class RecordingBackend:
    """Pass-through wrapper that keeps every successful exchange."""

    def __init__(self, inner: Backend) -> None:
        self.inner = inner
        self.exchanges: list[BackendExchange] = []
        self._lock = threading.Lock()

    @property
    def label(self) -> str:
        return getattr(self.inner, "label", type(self.inner).__name__)

    @property
    def scenario(self) -> ScriptedScenario | None:
        return getattr(self.inner, "scenario", None)

    def complete(self, messages: Sequence[Message]) -> BackendExchange:
        ex = self.inner.complete(messages)
        with self._lock:
            self.exchanges.append(ex)
        return ex

    def drain(self) -> list[BackendExchange]:
        with self._lock:
            out, self.exchanges = self.exchanges, []
        return out


def scenario_from_exchanges(exchanges: Sequence[BackendExchange], tools: Sequence[ToolEntry] = ()) -> ScriptedScenario:
    """Fingerprint-keyed scenario replaying the given exchanges.

    A request seen twice keeps its first response.
    """
    entries: list[ScenarioEntry] = []
    seen: set[str] = set()
    for ex in exchanges:
        if ex.fingerprint in seen:
            continue
        seen.add(ex.fingerprint)
        entries.append(ScenarioEntry("fingerprint", ex.fingerprint, ex.response))
    return ScriptedScenario(entries, list(tools), strict=True)


# -- remote chat-completions --------------------------------------------------

ENV_API_KEY = "KNOWFLOW_API_KEY"
ENV_BASE_URL = "KNOWFLOW_BASE_URL"
ENV_MODEL = "KNOWFLOW_MODEL"
DEFAULT_BASE_URL = "https://api.openai.com/v1"
DEFAULT_MODEL = "o4-mini"

_RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class RemoteBackend:
    """Chat-completions client. One POST per request, retried on transport
    errors and retryable HTTP statuses."""

    label = "remote"

    def __init__(
        self,
        base_url: str,
        api_key: str | None,
        model: str,
        *,
        timeout: float = 120.0,
        max_retries: int = 2,
        backoff: float = 1.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    @classmethod
    def from_env(cls, **kwargs: Any) -> RemoteBackend:
        return cls(
            os.environ.get(ENV_BASE_URL, DEFAULT_BASE_URL),
            os.environ.get(ENV_API_KEY) or os.environ.get("OPENAI_API_KEY"),
            os.environ.get(ENV_MODEL, DEFAULT_MODEL),
            **kwargs,
        )

    def _payload(self, messages: Sequence[Message]) -> dict[str, Any]:
        # Plain chat APIs reject role=tool without a tool_call_id.
        return {
            "model": self.model,
            "messages": [
                {"role": "user" if m.role == "tool" else m.role, "content": m.content} for m in messages
            ],
        }

    def complete(self, messages: Sequence[Message]) -> BackendExchange:
        msgs = _check_messages(messages)
        if not self.api_key:
            raise BackendError(f"no credentials: set {ENV_API_KEY}")
        start = time.perf_counter()
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions", json=self._payload(msgs), headers=headers)
            except httpx.HTTPError as exc:
                last = exc
                log.warning("chat request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code in _RETRYABLE_STATUS:
                last = BackendError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed chat response: {exc}") from None
            return BackendExchange(msgs, content or "", fingerprint(msgs), time.perf_counter() - start)
        raise BackendError(f"chat request failed after {self.max_retries + 1} attempts: {last}")

    def close(self) -> None:
        self._client.close()


def make_backend(descriptor: str) -> tuple[Backend, ScriptedScenario | None]:
    """Resolve ``scripted:PATH`` or ``remote``."""
    if descriptor == "remote":
        return RemoteBackend.from_env(), None
    if descriptor.startswith("scripted:"):
        scenario = load_scenario(descriptor.split(":", 1)[1])
        return ScriptedBackend(scenario), scenario
    raise InvalidInputError(f"unknown backend descriptor {descriptor!r}")
