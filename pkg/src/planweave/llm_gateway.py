"""Uniform model-backend abstraction with tool calling.

Three interchangeable backends implement ``complete(request)``:

* :class:`HttpBackend` — one round-trip to a chat-completions endpoint
  with function-calling fields;
* :class:`ScriptedBackend` — deterministic rule table, for desk-scale
  verification of the whole pipeline;
* :class:`ReplayBackend` — replays a recorded cassette, matching each
  request by fingerprint.

The gateway never mutates requests; tool-call arguments are canonicalized
(sorted keys, trimmed strings) on the way out so duplicate-call detection
is representation-independent.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Protocol, Sequence

FINISH_STOP = "stop"
FINISH_TOOL_CALLS = "tool_calls"
FINISH_TRUNCATED = "truncated"


class GatewayError(Exception):
    """Base class for backend failures."""


class GatewayTimeout(GatewayError):
    pass


class EndpointError(GatewayError):
    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"endpoint returned status {status}: {detail}")
        self.status = status


class NoMatchingRule(GatewayError):
    """Strict scripted backend saw a request no rule (or too many) covers."""


class ReplayMismatch(GatewayError):
    """Replay cursor's recorded fingerprint differs from the live request."""


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class ToolCallRequest:
    name: str
    arguments: Mapping[str, Any]


@dataclass(frozen=True)
class ChatRequest:
    """One model call: role-tagged messages plus the visible tool specs.

    ``actor`` names the agent issuing the request (manager, supervisor,
    deliverer, or an executor name); scripted rules match on it and it is
    excluded from fingerprints.
    """

    actor: str
    messages: tuple[Message, ...]
    tool_specs: tuple = ()
    temperature: float = 0.0
    max_turn_tokens: int = 2048

    def __post_init__(self):
        if not self.messages:
            raise ValueError("ChatRequest.messages must be nonempty")
        if self.messages[0].role != "system":
            raise ValueError("first message must be the system prompt")

    @property
    def assistant_turns(self) -> int:
        return sum(1 for m in self.messages if m.role == "assistant")

    def joined_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str = ""
    tool_calls: tuple[ToolCallRequest, ...] = ()
    finish: str = FINISH_STOP

    def __post_init__(self):
        if self.finish == FINISH_TOOL_CALLS and not self.tool_calls:
            raise ValueError("finish=tool_calls requires at least one tool call")
        if self.finish == FINISH_STOP and self.tool_calls:
            raise ValueError("finish=stop must carry no tool calls")


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse:  # pragma: no cover - protocol
        ...


def canonicalize_arguments(arguments: Mapping[str, Any]) -> dict[str, Any]:
    """Sorted keys, stripped string values; nested mappings recurse."""
    out: dict[str, Any] = {}
    for key in sorted(arguments):
        value = arguments[key]
        if isinstance(value, str):
            value = value.strip()
        elif isinstance(value, Mapping):
            value = canonicalize_arguments(value)
        out[key] = value
    return out


def canonical_call(name: str, arguments: Mapping[str, Any]) -> str:
    """Stable textual identity of a tool call, used for repeat detection."""
    return json.dumps({"name": name, "arguments": canonicalize_arguments(arguments)},
                      sort_keys=True, ensure_ascii=False)


def fingerprint(request: ChatRequest) -> str:
    """Stable digest over role sequence, message texts, and tool-spec names.

    Insensitive to temperature, token limits, and the actor tag.
    """
    basis = {
        "roles": [m.role for m in request.messages],
        "texts": [m.content for m in request.messages],
        "tools": [getattr(s, "name", str(s)) for s in request.tool_specs],
    }
    blob = json.dumps(basis, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def complete(backend: Backend, request: ChatRequest) -> ChatResponse:
    """Dispatch ``request`` to ``backend`` and canonicalize tool-call args."""
    response = backend.complete(request)
    if not response.tool_calls:
        return response
    calls = tuple(
        ToolCallRequest(name=c.name, arguments=canonicalize_arguments(c.arguments))
        for c in response.tool_calls
    )
    return replace(response, tool_calls=calls)


# --------------------------------------------------------------------------
# Scripted backend
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScriptRule:
    """Match condition plus canned response.

    ``actor`` matches the request's actor exactly (None = any);
    ``substring`` must occur in the concatenated message text (None = any);
    ``turn_index`` matches the number of assistant messages already in the
    request, i.e. the agent-loop turn (None = any).
    """

    respond: ChatResponse
    actor: str | None = None
    substring: str | None = None
    turn_index: int | None = None

    def matches(self, request: ChatRequest) -> bool:
        if self.actor is not None and request.actor != self.actor:
            return False
        if self.turn_index is not None and request.assistant_turns != self.turn_index:
            return False
        if self.substring is not None and self.substring not in request.joined_text():
            return False
        return True


class ScriptedBackend:
    """Rule-table model stand-in.

    Strict mode (default) requires every request to match exactly one rule;
    zero or multiple matches raise :class:`NoMatchingRule` naming the
    request's actor and its first 80 characters.  Non-strict mode answers
    unmatched requests with a bland stop reply.
    """

    def __init__(self, rules: Sequence[ScriptRule], strict: bool = True):
        self.rules = tuple(rules)
        self.strict = strict

    def complete(self, request: ChatRequest) -> ChatResponse:
        matched = [r for r in self.rules if r.matches(request)]
        if len(matched) == 1:
            return matched[0].respond
        if not self.strict:
            return matched[0].respond if matched else ChatResponse(text="OK.")
        head = request.joined_text()[:80].replace("\n", " ")
        if not matched:
            raise NoMatchingRule(f"no rule for actor={request.actor!r}: {head!r}")
        raise NoMatchingRule(
            f"{len(matched)} rules match actor={request.actor!r}: {head!r}"
        )


def response_from_dict(data: Mapping[str, Any]) -> ChatResponse:
    calls = tuple(
        ToolCallRequest(name=c["name"], arguments=dict(c.get("arguments", {})))
        for c in data.get("tool_calls", [])
    )
    finish = data.get("finish")
    if finish is None:
        finish = FINISH_TOOL_CALLS if calls else FINISH_STOP
    return ChatResponse(text=data.get("text", ""), tool_calls=calls, finish=finish)


def response_to_dict(response: ChatResponse) -> dict[str, Any]:
    return {
        "text": response.text,
        "tool_calls": [
            {"name": c.name, "arguments": dict(c.arguments)} for c in response.tool_calls
        ],
        "finish": response.finish,
    }


def scripted_backend_from_json(data) -> ScriptedBackend:
    """Build a scripted backend from a rules document (parsed JSON).

    Accepts either a list of rule objects or ``{"strict": bool,
    "rules": [...]}``; each rule object holds optional ``actor``,
    ``substring``, ``turn_index`` and a required ``response``.
    """
    strict = True
    rules_data = data
    if isinstance(data, Mapping):
        strict = bool(data.get("strict", True))
        rules_data = data.get("rules", [])
    rules = [
        ScriptRule(
            respond=response_from_dict(entry["response"]),
            actor=entry.get("actor"),
            substring=entry.get("substring"),
            turn_index=entry.get("turn_index"),
        )
        for entry in rules_data
    ]
    return ScriptedBackend(rules, strict=strict)


def load_script(path) -> ScriptedBackend:
    with open(path, "r", encoding="utf-8") as fh:
        return scripted_backend_from_json(json.load(fh))


# --------------------------------------------------------------------------
# Record / replay
# --------------------------------------------------------------------------

@dataclass
class Cassette:
    """Ordered ``{fingerprint, response}`` records for one recorded run."""

    records: list[dict] = field(default_factory=list)

    def append(self, request: ChatRequest, response: ChatResponse) -> None:
        self.records.append({
            "fingerprint": fingerprint(request),
            "response": response_to_dict(response),
        })

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"records": self.records}, fh, indent=2, ensure_ascii=False)

    @classmethod
    def load(cls, path) -> "Cassette":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(records=list(data.get("records", [])))


class RecordingBackend:
    """Wraps another backend and appends every exchange to a cassette."""

    def __init__(self, inner: Backend, cassette: Cassette | None = None):
        self.inner = inner
        self.cassette = cassette if cassette is not None else Cassette()

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        self.cassette.append(request, response)
        return response


class ReplayBackend:
    """Replays a cassette in order; at most one in-flight run per cassette."""

    def __init__(self, cassette: Cassette):
        self.cassette = cassette
        self._cursor = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self._cursor >= len(self.cassette.records):
            raise ReplayMismatch(
                f"cassette exhausted after {self._cursor} responses (actor={request.actor!r})"
            )
        record = self.cassette.records[self._cursor]
        live = fingerprint(request)
        if record["fingerprint"] != live:
            raise ReplayMismatch(
                f"record {self._cursor}: recorded fingerprint {record['fingerprint'][:12]}... "
                f"!= live {live[:12]}... (actor={request.actor!r})"
            )
        self._cursor += 1
        return response_from_dict(record["response"])

    def rewind(self) -> None:
        self._cursor = 0


# --------------------------------------------------------------------------
# HTTP backend (chat-completions wire shape)
# --------------------------------------------------------------------------

ENV_BASE = "PLANWEAVE_API_BASE"
ENV_KEY = "PLANWEAVE_API_KEY"
ENV_MODEL = "PLANWEAVE_MODEL"


class HttpBackend:
    """Chat-completions client with function calling.

    Endpoint, key, and model come from constructor arguments or the
    ``PLANWEAVE_API_BASE`` / ``PLANWEAVE_API_KEY`` / ``PLANWEAVE_MODEL``
    environment variables.  Truncated replies are surfaced, never retried
    here; transport retries are a flat configurable count.
    """

    def __init__(self, base_url: str | None = None, api_key: str | None = None,
                 model: str | None = None, timeout: float = 60.0, max_retries: int = 0):
        self.base_url = (base_url or os.environ.get(ENV_BASE, "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_KEY, "")
        self.model = model or os.environ.get(ENV_MODEL, "")
        self.timeout = timeout
        self.max_retries = max_retries
        if not self.base_url:
            raise ValueError(f"HTTP backend needs a base URL ({ENV_BASE})")

    def _wire_request(self, request: ChatRequest) -> dict:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_turn_tokens,
        }
        if request.tool_specs:
            body["tools"] = [
                {"type": "function", "function": spec.to_wire()} for spec in request.tool_specs
            ]
        return body

    def complete(self, request: ChatRequest) -> ChatResponse:
        import requests

        url = f"{self.base_url}/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self._wire_request(request)

        last_exc: Exception | None = None
        for _ in range(self.max_retries + 1):
            try:
                resp = requests.post(url, json=body, headers=headers, timeout=self.timeout)
            except requests.Timeout as exc:
                last_exc = GatewayTimeout(str(exc))
                continue
            except requests.RequestException as exc:
                last_exc = GatewayError(str(exc))
                continue
            if resp.status_code != 200:
                last_exc = EndpointError(resp.status_code, resp.text[:200])
                continue
            return self._parse_wire(resp.json())
        raise last_exc if last_exc else GatewayError("request failed")

    @staticmethod
    def _parse_wire(payload: Mapping[str, Any]) -> ChatResponse:
        choice = payload["choices"][0]
        message = choice.get("message", {})
        raw_calls = message.get("tool_calls") or []
        calls = []
        for entry in raw_calls:
            fn = entry.get("function", {})
            args_raw = fn.get("arguments", "{}")
            try:
                args = json.loads(args_raw) if isinstance(args_raw, str) else dict(args_raw)
            except json.JSONDecodeError:
                args = {"_raw": args_raw}
            calls.append(ToolCallRequest(name=fn.get("name", ""), arguments=args))
        reason = choice.get("finish_reason", "stop")
        if reason == "length":
            finish = FINISH_TRUNCATED
        elif calls:
            finish = FINISH_TOOL_CALLS
        else:
            finish = FINISH_STOP
        return ChatResponse(text=message.get("content") or "", tool_calls=tuple(calls), finish=finish)
