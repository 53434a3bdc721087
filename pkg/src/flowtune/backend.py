"""Chat-completion backends and the client that wraps them.

Three interchangeable backends sit behind one `complete()` call: a real
OpenAI-compatible HTTP endpoint, a scripted mock (a plain function from
request to response text), and a record/replay store that makes any recorded
run re-executable with zero network calls. The client layers call ledgering,
budget enforcement, and JSON-repair retries on top.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol

from .model import compact_json
from .store import RunLedger

logger = logging.getLogger(__name__)


class Purpose(str, Enum):
    FORWARD = "Forward"
    GRAD_LOSS = "GradLoss"
    GRAD_CALL = "GradCall"
    GRAD_WORKFLOW = "GradWorkflow"
    OPTIM_CALL = "OptimCall"
    OPTIM_WORKFLOW = "OptimWorkflow"
    INIT_EXECUTOR = "InitExecutor"
    BOOTSTRAP = "Bootstrap"
    JUDGE = "Judge"


ROLES = ("system", "user")


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[Message, ...]
    temperature: float
    max_output_tokens: int
    purpose: Purpose

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be nonempty")
        for m in self.messages:
            if m.role not in ROLES:
                raise ValueError(f"bad role {m.role!r}")
        # A system prompt, when present, leads the conversation.
        for i, m in enumerate(self.messages):
            if m.role == "system" and i != 0:
                raise ValueError("system message must come first")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    input_tokens: int = 0
    output_tokens: int = 0
    latency_s: float = 0.0


def request_replay_key(request: ChatRequest) -> str:
    """Canonical hash of the request identity.

    max_output_tokens is deliberately excluded so tuning the token cap does
    not invalidate existing replay stores.
    """
    payload = compact_json([
        request.model_id,
        [[m.role, m.content] for m in request.messages],
        request.temperature,
    ])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class TransportError(RuntimeError):
    """HTTP call failed after all retry attempts."""


class ReplayMissError(RuntimeError):
    def __init__(self, key: str, request: ChatRequest):
        self.key = key
        self.request = request
        super().__init__(f"no recorded response for request hash {key}")


# ---------------------------------------------------------------------------
# Scripted mock
# ---------------------------------------------------------------------------

def _count_tokens(text: str) -> int:
    return len(text.split())


def echo_script(request: ChatRequest) -> str:
    """Return the last user message verbatim."""
    for m in reversed(request.messages):
        if m.role == "user":
            return m.content
    return request.messages[-1].content


class ScriptedMockBackend:
    """Deterministic backend driven by a plain function of the request.

    Token counts are whitespace word counts, so ledgers stay meaningful and
    reproducible under mocks.
    """

    def __init__(self, script: Callable[[ChatRequest], str] = echo_script):
        self.script = script

    def complete(self, request: ChatRequest) -> ChatResponse:
        content = self.script(request)
        if not isinstance(content, str):
            raise TypeError("script must return str")
        in_tok = sum(_count_tokens(m.content) for m in request.messages)
        return ChatResponse(content=content, input_tokens=in_tok,
                            output_tokens=_count_tokens(content), latency_s=0.0)


# ---------------------------------------------------------------------------
# HTTP (OpenAI-compatible chat completions)
# ---------------------------------------------------------------------------

class HttpBackend:
    def __init__(self, endpoint: str, api_key_env: str = "", timeout_s: float = 60.0,
                 max_attempts: int = 3, backoff_base_s: float = 0.5,
                 sleep: Callable[[float], None] = time.sleep):
        import os

        import requests

        self._requests = requests
        self.endpoint = endpoint.rstrip("/")
        self.api_key = os.environ.get(api_key_env, "") if api_key_env else ""
        self.timeout_s = timeout_s
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self._sleep = sleep

    def complete(self, request: ChatRequest) -> ChatResponse:
        url = f"{self.endpoint}/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            start = time.monotonic()
            try:
                resp = self._requests.post(url, headers=headers, json=body, timeout=self.timeout_s)
                if resp.status_code in (429, 500, 502, 503, 504):
                    raise TransportError(f"HTTP {resp.status_code}")
                resp.raise_for_status()
                data = resp.json()
                usage = data.get("usage", {})
                return ChatResponse(
                    content=data["choices"][0]["message"]["content"],
                    input_tokens=int(usage.get("prompt_tokens", 0)),
                    output_tokens=int(usage.get("completion_tokens", 0)),
                    latency_s=time.monotonic() - start,
                )
            except Exception as e:  # noqa: BLE001 - every transport failure is retryable
                last_error = e
                if attempt + 1 < self.max_attempts:
                    self._sleep(self.backoff_base_s * (2 ** attempt))
        raise TransportError(f"chat completion failed after {self.max_attempts} attempts: {last_error}")


# ---------------------------------------------------------------------------
# Record / replay
# ---------------------------------------------------------------------------

RECORD = "record"
REPLAY = "replay"


class ReplayBackend:
    """Record mode persists (request, response) rows; replay mode serves them.

    Replay is strict: a request whose hash is absent from the store fails
    loudly, naming the hash. Repeated identical requests replay in recorded
    order, sticking at the last recorded response once exhausted.
    """

    def __init__(self, store_path: str | Path, mode: str, inner: Backend | None = None):
        if mode not in (RECORD, REPLAY):
            raise ValueError(f"mode must be {RECORD!r} or {REPLAY!r}")
        if mode == RECORD and inner is None:
            raise ValueError("record mode needs an inner backend")
        self.store_path = Path(store_path)
        self.mode = mode
        self.inner = inner
        self._lock = threading.Lock()
        self._responses: dict[str, list[ChatResponse]] = {}
        self._cursors: dict[str, int] = {}
        if mode == REPLAY:
            self._load()

    def _load(self) -> None:
        if not self.store_path.exists():
            return
        with open(self.store_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                resp = row["response"]
                self._responses.setdefault(row["key"], []).append(ChatResponse(
                    content=resp["content"],
                    input_tokens=int(resp.get("input_tokens", 0)),
                    output_tokens=int(resp.get("output_tokens", 0)),
                    latency_s=float(resp.get("latency_s", 0.0)),
                ))

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = request_replay_key(request)
        if self.mode == REPLAY:
            with self._lock:
                recorded = self._responses.get(key)
                if not recorded:
                    raise ReplayMissError(key, request)
                cursor = self._cursors.get(key, 0)
                response = recorded[min(cursor, len(recorded) - 1)]
                self._cursors[key] = cursor + 1
            return response
        response = self.inner.complete(request)
        row = {
            "key": key,
            "request": {
                "model_id": request.model_id,
                "messages": [{"role": m.role, "content": m.content} for m in request.messages],
                "temperature": request.temperature,
                "max_output_tokens": request.max_output_tokens,
                "purpose": request.purpose.value,
            },
            "response": {
                "content": response.content,
                "input_tokens": response.input_tokens,
                "output_tokens": response.output_tokens,
                "latency_s": response.latency_s,
            },
        }
        with self._lock:
            with open(self.store_path, "a", encoding="utf-8") as f:
                f.write(compact_json(row) + "\n")
        return response


# ---------------------------------------------------------------------------
# JSON extraction
# ---------------------------------------------------------------------------

class JsonExtractError(ValueError):
    def __init__(self, message: str, content: str):
        self.content = content
        super().__init__(message)


class NoJsonFound(JsonExtractError):
    pass


class MalformedJson(JsonExtractError):
    pass


_FENCE_RE = re.compile(r"```json\s*\n(.*?)```", re.DOTALL)


def extract_json(content: str):
    """Parse the first well-formed fenced ```json block, else the whole body.

    NoJsonFound means nothing in the content even looked like JSON;
    MalformedJson means something did but would not parse. Both keep the raw
    content for upstream retry logic.
    """
    saw_candidate = False
    for match in _FENCE_RE.finditer(content):
        saw_candidate = True
        try:
            return json.loads(match.group(1).strip())
        except json.JSONDecodeError:
            continue
    body = content.strip()
    if body.startswith("{") or body.startswith("["):
        saw_candidate = True
    try:
        return json.loads(body)
    except json.JSONDecodeError:
        pass
    if saw_candidate:
        raise MalformedJson("JSON content present but unparseable", content)
    raise NoJsonFound("no JSON content found", content)


def render_fenced(value) -> str:
    return f"```json\n{json.dumps(value, ensure_ascii=False, indent=2)}\n```"


# ---------------------------------------------------------------------------
# Budget and client
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Budget:
    max_calls: int | None = None
    max_cost_usd: float | None = None


class BudgetExceeded(RuntimeError):
    pass


class JsonRetryExhausted(RuntimeError):
    def __init__(self, last_error: JsonExtractError, attempts: int):
        self.last_error = last_error
        self.attempts = attempts
        super().__init__(f"no valid JSON after {attempts} attempts")


REPAIR_INSTRUCTION = (
    "Your previous reply was not valid JSON. Respond again with a single fenced "
    "```json block and nothing else."
)

JSON_RETRY_LIMIT = 3


class ChatClient:
    """One completion surface for the whole engine.

    Every successful call appends exactly one ledger row, tagged with the
    call's purpose. When a budget is set, the check runs before each call, so
    at most one in-flight call can overshoot the cap.
    """

    def __init__(self, backend: Backend, ledger: RunLedger, budget: Budget | None = None):
        self.backend = backend
        self.ledger = ledger
        self.budget = budget

    def _check_budget(self) -> None:
        if self.budget is None:
            return
        if self.budget.max_calls is not None and self.ledger.call_count + 1 > self.budget.max_calls:
            raise BudgetExceeded(f"call budget {self.budget.max_calls} reached")
        if self.budget.max_cost_usd is not None:
            limit_micro = int(round(self.budget.max_cost_usd * 1_000_000))
            if self.ledger.total_cost_micro >= limit_micro:
                raise BudgetExceeded(f"cost budget ${self.budget.max_cost_usd} reached")

    def complete(self, request: ChatRequest) -> ChatResponse:
        self._check_budget()
        response = self.backend.complete(request)
        self.ledger.record_call(request.purpose.value, request.model_id,
                                response.input_tokens, response.output_tokens)
        return response

    def complete_json(self, request: ChatRequest, retries: int = JSON_RETRY_LIMIT):
        """complete() plus JSON extraction, re-asking with a repair line on failure."""
        req = request
        last: JsonExtractError | None = None
        for attempt in range(retries + 1):
            response = self.complete(req)
            try:
                return extract_json(response.content)
            except JsonExtractError as e:
                last = e
                logger.warning("malformed JSON from %s call (attempt %d/%d)",
                               request.purpose.value, attempt + 1, retries + 1)
                req = replace(req, messages=req.messages + (Message("user", REPAIR_INSTRUCTION),))
        raise JsonRetryExhausted(last, retries + 1)
