"""Shared test scaffolding: scripted backends, tiny states, runtime builders."""

from __future__ import annotations

import json
from typing import Callable

from flowtune.backend import (
    Budget,
    ChatClient,
    ChatRequest,
    Purpose,
    ScriptedMockBackend,
)
from flowtune.model import (
    LLM_EXECUTOR,
    TOOL_EXECUTOR,
    ExecutorSpec,
    Sequential,
    StepSpec,
    WorkflowState,
)
from flowtune.runtime import ModelSettings, Runtime
from flowtune.store import LogicalClock, PriceTable, RunLedger
from flowtune.tools import ToolRegistry


def fenced(obj) -> str:
    return f"```json\n{json.dumps(obj)}\n```"


class PurposeScript:
    """Dispatch scripted responses by purpose tag; records every request."""

    def __init__(self, handlers: dict[Purpose, Callable[[ChatRequest], str]] | None = None,
                 default: Callable[[ChatRequest], str] | None = None):
        self.handlers = dict(handlers or {})
        self.default = default
        self.calls: list[ChatRequest] = []

    def __call__(self, request: ChatRequest) -> str:
        self.calls.append(request)
        handler = self.handlers.get(request.purpose, self.default)
        if handler is None:
            raise AssertionError(f"no script for purpose {request.purpose}")
        return handler(request)

    def count(self, purpose: Purpose) -> int:
        return sum(1 for r in self.calls if r.purpose == purpose)


def user_content(request: ChatRequest) -> str:
    for m in reversed(request.messages):
        if m.role == "user":
            return m.content
    raise AssertionError("no user message")


def system_content(request: ChatRequest) -> str:
    return request.messages[0].content if request.messages[0].role == "system" else ""


def make_runtime(script, tools: ToolRegistry | None = None,
                 prices: PriceTable | None = None, budget: Budget | None = None,
                 settings: ModelSettings | None = None, ledger_sink=None) -> Runtime:
    clock = LogicalClock()
    ledger = RunLedger(prices=prices or PriceTable(), clock=clock, sink_path=ledger_sink)
    client = ChatClient(ScriptedMockBackend(script), ledger, budget=budget)
    return Runtime(
        client=client,
        settings=settings or ModelSettings(),
        tools=tools or ToolRegistry(),
        clock=clock,
    )


def llm_executor(name: str, prompt: str | None = None, description: str = "") -> ExecutorSpec:
    return ExecutorSpec(
        name=name,
        kind=LLM_EXECUTOR,
        description=description or f"{name} step",
        prompt=prompt or f"{name} prompt",
    )


def tool_executor(name: str, tool_names: tuple[str, ...], prompt: str | None = None) -> ExecutorSpec:
    return ExecutorSpec(
        name=name,
        kind=TOOL_EXECUTOR,
        description=f"{name} step",
        prompt=prompt or f"{name} prompt",
        tool_names=tool_names,
    )


def chain_state(k: int, revision: int = 0) -> WorkflowState:
    """K sequential LLM steps, one executor each, prompts 'step-1 prompt' etc."""
    executors = {}
    sketch = []
    for i in range(1, k + 1):
        exe = llm_executor(f"step_{i}", prompt=f"step-{i} prompt")
        executors[exe.name] = exe
        sketch.append(StepSpec(step_id=i, description=f"step {i}", executor_name=exe.name,
                               control=Sequential()))
    return WorkflowState(sketch=tuple(sketch), executors=executors, revision=revision)


class FakeSample:
    def __init__(self, sample_id: str, question: str, answer: str = ""):
        self.id = sample_id
        self.question = question
        self.answer = answer
