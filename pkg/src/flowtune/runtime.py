"""Shared execution context: client, model settings, templates, tools, clock."""

from __future__ import annotations

from dataclasses import dataclass, field

from .backend import ChatClient, ChatRequest, Message, Purpose
from .model import LOOP_DONE_SENTINEL
from .store import Clock, SystemClock
from .templates import PromptLibrary, load_templates
from .tools import ToolRegistry


@dataclass(frozen=True)
class ModelSettings:
    """Executor and meta calls are configured independently.

    Forward executors default to a mildly sampled temperature; all meta calls
    (gradients, updates, initialization) default to 0 to keep runs replayable.
    """

    executor_model: str = "executor"
    meta_model: str = "meta"
    executor_temperature: float = 0.2
    meta_temperature: float = 0.0
    max_output_tokens: int = 4096


@dataclass
class Runtime:
    client: ChatClient
    settings: ModelSettings = field(default_factory=ModelSettings)
    templates: PromptLibrary = field(default_factory=load_templates)
    tools: ToolRegistry = field(default_factory=ToolRegistry)
    clock: Clock = field(default_factory=SystemClock)
    loop_sentinel: str = LOOP_DONE_SENTINEL

    def executor_request(self, system: str, user: str, purpose: Purpose = Purpose.FORWARD,
                         extra_messages: tuple[Message, ...] = ()) -> ChatRequest:
        messages = (Message("system", system), Message("user", user)) + extra_messages
        return ChatRequest(
            model_id=self.settings.executor_model,
            messages=messages,
            temperature=self.settings.executor_temperature,
            max_output_tokens=self.settings.max_output_tokens,
            purpose=purpose,
        )

    def meta_request(self, system: str, user: str, purpose: Purpose) -> ChatRequest:
        return ChatRequest(
            model_id=self.settings.meta_model,
            messages=(Message("system", system), Message("user", user)),
            temperature=self.settings.meta_temperature,
            max_output_tokens=self.settings.max_output_tokens,
            purpose=purpose,
        )
