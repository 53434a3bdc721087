"""Applies textual gradients: prompt rewrites, sketch edits, cold start.

Plan application is atomic. A plan is fully validated first, then every new
executor is initialized; only when all of that succeeds does a new state
appear. Any failure along the way returns the original state untouched, with
the reason on the outcome, so a half-applied sketch can never be observed or
checkpointed.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .backend import ChatRequest, JsonRetryExhausted, Message, Purpose
from .evaluation import Sample
from .gradients import (
    GradientUnavailable,
    aggregate_gradients,
    grad_workflow,
    render_agents_with_prompts,
    render_available_tools,
    render_current_agents,
    render_workflow_sketch,
    render_workflow_structure,
)
from .model import (
    LLM_EXECUTOR,
    MAX_SKETCH_STEPS,
    TOOL_EXECUTOR,
    Control,
    ExecutionTrace,
    ExecutorSpec,
    Sequential,
    StepRecord,
    StepSpec,
    TextualGradient,
    TokenUsage,
    WorkflowState,
    control_from_json,
    validate_state,
)
from .runtime import Runtime

logger = logging.getLogger(__name__)

OUTPUT_FORMAT_REMINDER = (
    "Reminder: reply with one fenced JSON object containing exactly the keys "
    '"reasoning", "should_update", and "updated_execution_plan".'
)

_NAME_SANITIZE_RE = re.compile(r"[^A-Za-z0-9_]+")

REUSE = "reuse"
NEW = "new"


class InitFailed(RuntimeError):
    pass


class BootstrapFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class PlanStep:
    step_id: int
    description: str
    tools: tuple[str, ...]
    executor_type: str
    executor_name: str
    generation_guideline: str
    control: Control = field(default_factory=Sequential)
    prompt: str = ""  # combined-mode plans carry prompts inline


@dataclass(frozen=True)
class PlanDecision:
    reasoning: str
    should_update: bool
    plan: tuple[PlanStep, ...]


@dataclass(frozen=True)
class PromptUpdate:
    updated_prompt: str
    changes_made: tuple[str, ...]
    reasoning: str


@dataclass(frozen=True)
class UpdateOutcome:
    """Result of a workflow update attempt. `state` is always usable: the new
    state when applied, the original otherwise."""

    state: WorkflowState
    decision: PlanDecision | None
    applied: bool
    error: str | None = None
    init_count: int = 0


class PlanFormatError(ValueError):
    pass


def _parse_plan_step(obj, inline_prompts: bool) -> PlanStep:
    if not isinstance(obj, dict):
        raise PlanFormatError(f"plan step must be an object, got {type(obj).__name__}")
    try:
        step_id = int(obj["step_id"])
        description = str(obj["description"])
        executor_name = str(obj["executor_name"])
    except (KeyError, TypeError, ValueError) as e:
        raise PlanFormatError(f"bad plan step: {e}") from e
    tools_raw = obj.get("tools", [])
    if not isinstance(tools_raw, list):
        raise PlanFormatError("tools must be a list")
    control = Sequential()
    if "control" in obj:
        try:
            control = control_from_json(obj["control"])
        except ValueError as e:
            raise PlanFormatError(str(e)) from e
    if inline_prompts:
        executor_type = str(obj.get("executor_type", NEW))
        guideline = ""
        prompt = str(obj.get("prompt", ""))
    else:
        executor_type = str(obj.get("executor_type", ""))
        guideline = str(obj.get("generation_guideline", "") or "")
        prompt = ""
    return PlanStep(
        step_id=step_id,
        description=description,
        tools=tuple(str(t) for t in tools_raw),
        executor_type=executor_type,
        executor_name=executor_name,
        generation_guideline=guideline if executor_type != REUSE else "",
        control=control,
        prompt=prompt,
    )


def parse_plan_decision(obj, inline_prompts: bool = False) -> PlanDecision:
    if not isinstance(obj, dict):
        raise PlanFormatError(f"decision must be an object, got {type(obj).__name__}")
    should_update = obj.get("should_update")
    if not isinstance(should_update, bool):
        raise PlanFormatError("should_update must be a boolean")
    raw_plan = obj.get("updated_execution_plan", [])
    if raw_plan is None:
        raw_plan = []
    if not isinstance(raw_plan, list):
        raise PlanFormatError("updated_execution_plan must be a list")
    plan = tuple(_parse_plan_step(s, inline_prompts) for s in raw_plan) if should_update else ()
    return PlanDecision(
        reasoning=str(obj.get("reasoning", "")),
        should_update=should_update,
        plan=plan,
    )


def validate_plan(state: WorkflowState, plan: tuple[PlanStep, ...],
                  available_tools: frozenset[str]) -> list[str]:
    problems: list[str] = []
    if not plan:
        problems.append("plan is empty")
        return problems
    ids = [s.step_id for s in plan]
    if ids != list(range(1, len(ids) + 1)):
        problems.append(f"step ids not contiguous from 1: {ids}")
    if len(plan) > MAX_SKETCH_STEPS:
        problems.append(f"{len(plan)} steps exceeds cap {MAX_SKETCH_STEPS}")
    for step in plan:
        for tool in step.tools:
            if tool not in available_tools:
                problems.append(f"step {step.step_id}: unknown tool {tool!r}")
        if step.executor_type == REUSE:
            exe = state.executors.get(step.executor_name)
            if exe is None:
                problems.append(f"step {step.step_id}: reuse of unknown executor "
                                f"{step.executor_name!r}")
            else:
                wants_tools = bool(step.tools)
                if wants_tools != (exe.kind == TOOL_EXECUTOR):
                    problems.append(
                        f"step {step.step_id}: executor {exe.name} has kind {exe.kind} "
                        f"but plan tools are {list(step.tools)}")
        elif step.executor_type == NEW:
            if not step.generation_guideline:
                problems.append(f"step {step.step_id}: new executor without generation_guideline")
        else:
            problems.append(f"step {step.step_id}: executor_type must be "
                            f"'{REUSE}' or '{NEW}', got {step.executor_type!r}")
    return problems


def sanitize_executor_name(name: str) -> str:
    cleaned = _NAME_SANITIZE_RE.sub("_", name).strip("_")
    return cleaned or "Executor"


def uniquify_name(name: str, taken: set[str]) -> str:
    if name not in taken:
        return name
    suffix = 2
    while f"{name}_{suffix}" in taken:
        suffix += 1
    return f"{name}_{suffix}"


# ---------------------------------------------------------------------------
# Meta operations
# ---------------------------------------------------------------------------

def init_executor(rt: Runtime, step: PlanStep, sample_questions: list[str],
                  taken_names: set[str]) -> ExecutorSpec:
    """Generate the initial prompt for a new step's executor.

    The plan decides the executor kind (tools present or not); the generated
    spec supplies name, description, and prompt. Names are sanitized and
    uniquified against the registry.
    """
    if step.executor_type != NEW:
        raise ValueError("init_executor only applies to new steps")
    if not step.generation_guideline:
        raise ValueError("generation_guideline must be nonempty")
    pair = rt.templates.render("init_executor", {
        "step_id": step.step_id,
        "step_description": step.description,
        "tools": ", ".join(step.tools) if step.tools else "none",
        "generation_guideline": step.generation_guideline,
        "questions": "\n".join(f"- {q}" for q in sample_questions),
    })
    request = rt.meta_request(pair.system, pair.user, Purpose.INIT_EXECUTOR)
    try:
        obj = rt.client.complete_json(request)
        raw_name = str(obj["name"])
        description = str(obj.get("description", step.description))
        prompt = str(obj["prompt"])
    except (JsonRetryExhausted, KeyError, TypeError) as e:
        raise InitFailed(f"initialization failed for step {step.step_id}: {e}") from e
    if not prompt:
        raise InitFailed(f"initialization for step {step.step_id} produced an empty prompt")
    kind = TOOL_EXECUTOR if step.tools else LLM_EXECUTOR
    name = uniquify_name(sanitize_executor_name(raw_name), taken_names)
    return ExecutorSpec(
        name=name,
        kind=kind,
        description=description,
        prompt=prompt,
        tool_names=tuple(step.tools),
        version=0,
    )


def update_workflow(rt: Runtime, state: WorkflowState,
                    gradients: list[TextualGradient], sample_questions: list[str],
                    metrics_info: str) -> UpdateOutcome:
    """Outer-loop sketch edit from a batch of workflow gradients.

    Returns the original state on any failure (bad JSON, invalid plan, failed
    initialization); returns a revision-bumped state only when the whole plan
    applied. Old executors stay registered even when their steps disappear,
    so later plans can still reuse them.
    """
    if not gradients:
        raise ValueError("gradient batch must be nonempty")
    pair = rt.templates.render("optim_workflow", {
        "metrics_info": metrics_info,
        "available_tools": render_available_tools(rt.tools),
        "current_workflow": render_workflow_structure(state),
        "current_agents": render_current_agents(state),
        "num_samples": len(gradients),
        "aggregated_gradients": aggregate_gradients(gradients),
        "output_format_instruction": OUTPUT_FORMAT_REMINDER,
    })
    request = rt.meta_request(pair.system, pair.user, Purpose.OPTIM_WORKFLOW)
    try:
        obj = rt.client.complete_json(request)
    except JsonRetryExhausted:
        logger.warning("workflow update skipped: JSON retries exhausted")
        return UpdateOutcome(state=state, decision=None, applied=False, error="json_failure")
    try:
        decision = parse_plan_decision(obj)
    except PlanFormatError as e:
        logger.warning("workflow update skipped: %s", e)
        return UpdateOutcome(state=state, decision=None, applied=False,
                             error=f"plan_format: {e}")
    if not decision.should_update:
        return UpdateOutcome(state=state, decision=decision, applied=False)

    problems = validate_plan(state, decision.plan, rt.tools.names())
    if problems:
        logger.warning("plan rejected: %s", "; ".join(problems))
        return UpdateOutcome(state=state, decision=decision, applied=False,
                             error="PlanInvalid: " + "; ".join(problems))

    new_executors: dict[str, ExecutorSpec] = {}
    final_names: dict[int, str] = {}
    taken = set(state.executors)
    try:
        for step in decision.plan:
            if step.executor_type == NEW:
                spec = init_executor(rt, step, sample_questions, taken)
                new_executors[spec.name] = spec
                taken.add(spec.name)
                final_names[step.step_id] = spec.name
            else:
                final_names[step.step_id] = step.executor_name
    except InitFailed as e:
        logger.warning("plan aborted: %s", e)
        return UpdateOutcome(state=state, decision=decision, applied=False,
                             error=f"InitFailed: {e}")

    sketch = tuple(
        StepSpec(
            step_id=step.step_id,
            description=step.description,
            executor_name=final_names[step.step_id],
            tool_names=step.tools,
            control=step.control,
        )
        for step in decision.plan
    )
    executors = dict(state.executors)
    executors.update(new_executors)
    candidate = WorkflowState(sketch=sketch, executors=executors, revision=state.revision + 1)
    violations = validate_state(candidate, rt.tools.names())
    if violations:
        logger.warning("applied plan failed validation: %s", violations)
        return UpdateOutcome(state=state, decision=decision, applied=False,
                             error="PlanInvalid: " + "; ".join(str(v) for v in violations))
    return UpdateOutcome(state=candidate, decision=decision, applied=True,
                         init_count=len(new_executors))


def update_prompt(rt: Runtime, state: WorkflowState, executor: ExecutorSpec,
                  gradients: list[TextualGradient], num_samples: int) -> PromptUpdate | None:
    """One TGD step for one executor. Returns None when the meta reply could
    not be parsed; the caller keeps the old prompt in that case."""
    if not gradients:
        raise ValueError("gradient batch must be nonempty")
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    served = {s.step_id for s in state.sketch if s.executor_name == executor.name}
    for g in gradients:
        if g.is_workflow_scoped or g.step_id not in served:
            raise ValueError(f"gradient scoped to step {g.step_id} does not belong to "
                             f"executor {executor.name}")
    pair = rt.templates.render("optim_call", {
        "workflow_sketch": render_workflow_sketch(state),
        "executor_name": executor.name,
        "executor_type": executor.kind,
        "executor_tools": ", ".join(executor.tool_names) if executor.tool_names else "none",
        "current_prompt": executor.prompt,
        "num_samples": num_samples,
        "aggregated_gradients": aggregate_gradients(gradients),
    })
    request = rt.meta_request(pair.system, pair.user, Purpose.OPTIM_CALL)
    try:
        obj = rt.client.complete_json(request)
        updated = str(obj["updated_prompt"])
    except (JsonRetryExhausted, KeyError, TypeError):
        logger.warning("prompt update skipped for %s: unparseable meta reply", executor.name)
        return None
    if not updated:
        logger.warning("prompt update skipped for %s: empty prompt", executor.name)
        return None
    changes = obj.get("changes_made", [])
    if not isinstance(changes, list):
        changes = [str(changes)]
    return PromptUpdate(
        updated_prompt=updated,
        changes_made=tuple(str(c) for c in changes),
        reasoning=str(obj.get("reasoning", "")),
    )


def update_workflow_combined(rt: Runtime, state: WorkflowState,
                             gradients: list[TextualGradient],
                             metrics_info: str) -> UpdateOutcome:
    """Single-layer update: one meta call rewrites structure and prompts at
    once, no separate initialization. Used when the bilevel split is off."""
    if not gradients:
        raise ValueError("gradient batch must be nonempty")
    pair = rt.templates.render("optim_combined", {
        "metrics_info": metrics_info,
        "available_tools": render_available_tools(rt.tools),
        "current_workflow": render_workflow_structure(state),
        "agents_block": render_agents_with_prompts(state),
        "num_samples": len(gradients),
        "aggregated_gradients": aggregate_gradients(gradients),
    })
    request = rt.meta_request(pair.system, pair.user, Purpose.OPTIM_WORKFLOW)
    try:
        obj = rt.client.complete_json(request)
        decision = parse_plan_decision(obj, inline_prompts=True)
    except JsonRetryExhausted:
        return UpdateOutcome(state=state, decision=None, applied=False, error="json_failure")
    except PlanFormatError as e:
        return UpdateOutcome(state=state, decision=None, applied=False,
                             error=f"plan_format: {e}")
    if not decision.should_update:
        return UpdateOutcome(state=state, decision=decision, applied=False)

    problems: list[str] = []
    ids = [s.step_id for s in decision.plan]
    if ids != list(range(1, len(ids) + 1)):
        problems.append(f"step ids not contiguous from 1: {ids}")
    if len(decision.plan) > MAX_SKETCH_STEPS:
        problems.append(f"{len(decision.plan)} steps exceeds cap {MAX_SKETCH_STEPS}")
    for step in decision.plan:
        for tool in step.tools:
            if tool not in rt.tools.names():
                problems.append(f"step {step.step_id}: unknown tool {tool!r}")
        if not step.prompt and step.executor_name not in state.executors:
            problems.append(f"step {step.step_id}: no prompt for new executor "
                            f"{step.executor_name!r}")
    if problems:
        return UpdateOutcome(state=state, decision=decision, applied=False,
                             error="PlanInvalid: " + "; ".join(problems))

    executors = dict(state.executors)
    sketch = []
    for step in decision.plan:
        name = sanitize_executor_name(step.executor_name)
        kind = TOOL_EXECUTOR if step.tools else LLM_EXECUTOR
        existing = executors.get(name)
        prompt = step.prompt or (existing.prompt if existing else "")
        if existing is not None:
            version = existing.version + (1 if prompt != existing.prompt else 0)
            description = existing.description if not step.description else step.description
        else:
            version = 0
            description = step.description
        executors[name] = ExecutorSpec(
            name=name, kind=kind, description=description, prompt=prompt,
            tool_names=tuple(step.tools), version=version,
        )
        sketch.append(StepSpec(
            step_id=step.step_id, description=step.description, executor_name=name,
            tool_names=step.tools, control=step.control,
        ))
    candidate = WorkflowState(sketch=tuple(sketch), executors=executors,
                              revision=state.revision + 1)
    violations = validate_state(candidate, rt.tools.names())
    if violations:
        return UpdateOutcome(state=state, decision=decision, applied=False,
                             error="PlanInvalid: " + "; ".join(str(v) for v in violations))
    return UpdateOutcome(state=candidate, decision=decision, applied=True)


def update_all_prompts(rt: Runtime, state: WorkflowState,
                       gradients: list[TextualGradient],
                       num_samples: int) -> tuple[WorkflowState, bool]:
    """One meta call updating every live executor's prompt, for runs that skip
    layer-by-layer backpropagation. Returns (state, applied)."""
    if not gradients:
        raise ValueError("gradient batch must be nonempty")
    pair = rt.templates.render("optim_all_prompts", {
        "workflow_sketch": render_workflow_sketch(state),
        "agents_block": render_agents_with_prompts(state),
        "num_samples": num_samples,
        "aggregated_gradients": aggregate_gradients(gradients),
    })
    request = rt.meta_request(pair.system, pair.user, Purpose.OPTIM_CALL)
    try:
        obj = rt.client.complete_json(request)
        updates = obj["updates"]
        if not isinstance(updates, dict):
            raise TypeError("updates must be an object")
    except (JsonRetryExhausted, KeyError, TypeError):
        logger.warning("all-prompts update skipped: unparseable meta reply")
        return state, False
    executors = dict(state.executors)
    live = set(state.live_executor_names())
    changed = False
    for name, prompt in updates.items():
        if name not in live or not isinstance(prompt, str) or not prompt:
            continue
        current = executors[name]
        if prompt != current.prompt:
            executors[name] = ExecutorSpec(
                name=current.name, kind=current.kind, description=current.description,
                prompt=prompt, tool_names=current.tool_names, version=current.version + 1,
            )
            changed = True
    if not changed:
        return state, False
    return WorkflowState(sketch=state.sketch, executors=executors,
                         revision=state.revision + 1), True


# ---------------------------------------------------------------------------
# Cold start
# ---------------------------------------------------------------------------

SEED_EXECUTOR_NAME = "DirectAnswer"
SEED_STEP_DESCRIPTION = "Answer the question directly."
SEED_PROMPT = "Answer the question."


def seed_state() -> WorkflowState:
    """Minimal one-step workflow the cold start edits away from."""
    executor = ExecutorSpec(
        name=SEED_EXECUTOR_NAME,
        kind=LLM_EXECUTOR,
        description=SEED_STEP_DESCRIPTION,
        prompt=SEED_PROMPT,
        version=0,
    )
    step = StepSpec(step_id=1, description=SEED_STEP_DESCRIPTION,
                    executor_name=SEED_EXECUTOR_NAME)
    return WorkflowState(sketch=(step,), executors={executor.name: executor}, revision=0)


def bootstrap_workflow(rt: Runtime, batch: list[Sample], metric, metrics_info: str) -> WorkflowState:
    """Cold start: instruction-free answers, one structure-gradient step per
    sample, then a normal workflow update from a one-step seed state."""
    if not batch:
        raise ValueError("bootstrap batch must be nonempty")
    base = seed_state()
    workflow_grads: list[TextualGradient] = []
    for sample in batch:
        request = ChatRequest(
            model_id=rt.settings.executor_model,
            messages=(Message("user", sample.question),),
            temperature=rt.settings.executor_temperature,
            max_output_tokens=rt.settings.max_output_tokens,
            purpose=Purpose.BOOTSTRAP,
        )
        response = rt.client.complete(request)
        pseudo_trace = ExecutionTrace(
            sample_id=sample.id,
            records=(StepRecord(
                step_id=1,
                input_text=sample.question,
                output_text=response.content,
                token_usage=TokenUsage(response.input_tokens, response.output_tokens),
            ),),
            final_output=response.content,
        )
        eval_result = metric(response.content, sample.answer)
        try:
            workflow_grads.append(grad_workflow(rt, base, pseudo_trace, sample,
                                                eval_result, metrics_info))
        except GradientUnavailable as e:
            logger.warning("bootstrap gradient skipped: %s", e)
    if not workflow_grads:
        raise BootstrapFailed("no bootstrap sample produced a workflow gradient")
    outcome = update_workflow(rt, base, workflow_grads,
                              [s.question for s in batch], metrics_info)
    if outcome.error is not None:
        raise BootstrapFailed(outcome.error)
    return outcome.state
