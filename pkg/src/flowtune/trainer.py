"""The bilevel training schedule, validation tracking, and best selection.

Per batch, the default schedule runs two optimization rounds; each round is
one structure-edit step followed by five prompt-descent steps over the same
batch. Validation runs after every batch and the checkpoint with the highest
score (earliest on ties) becomes the selected workflow. Budget breaches stop
the run softly: whatever was best so far is returned, flagged.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from typing import Callable

from .backend import Budget, BudgetExceeded
from .evaluation import Sample, get_metric, metric_info
from .forward import run_workflow
from .gradients import (
    ALL_AT_ONCE,
    GradientUnavailable,
    backward,
    grad_combined,
    grad_workflow,
)
from .model import ExecutionTrace, TextualGradient, WorkflowState, with_updated_prompt
from .optimizer import (
    update_all_prompts,
    update_prompt,
    update_workflow,
    update_workflow_combined,
)
from .runtime import Runtime
from .store import RunDirectory, micro_to_usd_str

logger = logging.getLogger(__name__)

MODE_FULL = "full"
MODE_PROMPT_ONLY = "prompt_only"
MODE_NO_BILEVEL = "no_bilevel"
MODE_NO_LAYERWISE = "no_layerwise"
MODES = (MODE_FULL, MODE_PROMPT_ONLY, MODE_NO_BILEVEL, MODE_NO_LAYERWISE)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 5
    bilevel_rounds_per_batch: int = 2
    inner_steps_per_round: int = 5
    outer_steps_per_round: int = 1
    epochs: int = 1
    mode: str = MODE_FULL
    budget: Budget = field(default_factory=Budget)
    seed: int | None = 0
    val_subsample: int | None = None
    recompute_inner_forward: bool = True
    keep_traces: bool = False

    def __post_init__(self):
        for name in ("batch_size", "bilevel_rounds_per_batch", "inner_steps_per_round",
                     "outer_steps_per_round", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.budget.max_calls is not None and self.budget.max_calls <= 0:
            raise ValueError("budget.max_calls must be positive when set")
        if self.budget.max_cost_usd is not None and self.budget.max_cost_usd <= 0:
            raise ValueError("budget.max_cost_usd must be positive when set")
        if self.val_subsample is not None and self.val_subsample < 1:
            raise ValueError("val_subsample must be >= 1 when set")


@dataclass(frozen=True)
class RunRecord:
    """One validation point. `revision` is the state revision at the last
    applied structural change, so prompt-only runs show a flat line."""

    batch_index: int
    val_score: float
    revision: int
    api_calls_so_far: int
    cost_so_far_micro: int
    timestamp: float | int

    def to_line(self) -> str:
        return (
            "{"
            f'"batch_index": {self.batch_index}, '
            f'"val_score": {json.dumps(self.val_score)}, '
            f'"revision": {self.revision}, '
            f'"api_calls_so_far": {self.api_calls_so_far}, '
            f'"cost_so_far_usd": {micro_to_usd_str(self.cost_so_far_micro)}, '
            f'"timestamp": {json.dumps(self.timestamp)}'
            "}"
        )


@dataclass(frozen=True)
class PerSampleEval:
    id: str
    score: float
    prediction: str
    error: str | None = None


@dataclass(frozen=True)
class EvalSummary:
    mean_score: float
    per_sample: tuple[PerSampleEval, ...]


@dataclass(frozen=True)
class TrainResult:
    best_state: WorkflowState
    records: tuple[RunRecord, ...]
    best_batch_index: int | None
    best_val_score: float | None
    final_state: WorkflowState
    halted_early: bool = False


def evaluate(rt: Runtime, state: WorkflowState, dataset: list[Sample], metric_name: str,
             trace_sink: Callable[[ExecutionTrace], None] | None = None) -> EvalSummary:
    """Forward every sample and average the metric. A failed forward scores 0
    with the error noted rather than aborting the whole evaluation."""
    if not dataset:
        raise ValueError("dataset is empty")
    metric = get_metric(metric_name)
    per: list[PerSampleEval] = []
    total = 0.0
    for sample in dataset:
        trace = run_workflow(rt, state, sample)
        if trace_sink is not None:
            trace_sink(trace)
        if trace.error is not None:
            per.append(PerSampleEval(sample.id, 0.0, trace.final_output, trace.error))
            continue
        result = metric(trace.final_output, sample.answer)
        total += result.score
        per.append(PerSampleEval(sample.id, result.score, trace.final_output, None))
    return EvalSummary(mean_score=total / len(dataset), per_sample=tuple(per))


def make_batches(train_set: list[Sample], config: TrainConfig) -> list[list[Sample]]:
    """Batch per epoch; a final short batch is allowed. A set seed shuffles
    each epoch deterministically, seed None keeps file order."""
    batches: list[list[Sample]] = []
    for epoch in range(config.epochs):
        order = list(train_set)
        if config.seed is not None:
            random.Random(config.seed + epoch).shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batches.append(order[start:start + config.batch_size])
    return batches


def train(rt: Runtime, config: TrainConfig, train_set: list[Sample], val_set: list[Sample],
          state0: WorkflowState, metric_name: str,
          run_dir: RunDirectory | None = None) -> TrainResult:
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be nonempty")
    metrics_info = metric_info(metric_name)
    val_view = val_set[:config.val_subsample] if config.val_subsample else val_set

    state = state0
    sketch_revision = state0.revision
    records: list[RunRecord] = []
    best_score: float | None = None
    best_batch: int | None = None
    best_state = state0
    halted = False

    for batch_index, batch in enumerate(make_batches(train_set, config)):
        try:
            state, sketch_revision = _run_batch(rt, config, state, batch, metric_name,
                                                metrics_info, sketch_revision)
            sink = None
            if run_dir is not None and config.keep_traces:
                sink = lambda trace: run_dir.write_trace(batch_index, trace)  # noqa: B023
            summary = evaluate(rt, state, val_view, metric_name, trace_sink=sink)
        except BudgetExceeded as e:
            logger.warning("budget reached at batch %d: %s", batch_index, e)
            halted = True
            break
        record = RunRecord(
            batch_index=batch_index,
            val_score=summary.mean_score,
            revision=sketch_revision,
            api_calls_so_far=rt.client.ledger.call_count,
            cost_so_far_micro=rt.client.ledger.total_cost_micro,
            timestamp=rt.clock.now(),
        )
        records.append(record)
        if run_dir is not None:
            run_dir.write_batch_checkpoint(state, batch_index)
            run_dir.append_record_line(record.to_line())
        if best_score is None or summary.mean_score > best_score:
            best_score = summary.mean_score
            best_batch = batch_index
            best_state = state
            if run_dir is not None:
                run_dir.promote_best(batch_index)

    return TrainResult(
        best_state=best_state,
        records=tuple(records),
        best_batch_index=best_batch,
        best_val_score=best_score,
        final_state=state,
        halted_early=halted,
    )


# ---------------------------------------------------------------------------
# Batch schedules per mode
# ---------------------------------------------------------------------------

def _run_batch(rt: Runtime, config: TrainConfig, state: WorkflowState, batch: list[Sample],
               metric_name: str, metrics_info: str,
               sketch_revision: int) -> tuple[WorkflowState, int]:
    for _ in range(config.bilevel_rounds_per_batch):
        if config.mode in (MODE_FULL, MODE_NO_LAYERWISE):
            for _ in range(config.outer_steps_per_round):
                state, sketch_revision = _outer_step(rt, state, batch, metric_name,
                                                     metrics_info, sketch_revision)
        if config.mode == MODE_NO_BILEVEL:
            state, sketch_revision = _combined_step(rt, state, batch, metric_name,
                                                    metrics_info, sketch_revision)
            continue
        state = _inner_phase(rt, config, state, batch, metric_name, metrics_info)
    return state, sketch_revision


def _forward_batch(rt: Runtime, state: WorkflowState, batch: list[Sample],
                   metric_name: str):
    metric = get_metric(metric_name)
    out = []
    for sample in batch:
        trace = run_workflow(rt, state, sample)
        result = metric(trace.final_output, sample.answer)
        out.append((sample, trace, result))
    return out


def _outer_step(rt: Runtime, state: WorkflowState, batch: list[Sample], metric_name: str,
                metrics_info: str, sketch_revision: int) -> tuple[WorkflowState, int]:
    gradients: list[TextualGradient] = []
    for sample, trace, result in _forward_batch(rt, state, batch, metric_name):
        try:
            gradients.append(grad_workflow(rt, state, trace, sample, result, metrics_info))
        except GradientUnavailable as e:
            logger.warning("outer gradient skipped: %s", e)
    if gradients:
        outcome = update_workflow(rt, state, gradients, [s.question for s in batch],
                                  metrics_info)
        if outcome.applied:
            state = outcome.state
            sketch_revision = state.revision
    return state, sketch_revision


def _combined_step(rt: Runtime, state: WorkflowState, batch: list[Sample], metric_name: str,
                   metrics_info: str, sketch_revision: int) -> tuple[WorkflowState, int]:
    gradients: list[TextualGradient] = []
    for sample, trace, result in _forward_batch(rt, state, batch, metric_name):
        try:
            gradients.append(grad_combined(rt, state, trace, sample, result, metrics_info))
        except GradientUnavailable as e:
            logger.warning("combined gradient skipped: %s", e)
    if gradients:
        outcome = update_workflow_combined(rt, state, gradients, metrics_info)
        if outcome.applied:
            state = outcome.state
            sketch_revision = state.revision
    return state, sketch_revision


def _inner_phase(rt: Runtime, config: TrainConfig, state: WorkflowState,
                 batch: list[Sample], metric_name: str, metrics_info: str) -> WorkflowState:
    mode = ALL_AT_ONCE if config.mode == MODE_NO_LAYERWISE else "layerwise"
    cached = None
    for _ in range(config.inner_steps_per_round):
        if cached is None or config.recompute_inner_forward:
            cached = _forward_batch(rt, state, batch, metric_name)
        per_sample_gradients: list[dict[int, TextualGradient]] = []
        for sample, trace, result in cached:
            try:
                per_sample_gradients.append(
                    backward(rt, state, trace, sample, result, metrics_info, mode=mode))
            except GradientUnavailable as e:
                logger.warning("sample dropped from inner step: %s", e)
        if not per_sample_gradients:
            continue
        if config.mode == MODE_NO_LAYERWISE:
            flat = [g for grads in per_sample_gradients for _, g in sorted(grads.items())]
            state, _ = update_all_prompts(rt, state, flat, num_samples=len(batch))
            continue
        for name in state.live_executor_names():
            served = [s.step_id for s in state.sketch if s.executor_name == name]
            relevant = [
                grads[step_id]
                for grads in per_sample_gradients
                for step_id in served
                if step_id in grads
            ]
            if not relevant:
                continue
            update = update_prompt(rt, state, state.executors[name], relevant,
                                   num_samples=len(batch))
            if update is not None:
                state = with_updated_prompt(state, name, update.updated_prompt)
    return state
