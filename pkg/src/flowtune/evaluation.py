"""Metrics, textual loss rendering, and dataset loading."""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .backend import ChatClient, JsonRetryExhausted, Purpose

ARTICLES = frozenset({"a", "an", "the"})
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class DatasetError(ValueError):
    pass


class DatasetParseError(DatasetError):
    def __init__(self, path, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class DuplicateIdError(DatasetError):
    def __init__(self, path, line_no: int, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"{path}:{line_no}: duplicate id {sample_id!r}")


@dataclass(frozen=True)
class Sample:
    id: str
    question: str
    answer: str
    context: str | None = None


@dataclass(frozen=True)
class EvalResult:
    metric_name: str
    score: float
    feedback: str

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace.

    Idempotent: applying it twice equals applying it once.
    """
    lowered = text.lower().translate(_PUNCT_TABLE)
    tokens = [t for t in lowered.split() if t not in ARTICLES]
    return " ".join(tokens)


def exact_match(prediction: str, truth: str) -> EvalResult:
    norm_pred = normalize_answer(prediction)
    norm_truth = normalize_answer(truth)
    if norm_pred == norm_truth:
        return EvalResult("exact_match", 1.0,
                          f"exact_match = 1.0. The prediction matches the ground truth "
                          f"(normalized: {norm_pred!r}).")
    return EvalResult(
        "exact_match", 0.0,
        f"exact_match = 0.0. The prediction does not match the ground truth. "
        f"Normalized prediction: {norm_pred!r}. Normalized ground truth: {norm_truth!r}.",
    )


def token_f1(prediction: str, truth: str) -> EvalResult:
    pred_tokens = normalize_answer(prediction).split()
    truth_tokens = normalize_answer(truth).split()
    if not pred_tokens and not truth_tokens:
        return EvalResult("token_f1", 1.0, "token_f1 = 1.0000. Both sides empty after normalization.")
    overlap = sum((Counter(pred_tokens) & Counter(truth_tokens)).values())
    if overlap == 0:
        score = 0.0
    else:
        precision = overlap / len(pred_tokens)
        recall = overlap / len(truth_tokens)
        score = 2 * precision * recall / (precision + recall)
    feedback = (
        f"token_f1 = {score:.4f}. Prediction tokens: {pred_tokens}. "
        f"Ground-truth tokens: {truth_tokens}. Shared token count: {overlap}."
    )
    return EvalResult("token_f1", score, feedback)


METRICS = {
    "exact_match": exact_match,
    "token_f1": token_f1,
}

METRIC_INFO = {
    "exact_match": (
        "exact_match: 1.0 if the normalized prediction equals the normalized ground "
        "truth (lowercase, punctuation stripped, articles a/an/the dropped, whitespace "
        "collapsed), else 0.0."
    ),
    "token_f1": (
        "token_f1: F1 overlap between the normalized token multisets of the prediction "
        "and the ground truth; 1.0 means identical token content."
    ),
}


def get_metric(name: str):
    try:
        return METRICS[name]
    except KeyError:
        raise KeyError(f"unknown metric {name!r}; available: {sorted(METRICS)}") from None


def metric_info(name: str) -> str:
    return METRIC_INFO.get(name, name)


def load_dataset(path: str | Path) -> list[Sample]:
    """Read one JSONL split; order is file order, ids must be unique."""
    path = Path(path)
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(path, line_no, f"invalid JSON ({e.msg})") from e
            for key in ("id", "question", "answer"):
                if key not in row:
                    raise DatasetParseError(path, line_no, f"missing field {key!r}")
            sample_id = str(row["id"])
            if sample_id in seen:
                raise DuplicateIdError(path, line_no, sample_id)
            if not str(row["question"]):
                raise DatasetParseError(path, line_no, "question is empty")
            seen.add(sample_id)
            samples.append(Sample(
                id=sample_id,
                question=str(row["question"]),
                answer=str(row["answer"]),
                context=str(row["context"]) if "context" in row and row["context"] is not None else None,
            ))
    return samples


JUDGE_SYSTEM = (
    "You are grading a model answer against a reference answer using the given "
    "rubric. Output valid JSON only."
)

JUDGE_USER = """\
## Rubric
{rubric}

## Reference Answer
{truth}

## Model Answer
{prediction}

Respond in JSON:
```json
{{"score": <number between 0 and 1>, "feedback": "<one-paragraph justification>"}}
```"""


def judge(client: ChatClient, model_id: str, prediction: str, truth: str, rubric: str,
          temperature: float = 0.0, max_output_tokens: int = 1024) -> EvalResult:
    """LLM-graded metric backed by the backend abstraction. Not a default metric."""
    from .backend import ChatRequest, Message

    request = ChatRequest(
        model_id=model_id,
        messages=(
            Message("system", JUDGE_SYSTEM),
            Message("user", JUDGE_USER.format(rubric=rubric, truth=truth, prediction=prediction)),
        ),
        temperature=temperature,
        max_output_tokens=max_output_tokens,
        purpose=Purpose.JUDGE,
    )
    try:
        obj = client.complete_json(request)
        score = max(0.0, min(1.0, float(obj["score"])))
        feedback = str(obj.get("feedback", ""))
    except (JsonRetryExhausted, KeyError, TypeError, ValueError):
        return EvalResult("judge", 0.0, "judge = 0.0. The judge reply could not be parsed.")
    return EvalResult("judge", score, f"judge = {score:.4f}. {feedback}")
