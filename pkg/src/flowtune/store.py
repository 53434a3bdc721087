"""Run accounting and persistence.

Costs are carried as integer micro-dollars so ledger totals are exact sums of
row costs, with no floating-point drift. Timestamps come from a pluggable
clock: runs on mock or replay backends use a logical counter, which makes the
emitted files byte-identical across repeat runs.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

from . import model

MICRO = Decimal("0.000001")


class Clock:
    def now(self) -> float | int:
        raise NotImplementedError


class SystemClock(Clock):
    def now(self) -> float:
        return time.time()


class LogicalClock(Clock):
    """Deterministic monotone counter; one tick per reading."""

    def __init__(self, start: int = 0):
        self._tick = start
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            self._tick += 1
            return self._tick


@dataclass(frozen=True)
class Price:
    input_per_1m: Decimal
    output_per_1m: Decimal


class PriceTable:
    """USD prices per million tokens, keyed by model id."""

    def __init__(self, prices: dict[str, Price] | None = None):
        self._prices = dict(prices or {})

    @staticmethod
    def from_config(obj: dict) -> "PriceTable":
        prices = {}
        for model_id, row in (obj or {}).items():
            prices[model_id] = Price(
                input_per_1m=Decimal(str(row["input_per_1m"])),
                output_per_1m=Decimal(str(row["output_per_1m"])),
            )
        return PriceTable(prices)

    def has(self, model_id: str) -> bool:
        return model_id in self._prices

    def cost_micro(self, model_id: str, input_tokens: int, output_tokens: int) -> tuple[int, bool]:
        """(cost in micro-dollars rounded half-even, unknown-model flag)."""
        price = self._prices.get(model_id)
        if price is None:
            return 0, True
        usd = (Decimal(input_tokens) * price.input_per_1m
               + Decimal(output_tokens) * price.output_per_1m) / Decimal(1_000_000)
        return int(usd.quantize(MICRO, rounding=ROUND_HALF_EVEN) / MICRO), False


def micro_to_usd_str(micro: int) -> str:
    """Fixed 6-decimal rendering, e.g. 3600 -> '0.003600'."""
    sign = "-" if micro < 0 else ""
    micro = abs(micro)
    return f"{sign}{micro // 1_000_000}.{micro % 1_000_000:06d}"


@dataclass(frozen=True)
class LedgerRow:
    idx: int
    purpose: str
    model: str
    in_tok: int
    out_tok: int
    cost_micro: int
    ts: float | int
    warn: bool = False

    def to_line(self) -> str:
        fields = (
            f'"idx": {self.idx}, '
            f'"purpose": {json.dumps(self.purpose)}, '
            f'"model": {json.dumps(self.model)}, '
            f'"in_tok": {self.in_tok}, '
            f'"out_tok": {self.out_tok}, '
            f'"cost_usd": {micro_to_usd_str(self.cost_micro)}, '
            f'"ts": {json.dumps(self.ts)}'
        )
        if self.warn:
            fields += ', "warn": true'
        return "{" + fields + "}"


class RunLedger:
    """Append-only record of every model call. Rows are never mutated."""

    def __init__(self, prices: PriceTable | None = None, clock: Clock | None = None,
                 sink_path: str | Path | None = None):
        self.prices = prices or PriceTable()
        self.clock = clock or SystemClock()
        self._rows: list[LedgerRow] = []
        self._lock = threading.Lock()
        self._sink = open(sink_path, "a", encoding="utf-8") if sink_path else None

    def record_call(self, purpose: str, model_id: str, input_tokens: int,
                    output_tokens: int) -> LedgerRow:
        cost, warn = self.prices.cost_micro(model_id, input_tokens, output_tokens)
        with self._lock:
            row = LedgerRow(
                idx=len(self._rows),
                purpose=purpose,
                model=model_id,
                in_tok=input_tokens,
                out_tok=output_tokens,
                cost_micro=cost,
                ts=self.clock.now(),
                warn=warn,
            )
            self._rows.append(row)
            if self._sink is not None:
                self._sink.write(row.to_line() + "\n")
                self._sink.flush()
        return row

    @property
    def rows(self) -> tuple[LedgerRow, ...]:
        with self._lock:
            return tuple(self._rows)

    @property
    def call_count(self) -> int:
        with self._lock:
            return len(self._rows)

    @property
    def total_cost_micro(self) -> int:
        with self._lock:
            return sum(r.cost_micro for r in self._rows)

    @property
    def total_cost_usd(self) -> Decimal:
        return Decimal(self.total_cost_micro) * MICRO

    def count_by_purpose(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for row in self.rows:
            counts[row.purpose] = counts.get(row.purpose, 0) + 1
        return counts

    def purposes_in_order(self) -> list[str]:
        return [r.purpose for r in self.rows]

    def close(self) -> None:
        if self._sink is not None:
            self._sink.close()
            self._sink = None


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(state: model.WorkflowState, path: str | Path) -> None:
    model.require_valid(state)
    Path(path).write_text(model.serialize_state(state), encoding="utf-8")


def load_checkpoint(path: str | Path) -> model.WorkflowState:
    """Load and validate a checkpoint; raises on schema or invariant failures."""
    state = model.deserialize_state(Path(path).read_text(encoding="utf-8"))
    model.require_valid(state)
    return state


class RunDirectory:
    """On-disk layout of one training run.

    checkpoints/batch_{i}.json   one checkpoint per completed batch
    best.json                    byte copy of the argmax-batch checkpoint
    records.jsonl                one run record per batch
    ledger.jsonl                 one row per model call
    traces/                      optional validation traces
    config.json                  resolved configuration, for replays
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "checkpoints").mkdir(exist_ok=True)

    @property
    def ledger_path(self) -> Path:
        return self.root / "ledger.jsonl"

    @property
    def records_path(self) -> Path:
        return self.root / "records.jsonl"

    @property
    def best_path(self) -> Path:
        return self.root / "best.json"

    def checkpoint_path(self, batch_index: int) -> Path:
        return self.root / "checkpoints" / f"batch_{batch_index}.json"

    def write_batch_checkpoint(self, state: model.WorkflowState, batch_index: int) -> Path:
        path = self.checkpoint_path(batch_index)
        write_checkpoint(state, path)
        return path

    def promote_best(self, batch_index: int) -> None:
        # Byte copy keeps best.json hash-equal to the source checkpoint.
        data = self.checkpoint_path(batch_index).read_bytes()
        self.best_path.write_bytes(data)

    def append_record_line(self, line: str) -> None:
        with open(self.records_path, "a", encoding="utf-8") as f:
            f.write(line + "\n")

    def write_trace(self, batch_index: int, trace: model.ExecutionTrace) -> None:
        tdir = self.root / "traces" / f"batch_{batch_index}"
        tdir.mkdir(parents=True, exist_ok=True)
        path = tdir / f"{trace.sample_id}.json"
        path.write_text(model.canonical_json(model.trace_to_json_obj(trace)), encoding="utf-8")

    def write_config(self, obj: dict) -> None:
        (self.root / "config.json").write_text(model.canonical_json(obj), encoding="utf-8")
