"""Command-line front door: train, eval, curve, inspect, replay.

Exit codes are a stable contract for scripts: 0 success, 2 usage or
configuration errors, 3 runtime failures. Machine output is JSON lines on
stdout (or CSV for `curve`); errors go to stderr as one JSON line.
"""

from __future__ import annotations

import json
import shutil
import sys
import tempfile
from pathlib import Path

import click

from .config import ConfigError, build_runtime, load_config, train_config
from .evaluation import DatasetError, get_metric, load_dataset, metric_info
from .model import InvalidStateError, SchemaVersionMismatch
from .optimizer import BootstrapFailed, bootstrap_workflow
from .store import RunDirectory, load_checkpoint, micro_to_usd_str
from .trainer import evaluate, make_batches, train

USAGE_EXIT = 2
RUNTIME_EXIT = 3


def _fail(code: int, message: str) -> None:
    print(json.dumps({"error": message}), file=sys.stderr)
    sys.exit(code)


@click.group()
def main() -> None:
    """Workflow induction and optimization runs."""


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(), help="Run config JSON.")
@click.option("--run-dir", required=True, type=click.Path(), help="Output run directory.")
@click.option("--mode", default=None, help="Override the config's optimization mode.")
@click.option("--seed", default=None, type=int, help="Override the config's seed.")
@click.option("--epochs", default=None, type=int, help="Override the config's epoch count.")
@click.option("--init-checkpoint", default=None, type=click.Path(),
              help="Start from this checkpoint instead of bootstrapping.")
def cmd_train(config_path, run_dir, mode, seed, epochs, init_checkpoint) -> None:
    """Bootstrap (unless a checkpoint is given) and run the training schedule."""
    try:
        cfg = load_config(config_path)
        if mode is not None:
            cfg.mode = mode
        if seed is not None:
            cfg.seed = seed
        if epochs is not None:
            cfg.schedule = {**cfg.schedule, "epochs": epochs}
        tcfg = train_config(cfg)
        train_path = cfg.resolve(cfg.datasets.get("train"))
        val_path = cfg.resolve(cfg.datasets.get("val"))
        if train_path is None or not train_path.exists():
            raise ConfigError(f"train dataset missing: {train_path}")
        if val_path is None or not val_path.exists():
            raise ConfigError(f"val dataset missing: {val_path}")
        train_set = load_dataset(train_path)
        val_set = load_dataset(val_path)
        get_metric(cfg.metric)
    except (ConfigError, DatasetError, KeyError, ValueError) as e:
        _fail(USAGE_EXIT, str(e))

    if (Path(run_dir) / "records.jsonl").exists() or (Path(run_dir) / "ledger.jsonl").exists():
        _fail(USAGE_EXIT, f"run directory {run_dir} already holds a run; "
                          f"records and ledgers are append-only")
    directory = RunDirectory(run_dir)
    directory.write_config(cfg.resolved_json_obj())
    try:
        rt = build_runtime(cfg, ledger_sink=directory.ledger_path)
    except ConfigError as e:
        _fail(USAGE_EXIT, str(e))

    try:
        if init_checkpoint is not None:
            state0 = load_checkpoint(init_checkpoint)
        else:
            first_batch = make_batches(train_set, tcfg)[0]
            state0 = bootstrap_workflow(rt, first_batch, get_metric(cfg.metric),
                                        metric_info(cfg.metric))
        result = train(rt, tcfg, train_set, val_set, state0, cfg.metric, run_dir=directory)
    except (SchemaVersionMismatch, InvalidStateError) as e:
        _fail(USAGE_EXIT, f"invalid checkpoint: {e}")
    except BootstrapFailed as e:
        _fail(RUNTIME_EXIT, f"bootstrap failed: {e}")
    except Exception as e:  # noqa: BLE001 - surface anything else as runtime failure
        _fail(RUNTIME_EXIT, str(e))

    rt.client.ledger.close()
    print(json.dumps({
        "best_val_score": result.best_val_score,
        "best_batch_index": result.best_batch_index,
        "batches": len(result.records),
        "api_calls": rt.client.ledger.call_count,
        "cost_usd": float(micro_to_usd_str(rt.client.ledger.total_cost_micro)),
        "halted_early": result.halted_early,
    }))


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--metric", "metric_name", required=True)
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="Run config (for the backend, tools, and model settings).")
def cmd_eval(checkpoint, dataset_path, metric_name, config_path) -> None:
    """Run a checkpoint over a dataset and print {metric, mean, n}."""
    try:
        cfg = load_config(config_path)
        get_metric(metric_name)
        state = load_checkpoint(checkpoint)
        samples = load_dataset(Path(dataset_path))
        if not samples:
            raise DatasetError(f"dataset is empty: {dataset_path}")
        rt = build_runtime(cfg)
    except (ConfigError, DatasetError, SchemaVersionMismatch, InvalidStateError,
            KeyError, FileNotFoundError) as e:
        _fail(USAGE_EXIT, str(e))
    try:
        summary = evaluate(rt, state, samples, metric_name)
    except Exception as e:  # noqa: BLE001
        _fail(RUNTIME_EXIT, str(e))
    print(json.dumps({"metric": metric_name, "mean": summary.mean_score, "n": len(samples)}))


@main.command("curve")
@click.option("--run-dir", required=True, type=click.Path())
def cmd_curve(run_dir) -> None:
    """Emit the validation curve as CSV with a running best column."""
    records_path = Path(run_dir) / "records.jsonl"
    if not records_path.exists():
        _fail(USAGE_EXIT, f"records file missing: {records_path}")
    print("batch_index,val_score,best_so_far,calls,cost")
    best = None
    with open(records_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            score = float(row["val_score"])
            best = score if best is None else max(best, score)
            print(f'{row["batch_index"]},{score},{best},{row["api_calls_so_far"]},'
                  f'{row["cost_so_far_usd"]:.6f}')


@main.command("inspect")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--prompt-chars", default=60, show_default=True,
              help="Prompt excerpt length per row.")
def cmd_inspect(checkpoint, prompt_chars) -> None:
    """Render a checkpoint's sketch as a table; tool steps carry a (T) marker."""
    try:
        state = load_checkpoint(checkpoint)
    except (FileNotFoundError, SchemaVersionMismatch, InvalidStateError,
            json.JSONDecodeError, KeyError) as e:
        _fail(USAGE_EXIT, f"invalid checkpoint: {e}")
    print(f"revision {state.revision}, {len(state.sketch)} steps")
    print("step | description | executor | tools | prompt")
    for step in state.sketch:
        exe = state.executors[step.executor_name]
        marker = " (T)" if step.tool_names else ""
        tools = ",".join(step.tool_names) if step.tool_names else "-"
        excerpt = exe.prompt[:prompt_chars].replace("\n", " ")
        print(f"{step.step_id}{marker} | {step.description} | {step.executor_name} "
              f"(v{exe.version}) | {tools} | {excerpt}")


REPLAY_FILES = ("records.jsonl", "ledger.jsonl", "best.json")


@main.command("replay")
@click.option("--run-dir", required=True, type=click.Path(),
              help="A completed run directory holding config.json and outputs.")
@click.option("--out", "out_dir", default=None, type=click.Path(),
              help="Where to rerun (default: a temporary directory).")
def cmd_replay(run_dir, out_dir) -> None:
    """Re-run a recorded run and assert its outputs are byte-identical."""
    run_path = Path(run_dir)
    config_path = run_path / "config.json"
    if not config_path.exists():
        _fail(USAGE_EXIT, f"no config.json in {run_dir}")
    for name in REPLAY_FILES:
        if not (run_path / name).exists():
            _fail(USAGE_EXIT, f"run directory incomplete: missing {name}")

    try:
        cfg = load_config(config_path)
    except ConfigError as e:
        _fail(USAGE_EXIT, str(e))
    replay_store = None
    record_path = cfg.resolve(cfg.backend.get("record_path"))
    if record_path is not None and record_path.exists():
        replay_store = record_path
        cfg.backend = {k: v for k, v in cfg.backend.items() if k != "record_path"}
    elif cfg.backend.get("kind") == "http":
        _fail(USAGE_EXIT, "run was neither recorded nor deterministic; cannot replay")

    target = Path(out_dir) if out_dir else Path(tempfile.mkdtemp(prefix="flowtune-replay-"))
    cleanup = out_dir is None
    try:
        directory = RunDirectory(target)
        directory.write_config(cfg.resolved_json_obj())
        rt = build_runtime(cfg, ledger_sink=directory.ledger_path, replay_override=replay_store)
        tcfg = train_config(cfg)
        train_set = load_dataset(cfg.resolve(cfg.datasets["train"]))
        val_set = load_dataset(cfg.resolve(cfg.datasets["val"]))
        first_batch = make_batches(train_set, tcfg)[0]
        state0 = bootstrap_workflow(rt, first_batch, get_metric(cfg.metric),
                                    metric_info(cfg.metric))
        train(rt, tcfg, train_set, val_set, state0, cfg.metric, run_dir=directory)
        rt.client.ledger.close()

        mismatches = []
        for name in REPLAY_FILES:
            if (run_path / name).read_bytes() != (target / name).read_bytes():
                mismatches.append(name)
        print(json.dumps({"identical": not mismatches, "mismatched_files": mismatches}))
        if mismatches:
            sys.exit(RUNTIME_EXIT)
    except Exception as e:  # noqa: BLE001
        _fail(RUNTIME_EXIT, str(e))
    finally:
        if cleanup:
            shutil.rmtree(target, ignore_errors=True)


if __name__ == "__main__":
    main()
