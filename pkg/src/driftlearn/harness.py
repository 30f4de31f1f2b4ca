"""Experiment driver: per-batch training, the method x strategy grid, reports.

A run walks the stream batch by batch. Each batch starts from the snapshot
the strategy selects, trains a few epochs of minibatch SGD with the active
regularizer, keeps the epoch with the best dev WER, updates the method's
importance state, records a snapshot, and evaluates on the held-out sets.
(config, seed) pins every reported number; wall time is reported only in
the machine-readable results file so tables stay byte-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import (
    RunConfig,
    combine_seeds,
    config_hash,
    config_to_dict,
    resolve_output_dir,
    resolve_stream,
)
from .errors import DataError, DriftlearnError, NumericalError
from .mlp import FrameBatch, MlpConfig, Network, init_network, loss_and_grad, predict_tokens, sgd_step
from .regularizers import (
    METHODS,
    EwcState,
    SiState,
    ewc_refresh,
    regularized_loss_and_grad,
    si_accumulate,
    si_begin_task,
    si_consolidate,
    si_init,
)
from .selection import STRATEGIES, SnapshotStore, window_for
from .stream import CorpusStream, Utterance
from .wer import CiReport, UtteranceScore, bootstrap_ci, corpus_wer, score_pair

_ROLE_INIT = 0
_ROLE_SHUFFLE = 1
_ROLE_FISHER = 2
_ROLE_BOOTSTRAP = 3

_RUN_FORMAT = "driftlearn-run"
_RUN_VERSION = 1


@dataclass(frozen=True)
class BatchResult:
    """Outcome of one stream batch: the trained model's scores and lineage."""

    batch_index: int
    dev_wer: float
    test_wer: float
    test_ci: CiReport
    selected_from_batch: int
    epoch_chosen: int
    wall_time: float
    probe_wer: float


@dataclass(frozen=True)
class RunResult:
    """One (method, strategy, seed) cell: per-batch results plus aggregates."""

    method: str
    strategy: str
    seed: int
    config_hash: str
    batches: tuple[BatchResult, ...]
    aggregates: dict


@dataclass(frozen=True)
class GridResult:
    runs: tuple[RunResult, ...]
    failures: tuple[dict, ...]


# -- evaluation helpers ---------------------------------------------------


def transcribe(net: Network, utterances: Sequence[Utterance]) -> list[UtteranceScore]:
    return [
        score_pair(u.id, u.reference, predict_tokens(net, u.frames)) for u in utterances
    ]


def split_wer(net: Network, utterances: Sequence[Utterance]) -> float:
    return corpus_wer(transcribe(net, utterances))


def frames_of(utterances: Sequence[Utterance]) -> FrameBatch:
    if not utterances:
        raise DataError("cannot build a frame batch from zero utterances")
    features = np.concatenate([u.frames for u in utterances], axis=0)
    labels = np.concatenate([u.reference for u in utterances])
    return FrameBatch(features=features, labels=labels)


# -- training -------------------------------------------------------------


def train_one_batch(
    net: Network,
    reg_state: EwcState | SiState | None,
    utterances: Sequence[Utterance],
    dev_utterances: Sequence[Utterance],
    cfg: RunConfig,
    run_seed: int,
    batch_index: int,
) -> tuple[Network, EwcState | SiState | None, int, float]:
    """Train epochs on one batch, return the epoch-best model and new state.

    SI path contributions accumulate over every step of every epoch;
    consolidation happens once at batch end against the epoch-best
    parameters. EWC recomputes its anchor and importance at batch end from
    the epoch-best model and this batch's data. Ties on dev WER keep the
    earliest epoch.
    """
    utterances = list(utterances)
    if not utterances:
        raise DataError(f"batch {batch_index} has no utterances")
    state = reg_state
    si_active = isinstance(state, SiState)
    if si_active:
        state = si_begin_task(state, net.params)

    best_net, best_wer, best_epoch = None, np.inf, 0
    for epoch in range(1, cfg.epochs_per_batch + 1):
        rng = np.random.default_rng(
            combine_seeds(run_seed, _ROLE_SHUFFLE, batch_index, epoch)
        )
        order = rng.permutation(len(utterances))
        for lo in range(0, len(order), cfg.minibatch_utterances):
            picked = [utterances[k] for k in order[lo : lo + cfg.minibatch_utterances]]
            minibatch = frames_of(picked)
            step_method = cfg.method if state is not None else "none"
            try:
                _, grad = regularized_loss_and_grad(net, minibatch, step_method, state)
                stepped, delta = sgd_step(net, grad, cfg.learning_rate)
            except NumericalError as exc:
                raise NumericalError(
                    f"batch {batch_index}, epoch {epoch}: {exc}"
                ) from exc
            if si_active:
                # the credited gradient is the task-only one at pre-step params;
                # with a live penalty that means one extra plain backprop
                task_grad = grad if state.strength == 0.0 else loss_and_grad(net, minibatch)[1]
                state = si_accumulate(state, task_grad, delta)
            net = stepped
        epoch_wer = split_wer(net, dev_utterances)
        if epoch_wer < best_wer:
            best_net, best_wer, best_epoch = net, epoch_wer, epoch

    if si_active:
        state = si_consolidate(state, best_net.params)
    elif cfg.method == "ewc":
        data = frames_of(utterances)
        fisher_cfg = replace(
            cfg.fisher,
            n_samples=min(cfg.fisher.n_samples, data.n_frames),
            seed=combine_seeds(cfg.fisher.seed, run_seed, _ROLE_FISHER, batch_index),
        )
        state = ewc_refresh(best_net, data, fisher_cfg, cfg.reg_strength)
    return best_net, state, best_epoch, float(best_wer)


def warm_start(cfg: RunConfig, stream: CorpusStream, run_seed: int) -> Network:
    """Pretrain on the drift-free warmup split; batch 1 adapts from here."""
    layer_sizes = (stream.gen.input_dim, *cfg.hidden_sizes, stream.gen.vocab_size)
    net = init_network(
        MlpConfig(
            layer_sizes=layer_sizes,
            activation=cfg.activation,
            seed=combine_seeds(run_seed, _ROLE_INIT),
        )
    )
    if cfg.warmup_epochs == 0:
        return net
    warm_cfg = replace(cfg, method="none", epochs_per_batch=cfg.warmup_epochs)
    net, _, _, _ = train_one_batch(
        net, None, stream.warmup, stream.dev, warm_cfg, run_seed, batch_index=0
    )
    return net


# -- run persistence ------------------------------------------------------


def _ci_to_json(ci: CiReport) -> dict:
    return {
        "point_wer": ci.point_wer,
        "lo": ci.lo,
        "hi": ci.hi,
        "level": ci.level,
        "resamples": ci.resamples,
        "seed": ci.seed,
    }


def _ci_from_json(data: dict) -> CiReport:
    return CiReport(
        point_wer=data["point_wer"],
        lo=data["lo"],
        hi=data["hi"],
        level=data["level"],
        resamples=data["resamples"],
        seed=data["seed"],
    )


def batch_to_json(b: BatchResult) -> dict:
    return {
        "batch_index": b.batch_index,
        "dev_wer": b.dev_wer,
        "test_wer": b.test_wer,
        "test_ci": _ci_to_json(b.test_ci),
        "selected_from_batch": b.selected_from_batch,
        "epoch_chosen": b.epoch_chosen,
        "wall_time": b.wall_time,
        "probe_wer": b.probe_wer,
    }


def batch_from_json(data: dict) -> BatchResult:
    return BatchResult(
        batch_index=data["batch_index"],
        dev_wer=data["dev_wer"],
        test_wer=data["test_wer"],
        test_ci=_ci_from_json(data["test_ci"]),
        selected_from_batch=data["selected_from_batch"],
        epoch_chosen=data["epoch_chosen"],
        wall_time=data["wall_time"],
        probe_wer=data["probe_wer"],
    )


def _aggregates_of(batches: Sequence[BatchResult]) -> dict:
    return {
        "final_dev_wer": batches[-1].dev_wer,
        "final_test_wer": batches[-1].test_wer,
        "mean_dev_wer": float(np.mean([b.dev_wer for b in batches])),
        "mean_test_wer": float(np.mean([b.test_wer for b in batches])),
        "first_probe_wer": batches[0].probe_wer,
        "final_probe_wer": batches[-1].probe_wer,
        "probe_degradation": batches[-1].probe_wer - batches[0].probe_wer,
    }


def _write_run_json(
    run_dir: Path,
    cfg: RunConfig,
    seed: int,
    chash: str,
    batches: Sequence[BatchResult],
    complete: bool,
) -> None:
    doc = {
        "format": _RUN_FORMAT,
        "version": _RUN_VERSION,
        "complete": complete,
        "method": cfg.method,
        "strategy": cfg.strategy,
        "seed": seed,
        "config_hash": chash,
        "config": config_to_dict(cfg),
        "batches": [batch_to_json(b) for b in batches],
        "aggregates": _aggregates_of(batches) if complete else None,
    }
    (run_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_run_result(run_dir: str | Path) -> RunResult:
    path = Path(run_dir) / "run.json"
    if not path.exists():
        raise DataError(f"no run results at {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable run results {path}: {exc}") from exc
    if doc.get("format") != _RUN_FORMAT:
        raise DataError(f"{path} is not a run results file")
    if not doc.get("complete"):
        raise DataError(f"run at {Path(run_dir)} is incomplete (aborted mid-sequence)")
    batches = tuple(batch_from_json(b) for b in doc["batches"])
    return RunResult(
        method=doc["method"],
        strategy=doc["strategy"],
        seed=doc["seed"],
        config_hash=doc["config_hash"],
        batches=batches,
        aggregates=doc["aggregates"],
    )


# -- sequence and grid ----------------------------------------------------


def run_sequence(
    cfg: RunConfig, seed: int | None = None, run_dir: str | Path | None = None
) -> RunResult:
    """Run the full batch sequence for one (method, strategy, seed) cell."""
    seed = cfg.seeds[0] if seed is None else seed
    stream = resolve_stream(cfg, seed)
    batches = stream.batches[: cfg.max_batches] if cfg.max_batches else stream.batches
    if run_dir is None:
        run_dir = resolve_output_dir(cfg) / f"run_{cfg.method}_{cfg.strategy}_seed{seed}"
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    store = SnapshotStore(run_dir / "snapshots", window=window_for(cfg.strategy))

    net = warm_start(cfg, stream, seed)
    state: EwcState | SiState | None = None
    if cfg.method == "si":
        state = si_init(net.params, cfg.reg_strength, cfg.damping)

    results: list[BatchResult] = []
    try:
        for i, stream_batch in enumerate(batches, start=1):
            if i == 1:
                start_net, start_state, source = net, state, 0
            else:
                record = store.select(cfg.strategy)
                start_net, start_state = store.continue_from(record)
                source = record.batch_index
            t0 = time.perf_counter()
            best_net, new_state, epoch_chosen, dev_wer = train_one_batch(
                start_net,
                start_state,
                stream_batch.utterances,
                stream.dev,
                cfg,
                seed,
                batch_index=i,
            )
            wall = time.perf_counter() - t0
            store.record_snapshot(
                best_net, new_state, i, dev_wer, cfg.method, seed=seed, config_hash=chash
            )
            test_scores = transcribe(best_net, stream.test)
            results.append(
                BatchResult(
                    batch_index=i,
                    dev_wer=dev_wer,
                    test_wer=corpus_wer(test_scores),
                    test_ci=bootstrap_ci(
                        test_scores,
                        resamples=cfg.bootstrap_resamples,
                        seed=combine_seeds(seed, _ROLE_BOOTSTRAP, i),
                    ),
                    selected_from_batch=source,
                    epoch_chosen=epoch_chosen,
                    wall_time=wall,
                    probe_wer=split_wer(best_net, stream.probe),
                )
            )
            _write_run_json(run_dir, cfg, seed, chash, results, complete=False)
    except DriftlearnError:
        # keep whatever finished; the partial file is marked incomplete
        _write_run_json(run_dir, cfg, seed, chash, results, complete=False)
        raise
    _write_run_json(run_dir, cfg, seed, chash, results, complete=True)
    return RunResult(
        method=cfg.method,
        strategy=cfg.strategy,
        seed=seed,
        config_hash=chash,
        batches=tuple(results),
        aggregates=_aggregates_of(results),
    )


def run_grid(cfg: RunConfig, out_dir: str | Path | None = None) -> GridResult:
    """Enumerate methods x strategies x seeds; one failed run does not stop the rest."""
    out_dir = Path(out_dir) if out_dir is not None else resolve_output_dir(cfg)
    runs: list[RunResult] = []
    failures: list[dict] = []
    for seed in cfg.seeds:
        for method in METHODS:
            for strategy in STRATEGIES:
                sub = replace(cfg, method=method, strategy=strategy)
                run_dir = out_dir / f"{method}_{strategy}_seed{seed}"
                try:
                    runs.append(run_sequence(sub, seed=seed, run_dir=run_dir))
                except DriftlearnError as exc:
                    failures.append(
                        {
                            "method": method,
                            "strategy": strategy,
                            "seed": seed,
                            "error": type(exc).__name__,
                            "message": str(exc),
                        }
                    )
    if runs:
        emit_reports(runs, out_dir, failures=failures, config=cfg)
    else:
        out_dir.mkdir(parents=True, exist_ok=True)
        doc = {
            "format": "driftlearn-results",
            "version": 1,
            "config": config_to_dict(cfg),
            "runs": [],
            "failures": failures,
            "relative_test_wer_reduction": {},
        }
        (out_dir / "results.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return GridResult(runs=tuple(runs), failures=tuple(failures))


# -- reports --------------------------------------------------------------


def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def _grouped(results: Sequence[RunResult]) -> dict[tuple[str, str], list[RunResult]]:
    groups: dict[tuple[str, str], list[RunResult]] = {}
    for run in results:
        groups.setdefault((run.method, run.strategy), []).append(run)
    return groups


def _batch_count(results: Sequence[RunResult]) -> int:
    counts = {len(run.batches) for run in results}
    if len(counts) != 1:
        raise DataError(f"runs disagree on batch count: {sorted(counts)}")
    return counts.pop()


def _mean_over_seeds(runs: Sequence[RunResult], field: str, batch: int) -> float:
    return float(np.mean([getattr(run.batches[batch], field) for run in runs]))


def emit_reports(
    results: Sequence[RunResult],
    out_dir: str | Path,
    failures: Sequence[dict] = (),
    config: RunConfig | None = None,
) -> list[Path]:
    """Write the results table, machine-readable results, and plot series.

    Tables and plot files carry WER as percentages with fixed formatting
    and no timing, so identical results give byte-identical files.
    """
    if not results:
        raise DataError("no completed runs to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_batches = _batch_count(results)
    groups = _grouped(results)
    method_order = [m for m in METHODS if any(k[0] == m for k in groups)]
    strategy_order = [s for s in STRATEGIES if any(k[1] == s for k in groups)]
    written: list[Path] = []

    header = ["method", "strategy", "set"] + [f"B{i}" for i in range(1, n_batches + 1)]
    lines = [",".join(header)]
    for method in method_order:
        for strategy in strategy_order:
            runs = groups.get((method, strategy))
            if not runs:
                continue
            for split, field in (("dev", "dev_wer"), ("test", "test_wer")):
                cells = [_pct(_mean_over_seeds(runs, field, b)) for b in range(n_batches)]
                lines.append(",".join([method, strategy, split] + cells))
    table_path = out_dir / "results_table.csv"
    table_path.write_text("\n".join(lines) + "\n")
    written.append(table_path)

    for strategy in strategy_order:
        plot_lines = [",".join(["batch", "method", "mean_test_wer", "ci_lo", "ci_hi"])]
        for b in range(n_batches):
            for method in method_order:
                runs = groups.get((method, strategy))
                if not runs:
                    continue
                mean_wer = _mean_over_seeds(runs, "test_wer", b)
                ci_lo = float(np.mean([run.batches[b].test_ci.lo for run in runs]))
                ci_hi = float(np.mean([run.batches[b].test_ci.hi for run in runs]))
                plot_lines.append(
                    ",".join([str(b + 1), method, _pct(mean_wer), _pct(ci_lo), _pct(ci_hi)])
                )
        plot_path = out_dir / f"plot_{strategy}.csv"
        plot_path.write_text("\n".join(plot_lines) + "\n")
        written.append(plot_path)

    reductions: dict[str, dict] = {}
    for strategy in strategy_order:
        base_runs = {run.seed: run for run in groups.get(("none", strategy), [])}
        if not base_runs:
            continue
        per_method = {}
        for method in method_order:
            if method == "none":
                continue
            per_seed = {}
            for run in groups.get((method, strategy), []):
                base = base_runs.get(run.seed)
                if base is None or base.aggregates["final_test_wer"] == 0:
                    continue
                base_wer = base.aggregates["final_test_wer"]
                per_seed[str(run.seed)] = (
                    base_wer - run.aggregates["final_test_wer"]
                ) / base_wer
            if per_seed:
                per_method[method] = {
                    "per_seed": per_seed,
                    "mean": float(np.mean(list(per_seed.values()))),
                }
        if per_method:
            reductions[strategy] = per_method

    results_doc = {
        "format": "driftlearn-results",
        "version": 1,
        "config": config_to_dict(config) if config is not None else None,
        "runs": [
            {
                "method": run.method,
                "strategy": run.strategy,
                "seed": run.seed,
                "config_hash": run.config_hash,
                "batches": [batch_to_json(b) for b in run.batches],
                "aggregates": run.aggregates,
            }
            for run in results
        ],
        "failures": list(failures),
        "relative_test_wer_reduction": reductions,
    }
    results_path = out_dir / "results.json"
    results_path.write_text(json.dumps(results_doc, indent=2, sort_keys=True))
    written.append(results_path)
    return written


def collect_grid_dir(grid_dir: str | Path) -> tuple[list[RunResult], list[dict]]:
    """Gather per-run artifacts under a grid directory for re-reporting."""
    grid_dir = Path(grid_dir)
    if not grid_dir.is_dir():
        raise DataError(f"no such run directory: {grid_dir}")
    runs: list[RunResult] = []
    failures: list[dict] = []
    for run_json in sorted(grid_dir.glob("*/run.json")):
        run_dir = run_json.parent
        try:
            runs.append(load_run_result(run_dir))
        except DataError as exc:
            failures.append({"run_dir": run_dir.name, "error": str(exc)})
    if not runs and (grid_dir / "run.json").exists():
        runs.append(load_run_result(grid_dir))
    return runs, failures
