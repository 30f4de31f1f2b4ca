"""FastAPI application exposing the engine: generation, runs, grids, scoring."""

from __future__ import annotations

import warnings
from pathlib import Path

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import (
    StreamSource,
    config_from_dict,
    resolve_output_dir,
)
from ..errors import ConfigurationError, DriftlearnError
from ..harness import (
    batch_to_json,
    collect_grid_dir,
    emit_reports,
    run_grid,
    run_sequence,
)
from ..selection import SnapshotStore
from ..stream import GenConfig, ScheduleSpec, build_stream, load_preset, save_stream, schedule_totals
from ..wer import corpus_wer, score_lines
from .jobs import ERROR_KINDS, JobRegistry
from .schemas import (
    GenRequest,
    GenResponse,
    GridRequest,
    HealthResponse,
    JobStatus,
    JobSubmitted,
    ReportRequest,
    ReportResponse,
    RunRequest,
    ScoreRequest,
    ScoreResponse,
    SnapshotsResponse,
)


def _generate_stream(req: GenRequest) -> dict:
    data = dict(req.source)
    if req.seed is not None:
        data["seed"] = req.seed
    try:
        source = StreamSource(**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad stream source: {exc}") from exc
    if source.dir is not None:
        raise ConfigurationError("gen needs a preset or schedule source, not a directory")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        spec = (
            load_preset(source.preset)
            if source.preset is not None
            else ScheduleSpec(new_speakers=tuple(source.schedule))
        )
        gen = GenConfig(**source.gen) if source.gen else GenConfig()
        stream = build_stream(spec, gen, source.seed)
    out = save_stream(stream, req.out_dir)
    return {
        "out_dir": str(out),
        "batches": spec.num_batches,
        "speaker_totals": schedule_totals(spec),
        "train_utterances": sum(len(b.utterances) for b in stream.batches),
        "heldout_utterances": {
            "dev": len(stream.dev),
            "test": len(stream.test),
            "warmup": len(stream.warmup),
            "probe": len(stream.probe),
        },
        "warnings": [str(w.message) for w in caught],
    }


def _run_job(req: RunRequest) -> dict:
    cfg = config_from_dict(req.config)
    seed = req.seed if req.seed is not None else cfg.seeds[0]
    run_dir = (
        Path(req.run_dir)
        if req.run_dir is not None
        else resolve_output_dir(cfg) / f"run_{cfg.method}_{cfg.strategy}_seed{seed}"
    )
    result = run_sequence(cfg, seed=seed, run_dir=run_dir)
    return {
        "method": result.method,
        "strategy": result.strategy,
        "seed": result.seed,
        "config_hash": result.config_hash,
        "run_dir": str(run_dir),
        "batches": [batch_to_json(b) for b in result.batches],
        "aggregates": result.aggregates,
    }


def _grid_job(req: GridRequest) -> dict:
    cfg = config_from_dict(req.config)
    out_dir = Path(req.out_dir) if req.out_dir is not None else resolve_output_dir(cfg)
    outcome = run_grid(cfg, out_dir=out_dir)
    return {
        "out_dir": str(out_dir),
        "completed_runs": len(outcome.runs),
        "failures": list(outcome.failures),
        "run_keys": [
            {"method": r.method, "strategy": r.strategy, "seed": r.seed}
            for r in outcome.runs
        ],
    }


def create_app() -> FastAPI:
    app = FastAPI(title="driftlearn", version=__version__)
    app.state.jobs = JobRegistry()

    @app.exception_handler(DriftlearnError)
    async def on_engine_error(request: Request, exc: DriftlearnError):
        kind = ERROR_KINDS.get(exc.exit_code, "data")
        return JSONResponse(status_code=400, content={"kind": kind, "message": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    async def health():
        return {"status": "ok", "version": __version__}

    @app.post("/streams/generate", response_model=GenResponse)
    async def generate(req: GenRequest):
        return _generate_stream(req)

    @app.post("/runs", response_model=JobSubmitted)
    async def submit_run(req: RunRequest):
        config_from_dict(req.config)  # reject bad configs before queueing
        return app.state.jobs.submit("run", lambda: _run_job(req))

    @app.post("/grids", response_model=JobSubmitted)
    async def submit_grid(req: GridRequest):
        config_from_dict(req.config)
        return app.state.jobs.submit("grid", lambda: _grid_job(req))

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    async def job_status(job_id: str):
        return app.state.jobs.status(job_id)

    @app.post("/score", response_model=ScoreResponse)
    async def score(req: ScoreRequest):
        scores = score_lines(req.ref_lines, req.hyp_lines)
        counts = [s.counts for s in scores]
        return {
            "utterances": len(scores),
            "substitutions": sum(c.substitutions for c in counts),
            "deletions": sum(c.deletions for c in counts),
            "insertions": sum(c.insertions for c in counts),
            "ref_tokens": sum(c.ref_len for c in counts),
            "wer": corpus_wer(scores),
            "per_utterance": [
                {
                    "line": i,
                    "substitutions": c.substitutions,
                    "deletions": c.deletions,
                    "insertions": c.insertions,
                    "ref_tokens": c.ref_len,
                    "wer": c.wer(),
                }
                for i, c in enumerate(counts, start=1)
            ],
        }

    @app.get("/snapshots", response_model=SnapshotsResponse)
    async def snapshots(run_dir: str = Query(...)):
        store = SnapshotStore.open(Path(run_dir) / "snapshots")
        return {
            "run_dir": run_dir,
            "window": store.window,
            "records": [
                {
                    "batch_index": r.batch_index,
                    "method": r.method,
                    "dev_wer": r.dev_wer,
                    "status": r.status,
                    "created_at": r.created_at,
                    "payload_path": r.payload_path,
                }
                for r in store.records
            ],
        }

    @app.post("/reports", response_model=ReportResponse)
    async def report(req: ReportRequest):
        runs, failures = collect_grid_dir(req.dir)
        files = emit_reports(runs, req.dir, failures=failures)
        return {
            "out_dir": req.dir,
            "files": [str(f) for f in files],
            "runs": len(runs),
            "failures": failures,
        }

    return app


app = create_app()
