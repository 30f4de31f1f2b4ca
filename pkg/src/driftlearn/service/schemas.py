"""Request/response models for the service API."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorBody(BaseModel):
    kind: str
    message: str


class GenRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: dict
    seed: int | None = None
    out_dir: str


class GenResponse(BaseModel):
    out_dir: str
    batches: int
    speaker_totals: list[int]
    train_utterances: int
    heldout_utterances: dict[str, int]
    warnings: list[str]


class RunRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict
    seed: int | None = None
    run_dir: str | None = None


class GridRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict
    out_dir: str | None = None


class JobSubmitted(BaseModel):
    job_id: str
    kind: str
    state: str


class JobStatus(BaseModel):
    job_id: str
    kind: str
    state: str
    error: ErrorBody | None = None
    result: dict | None = None


class ScoreRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ref_lines: list[str]
    hyp_lines: list[str]


class UtteranceRow(BaseModel):
    line: int
    substitutions: int
    deletions: int
    insertions: int
    ref_tokens: int
    wer: float


class ScoreResponse(BaseModel):
    utterances: int
    substitutions: int
    deletions: int
    insertions: int
    ref_tokens: int
    wer: float
    per_utterance: list[UtteranceRow]


class SnapshotRow(BaseModel):
    batch_index: int
    method: str
    dev_wer: float
    status: str
    created_at: int
    payload_path: str


class SnapshotsResponse(BaseModel):
    run_dir: str
    window: int | None
    records: list[SnapshotRow]


class ReportRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dir: str


class ReportResponse(BaseModel):
    out_dir: str
    files: list[str]
    runs: int
    failures: list[dict]
