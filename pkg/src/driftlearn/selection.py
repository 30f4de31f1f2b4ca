"""Snapshot persistence and model-selection strategies.

After each batch the trained model (with its regularizer state) is written
as a checksummed snapshot. A strategy then decides which snapshot seeds the
next batch and is reported:

* ns  — continue the most recent model, dev WER ignored (window of 1);
* rw3 — best dev WER among the three most recent snapshots (window of 3);
* boa — best dev WER over every snapshot so far (unbounded).

Snapshot payloads are deterministic: identical model, state, and metadata
produce byte-identical files. Eviction deletes payload files but keeps the
record trail for inspection.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, StateError
from .mlp import MlpConfig, Network, ParamVector
from .regularizers import EwcState, SiState

STRATEGIES = ("ns", "rw3", "boa")
STRATEGY_LABELS = {"ns": "NS", "rw3": "RW3", "boa": "BoA"}

_SNAPSHOT_FORMAT = "driftlearn-snapshot"
_SNAPSHOT_VERSION = 1
_STORE_FORMAT = "driftlearn-snapshot-store"
_STORE_VERSION = 1


def normalize_strategy(name: str) -> str:
    key = str(name).lower()
    if key not in STRATEGIES:
        raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {name!r}")
    return key


def window_for(strategy: str) -> int | None:
    """Retention capacity implied by a strategy; None means unbounded."""
    return {"ns": 1, "rw3": 3, "boa": None}[normalize_strategy(strategy)]


@dataclass(frozen=True)
class SnapshotRecord:
    """Index entry for one persisted snapshot."""

    batch_index: int
    dev_wer: float
    created_at: int
    payload_path: str
    method: str
    reg_state_included: bool
    status: str = "retained"

    def __post_init__(self):
        if not np.isfinite(self.dev_wer) or self.dev_wer < 0:
            raise ConfigurationError(f"dev_wer must be finite and >= 0, got {self.dev_wer}")
        if self.status not in ("retained", "evicted"):
            raise ConfigurationError(f"unknown snapshot status {self.status!r}")

    def to_json(self) -> dict:
        return {
            "batch_index": self.batch_index,
            "dev_wer": self.dev_wer,
            "created_at": self.created_at,
            "payload_path": self.payload_path,
            "method": self.method,
            "reg_state_included": self.reg_state_included,
            "status": self.status,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SnapshotRecord":
        return cls(
            batch_index=int(data["batch_index"]),
            dev_wer=float(data["dev_wer"]),
            created_at=int(data["created_at"]),
            payload_path=str(data["payload_path"]),
            method=str(data["method"]),
            reg_state_included=bool(data["reg_state_included"]),
            status=str(data["status"]),
        )


def _encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "dtype": "<f8",
        "shape": list(data.shape),
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    arr = np.frombuffer(raw, dtype=entry["dtype"])
    return arr.reshape(entry["shape"]).copy()


def _encode_param_vector(pv: ParamVector) -> dict:
    return {
        "layout": [[name, list(shape)] for name, shape in pv.layout],
        "values": _encode_array(pv.values),
    }


def _decode_param_vector(entry: dict) -> ParamVector:
    layout = tuple((name, tuple(shape)) for name, shape in entry["layout"])
    return ParamVector(values=_decode_array(entry["values"]), layout=layout)


def _encode_reg_state(state: EwcState | SiState | None) -> dict | None:
    if state is None:
        return None
    if isinstance(state, EwcState):
        return {
            "kind": "ewc",
            "strength": state.strength,
            "anchor_params": _encode_param_vector(state.anchor_params),
            "importance": _encode_param_vector(state.importance),
        }
    if isinstance(state, SiState):
        return {
            "kind": "si",
            "strength": state.strength,
            "damping": state.damping,
            "path_contrib": _encode_param_vector(state.path_contrib),
            "importance": _encode_param_vector(state.importance),
            "anchor_params": _encode_param_vector(state.anchor_params),
            "task_start_params": _encode_param_vector(state.task_start_params),
        }
    raise ConfigurationError(f"unknown regularizer state type {type(state).__name__}")


def _decode_reg_state(entry: dict | None) -> EwcState | SiState | None:
    if entry is None:
        return None
    if entry["kind"] == "ewc":
        return EwcState(
            anchor_params=_decode_param_vector(entry["anchor_params"]),
            importance=_decode_param_vector(entry["importance"]),
            strength=float(entry["strength"]),
        )
    if entry["kind"] == "si":
        return SiState(
            path_contrib=_decode_param_vector(entry["path_contrib"]),
            importance=_decode_param_vector(entry["importance"]),
            anchor_params=_decode_param_vector(entry["anchor_params"]),
            task_start_params=_decode_param_vector(entry["task_start_params"]),
            strength=float(entry["strength"]),
            damping=float(entry["damping"]),
        )
    raise DataError(f"unknown regularizer kind {entry['kind']!r} in snapshot")


def _canonical_bytes(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def build_snapshot_bytes(
    net: Network,
    reg_state: EwcState | SiState | None,
    batch_index: int,
    dev_wer: float,
    method: str,
    seed: int | None = None,
    config_hash: str | None = None,
) -> bytes:
    """Serialize a snapshot deterministically; checksum guards the payload."""
    payload = {
        "format": _SNAPSHOT_FORMAT,
        "version": _SNAPSHOT_VERSION,
        "meta": {
            "batch_index": int(batch_index),
            "dev_wer": float(dev_wer),
            "method": str(method),
            "seed": seed,
            "config_hash": config_hash,
        },
        "network": {
            "layer_sizes": list(net.config.layer_sizes),
            "activation": net.config.activation,
            "seed": net.config.seed,
        },
        "params": _encode_param_vector(net.params),
        "reg_state": _encode_reg_state(reg_state),
    }
    checksum = hashlib.sha256(_canonical_bytes(payload)).hexdigest()
    full = dict(payload)
    full["checksum"] = checksum
    return json.dumps(full, sort_keys=True, separators=(",", ":")).encode()


def parse_snapshot_bytes(raw: bytes) -> tuple[Network, EwcState | SiState | None, dict]:
    """Verify and decode a snapshot; returns (network, reg_state, meta)."""
    try:
        full = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable snapshot payload: {exc}") from exc
    if full.get("format") != _SNAPSHOT_FORMAT:
        raise DataError("payload is not a snapshot")
    if full.get("version") != _SNAPSHOT_VERSION:
        raise DataError(f"unsupported snapshot version {full.get('version')}")
    checksum = full.pop("checksum", None)
    if checksum != hashlib.sha256(_canonical_bytes(full)).hexdigest():
        raise DataError("snapshot checksum mismatch: payload corrupt")
    cfg = MlpConfig(
        layer_sizes=tuple(full["network"]["layer_sizes"]),
        activation=full["network"]["activation"],
        seed=full["network"]["seed"],
    )
    net = Network(config=cfg, params=_decode_param_vector(full["params"]))
    return net, _decode_reg_state(full["reg_state"]), full["meta"]


class SnapshotStore:
    """Directory-backed snapshot index with capacity-driven eviction.

    Single-writer: one store object owns its directory. The record list
    keeps evicted entries (payload deleted, status flipped) so the history
    stays inspectable.
    """

    def __init__(self, root: str | Path, window: int | None):
        if window is not None and window < 1:
            raise ConfigurationError(f"window must be >= 1, got {window}")
        self.root = Path(root)
        self.window = window
        self.records: list[SnapshotRecord] = []
        self._counter = 0
        if (self.root / "store.json").exists():
            raise StateError(f"snapshot store already exists at {self.root}; open() it instead")
        self.root.mkdir(parents=True, exist_ok=True)
        self._flush_index()

    # -- persistence ------------------------------------------------------

    @classmethod
    def open(cls, root: str | Path) -> "SnapshotStore":
        root = Path(root)
        index_path = root / "store.json"
        if not index_path.exists():
            raise DataError(f"no snapshot store at {root}")
        try:
            data = json.loads(index_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"unreadable snapshot index at {index_path}: {exc}") from exc
        if data.get("format") != _STORE_FORMAT:
            raise DataError(f"{index_path} is not a snapshot store index")
        store = cls.__new__(cls)
        store.root = root
        store.window = data["window"]
        store.records = [SnapshotRecord.from_json(r) for r in data["records"]]
        store._counter = int(data["counter"])
        return store

    def _flush_index(self) -> None:
        data = {
            "format": _STORE_FORMAT,
            "version": _STORE_VERSION,
            "window": self.window,
            "counter": self._counter,
            "records": [r.to_json() for r in self.records],
        }
        (self.root / "store.json").write_text(json.dumps(data, indent=2, sort_keys=True))

    # -- operations -------------------------------------------------------

    def retained(self) -> list[SnapshotRecord]:
        return [r for r in self.records if r.status == "retained"]

    def record_snapshot(
        self,
        net: Network,
        reg_state: EwcState | SiState | None,
        batch_index: int,
        dev_wer: float,
        method: str,
        seed: int | None = None,
        config_hash: str | None = None,
    ) -> SnapshotRecord:
        if any(r.batch_index == batch_index for r in self.records):
            raise StateError(f"snapshot for batch {batch_index} already recorded")
        payload = build_snapshot_bytes(
            net, reg_state, batch_index, dev_wer, method, seed=seed, config_hash=config_hash
        )
        name = f"batch_{batch_index}.snap"
        try:
            (self.root / name).write_bytes(payload)
        except OSError as exc:
            raise DataError(f"cannot write snapshot {name}: {exc}") from exc
        record = SnapshotRecord(
            batch_index=batch_index,
            dev_wer=float(dev_wer),
            created_at=self._counter,
            payload_path=name,
            method=method,
            reg_state_included=reg_state is not None,
        )
        self._counter += 1
        self.records.append(record)
        self._evict_over_capacity()
        self._flush_index()
        return record

    def _evict_over_capacity(self) -> None:
        if self.window is None:
            return
        retained = self.retained()
        excess = len(retained) - self.window
        for record in sorted(retained, key=lambda r: r.created_at)[:max(excess, 0)]:
            (self.root / record.payload_path).unlink(missing_ok=True)
            idx = self.records.index(record)
            self.records[idx] = replace(record, status="evicted")

    def select(self, strategy: str) -> SnapshotRecord:
        """Pick the snapshot the strategy continues from; ties favor recency."""
        strategy = normalize_strategy(strategy)
        pool = self.retained()
        if not pool:
            raise StateError("cannot select from an empty snapshot store")
        if strategy == "ns":
            return max(pool, key=lambda r: r.batch_index)
        return min(pool, key=lambda r: (r.dev_wer, -r.batch_index))

    def continue_from(self, record: SnapshotRecord) -> tuple[Network, EwcState | SiState | None]:
        path = self.root / record.payload_path
        if not path.exists():
            raise DataError(
                f"snapshot payload for batch {record.batch_index} is missing "
                f"({record.status}): {path}"
            )
        net, reg_state, _ = parse_snapshot_bytes(path.read_bytes())
        return net, reg_state
