"""Online-learning data stream: retention schedule and synthetic corpus.

Speaker rosters follow an exponential retention decay: of the S_j speakers
introduced in batch j, floor(S_j / 2^(i-j)) are still present in batch i.
Utterances are synthetic frame sequences: each token has a fixed class-mean
vector, each speaker adds a per-speaker offset whose cohort mean drifts
linearly along a fixed direction, and i.i.d. Gaussian noise is added per
frame. Dev/test/warmup/probe speakers come from held-out populations that
never overlap the training rosters.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError

_FRAMES_MAGIC = b"DLFB"
_FRAMES_VERSION = 1
# class-mean coordinate magnitude; see corpus_geometry for the calibration
_MEAN_MAGNITUDE = 0.6
_MANIFEST_FORMAT = "driftlearn-stream"
_MANIFEST_VERSION = 1

# seed-tree tags: (root_seed, phase, split, ...indices)
_PH_GEOMETRY = 0
_PH_ROSTER = 1
_PH_SPEAKER = 2
_PH_UTTERANCE = 3
_SPLIT_TRAIN = 1
_SPLIT_DEV = 2
_SPLIT_TEST = 3
_SPLIT_WARMUP = 4
_SPLIT_PROBE = 5

# frame-count bounds, the duration-filter analogue baked into Utterance
MIN_FRAMES = 5
MAX_FRAMES = 60


def _child(root_seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=[int(root_seed), *(int(p) for p in path)])


@dataclass(frozen=True)
class ScheduleSpec:
    """New-speaker counts per batch; the whole retention schedule derives from it."""

    new_speakers: tuple[int, ...]

    def __post_init__(self) -> None:
        counts = tuple(int(s) for s in self.new_speakers)
        if not counts:
            raise ConfigurationError("schedule needs at least one batch")
        if any(s < 1 for s in counts):
            raise ConfigurationError(f"all new-speaker counts must be >= 1, got {counts}")
        object.__setattr__(self, "new_speakers", counts)

    @property
    def num_batches(self) -> int:
        return len(self.new_speakers)


def retention(spec: ScheduleSpec, i: int, j: int) -> int:
    """Count of batch-j newcomers still present in batch i: floor(S_j / 2^(i-j))."""
    if not 1 <= j < i <= spec.num_batches:
        raise DataError(
            f"retention needs 1 <= j < i <= {spec.num_batches}, got i={i}, j={j}"
        )
    return spec.new_speakers[j - 1] >> (i - j)


def schedule_totals(spec: ScheduleSpec) -> list[int]:
    """Roster size per batch: retained counts from all earlier cohorts plus newcomers."""
    totals = []
    for i in range(1, spec.num_batches + 1):
        retained = sum(retention(spec, i, j) for j in range(1, i))
        totals.append(retained + spec.new_speakers[i - 1])
    return totals


# The bundled 10-batch schedule ships with the speaker totals it was
# published with; those totals disagree with the retention formula for
# batches 5-10 and the loader warns rather than reconciling silently.
PRESETS: dict[str, dict] = {
    "classic10": {
        "new_speakers": (56, 28, 28, 28, 28, 30, 31, 33, 31, 39),
        "published_totals": (56, 56, 56, 56, 56, 58, 59, 61, 59, 67),
    }
}


def load_preset(name: str) -> ScheduleSpec:
    """Bundled schedule by name; warns where published totals defy the formula."""
    if name not in PRESETS:
        raise ConfigurationError(
            f"unknown schedule preset {name!r}; available: {sorted(PRESETS)}"
        )
    entry = PRESETS[name]
    spec = ScheduleSpec(new_speakers=entry["new_speakers"])
    published = entry.get("published_totals")
    if published is not None:
        computed = schedule_totals(spec)
        mismatched = [
            (i + 1, computed[i], published[i])
            for i in range(len(published))
            if computed[i] != published[i]
        ]
        if mismatched:
            detail = ", ".join(
                f"batch {b}: formula {c} vs published {p}" for b, c, p in mismatched
            )
            warnings.warn(
                f"preset {name!r}: published speaker totals differ from the "
                f"retention formula ({detail}); the generator follows the formula",
                UserWarning,
                stacklevel=2,
            )
    return spec


@dataclass(frozen=True)
class GenConfig:
    """Synthetic-corpus shape: feature geometry, noise levels, split sizes."""

    input_dim: int = 16
    vocab_size: int = 32
    sigma_speaker: float = 0.5
    sigma_noise: float = 0.8
    drift_rate: float = 0.25
    utterances_per_batch: int = 600
    dev_utterances: int = 300
    test_utterances: int = 300
    warmup_utterances: int = 3000
    probe_utterances: int = 300
    dev_speakers: int = 30
    test_speakers: int = 30
    warmup_speakers: int = 100
    probe_speakers: int = 30
    min_frames: int = MIN_FRAMES
    max_frames: int = MAX_FRAMES
    corrupt_batches: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        for name in (
            "input_dim",
            "vocab_size",
            "utterances_per_batch",
            "dev_utterances",
            "test_utterances",
            "warmup_utterances",
            "probe_utterances",
            "dev_speakers",
            "test_speakers",
            "warmup_speakers",
            "probe_speakers",
        ):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("sigma_speaker", "sigma_noise", "drift_rate"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if not MIN_FRAMES <= self.min_frames <= self.max_frames <= MAX_FRAMES:
            raise ConfigurationError(
                f"frame bounds must satisfy {MIN_FRAMES} <= min <= max <= {MAX_FRAMES}, "
                f"got [{self.min_frames}, {self.max_frames}]"
            )
        object.__setattr__(
            self, "corrupt_batches", tuple(int(b) for b in self.corrupt_batches)
        )


@dataclass(frozen=True)
class CorpusGeometry:
    """Fixed per-corpus feature geometry: class means and drift direction."""

    class_means: np.ndarray
    drift_direction: np.ndarray

    def __post_init__(self) -> None:
        means = np.asarray(self.class_means, dtype=np.float64)
        direction = np.asarray(self.drift_direction, dtype=np.float64)
        if means.ndim != 2 or direction.ndim != 1 or means.shape[1] != direction.shape[0]:
            raise DataError("geometry arrays have inconsistent shapes")
        means = means.copy()
        means.setflags(write=False)
        direction = direction.copy()
        direction.setflags(write=False)
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "drift_direction", direction)


def corpus_geometry(gen: GenConfig, seed: int) -> CorpusGeometry:
    """Distinct random sign-pattern class means and a unit drift direction.

    Means are drawn coordinate-wise from {-m, +m} and rejected on collision,
    so every pair is separated by at least 2m. The magnitude m sets class
    separation against the fixed noise scale: unit-norm means would leave
    the task noise-dominated (near-chance frame accuracy however long the
    classifier trains), while the sign-pattern lattice at m=0.6 puts frame
    WER in a regime where population drift measurably degrades a
    non-regularized learner.
    """
    if gen.vocab_size > 2 ** gen.input_dim:
        raise ConfigurationError(
            f"vocab_size {gen.vocab_size} exceeds the {2 ** gen.input_dim} distinct "
            f"sign patterns available in {gen.input_dim} dimensions"
        )
    rng = np.random.default_rng(_child(seed, _PH_GEOMETRY))
    seen: set[bytes] = set()
    means: list[np.ndarray] = []
    while len(means) < gen.vocab_size:
        pattern = rng.integers(0, 2, size=gen.input_dim) * 2 - 1
        key = pattern.tobytes()
        if key not in seen:
            seen.add(key)
            means.append(pattern.astype(np.float64) * _MEAN_MAGNITUDE)
    direction = rng.normal(size=gen.input_dim)
    direction /= np.linalg.norm(direction)
    return CorpusGeometry(class_means=np.array(means), drift_direction=direction)


@dataclass(frozen=True)
class SpeakerProfile:
    """One synthetic speaker: additive feature offset, cohort of first appearance."""

    id: str
    cohort: int
    offset: np.ndarray
    drift_scale: float

    def __post_init__(self) -> None:
        offset = np.asarray(self.offset, dtype=np.float64)
        if not np.isfinite(offset).all():
            raise DataError(f"speaker {self.id!r} has a non-finite offset")
        offset = offset.copy()
        offset.setflags(write=False)
        object.__setattr__(self, "offset", offset)


def synth_speaker(
    speaker_id: str,
    cohort: int,
    gen: GenConfig,
    geometry: CorpusGeometry,
    seed,
) -> SpeakerProfile:
    """Speaker offset ~ Normal(drift_rate * cohort * direction, sigma_speaker^2 I)."""
    rng = np.random.default_rng(seed)
    drift_scale = gen.drift_rate * cohort
    mean = drift_scale * geometry.drift_direction
    offset = mean + gen.sigma_speaker * rng.normal(size=gen.input_dim)
    return SpeakerProfile(id=speaker_id, cohort=cohort, offset=offset, drift_scale=drift_scale)


@dataclass(frozen=True)
class Utterance:
    """Feature frames with the per-frame reference token sequence."""

    id: str
    speaker: str
    frames: np.ndarray
    reference: np.ndarray
    corrupted: bool = False

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        reference = np.asarray(self.reference, dtype=np.int64)
        if frames.ndim != 2 or reference.ndim != 1:
            raise DataError(f"utterance {self.id!r} has malformed arrays")
        if frames.shape[0] != reference.shape[0]:
            raise DataError(f"utterance {self.id!r}: frames and reference lengths differ")
        if not MIN_FRAMES <= frames.shape[0] <= MAX_FRAMES:
            raise DataError(
                f"utterance {self.id!r}: {frames.shape[0]} frames outside "
                f"[{MIN_FRAMES}, {MAX_FRAMES}]"
            )
        if reference.size and int(reference.min()) < 0:
            raise DataError(f"utterance {self.id!r} has negative token ids")
        frames = frames.copy()
        frames.setflags(write=False)
        reference = reference.copy()
        reference.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "reference", reference)

    @property
    def duration_frames(self) -> int:
        return int(self.frames.shape[0])


def synth_utterance(
    utterance_id: str,
    profile: SpeakerProfile,
    gen: GenConfig,
    geometry: CorpusGeometry,
    seed,
    corrupted: bool = False,
) -> Utterance:
    """Frames = class_mean[token] + speaker offset + Gaussian noise per dimension.

    A corrupted utterance draws its frame features from freshly drawn tokens
    while keeping the labeled reference, decorrelating features from labels.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(gen.min_frames, gen.max_frames + 1))
    reference = rng.integers(0, gen.vocab_size, size=n)
    feature_tokens = rng.integers(0, gen.vocab_size, size=n) if corrupted else reference
    noise = rng.normal(scale=gen.sigma_noise, size=(n, gen.input_dim))
    frames = geometry.class_means[feature_tokens] + profile.offset + noise
    return Utterance(
        id=utterance_id,
        speaker=profile.id,
        frames=frames,
        reference=reference,
        corrupted=corrupted,
    )


@dataclass(frozen=True)
class Roster:
    """Speakers present in one batch: retained per earlier cohort plus newcomers."""

    batch_index: int
    members: tuple[str, ...]
    retained_counts: tuple[int, ...]
    new_count: int
    total: int

    def __post_init__(self) -> None:
        if len(set(self.members)) != len(self.members):
            raise DataError(f"roster {self.batch_index} has duplicate members")
        if self.total != len(self.members):
            raise DataError(f"roster {self.batch_index}: total does not match members")
        if self.total != sum(self.retained_counts) + self.new_count:
            raise DataError(
                f"roster {self.batch_index}: retained + new does not match total"
            )


def _cohort_member_ids(cohort: int, count: int) -> list[str]:
    return [f"c{cohort:02d}_{k:03d}" for k in range(count)]


def build_rosters(spec: ScheduleSpec, seed: int) -> list[Roster]:
    """Roster per batch: seeded uniform retention draws from each earlier cohort."""
    rosters = []
    for i in range(1, spec.num_batches + 1):
        members: list[str] = []
        retained_counts = []
        for j in range(1, i):
            r_ij = retention(spec, i, j)
            retained_counts.append(r_ij)
            if r_ij:
                cohort = _cohort_member_ids(j, spec.new_speakers[j - 1])
                rng = np.random.default_rng(_child(seed, _PH_ROSTER, i, j))
                picks = np.sort(rng.choice(len(cohort), size=r_ij, replace=False))
                members.extend(cohort[p] for p in picks)
        new = _cohort_member_ids(i, spec.new_speakers[i - 1])
        members.extend(new)
        rosters.append(
            Roster(
                batch_index=i,
                members=tuple(members),
                retained_counts=tuple(retained_counts),
                new_count=len(new),
                total=len(members),
            )
        )
    return rosters


@dataclass(frozen=True)
class StreamBatch:
    roster: Roster
    utterances: tuple[Utterance, ...]


@dataclass(frozen=True)
class CorpusStream:
    """The full generated corpus: training batches plus held-out splits.

    warmup holds drift-free (cohort-0) data for warm-starting, probe holds
    batch-1-cohort data for measuring forgetting; both are speaker-disjoint
    from training, dev, and test, as dev and test are from training and
    each other.
    """

    schedule: ScheduleSpec
    gen: GenConfig
    seed: int
    geometry: CorpusGeometry
    speakers: dict[str, SpeakerProfile] = field(repr=False)
    batches: tuple[StreamBatch, ...] = field(repr=False)
    dev: tuple[Utterance, ...] = field(repr=False)
    test: tuple[Utterance, ...] = field(repr=False)
    warmup: tuple[Utterance, ...] = field(repr=False)
    probe: tuple[Utterance, ...] = field(repr=False)

    def train_speaker_ids(self) -> set[str]:
        ids: set[str] = set()
        for batch in self.batches:
            ids.update(batch.roster.members)
        return ids


def _heldout_speakers(
    prefix: str,
    count: int,
    cohorts: list[int],
    gen: GenConfig,
    geometry: CorpusGeometry,
    seed: int,
    split_tag: int,
) -> list[SpeakerProfile]:
    profiles = []
    for k in range(count):
        profiles.append(
            synth_speaker(
                f"{prefix}_{k:03d}",
                cohorts[k % len(cohorts)],
                gen,
                geometry,
                _child(seed, _PH_SPEAKER, split_tag, k),
            )
        )
    return profiles


def _split_utterances(
    prefix: str,
    count: int,
    profiles: list[SpeakerProfile],
    gen: GenConfig,
    geometry: CorpusGeometry,
    seed: int,
    split_tag: int,
) -> tuple[Utterance, ...]:
    utts = []
    for t in range(count):
        profile = profiles[t % len(profiles)]
        utts.append(
            synth_utterance(
                f"{prefix}_u{t:05d}",
                profile,
                gen,
                geometry,
                _child(seed, _PH_UTTERANCE, split_tag, t),
            )
        )
    return tuple(utts)


def build_stream(spec: ScheduleSpec, gen: GenConfig, seed: int) -> CorpusStream:
    """Generate the whole corpus deterministically from (spec, gen, seed)."""
    bad = [b for b in gen.corrupt_batches if not 1 <= b <= spec.num_batches]
    if bad:
        raise ConfigurationError(f"corrupt_batches outside schedule range: {bad}")
    geometry = corpus_geometry(gen, seed)
    rosters = build_rosters(spec, seed)

    speakers: dict[str, SpeakerProfile] = {}
    for cohort in range(1, spec.num_batches + 1):
        for k, speaker_id in enumerate(
            _cohort_member_ids(cohort, spec.new_speakers[cohort - 1])
        ):
            speakers[speaker_id] = synth_speaker(
                speaker_id,
                cohort,
                gen,
                geometry,
                _child(seed, _PH_SPEAKER, _SPLIT_TRAIN, cohort, k),
            )

    batches = []
    for roster in rosters:
        corrupted = roster.batch_index in gen.corrupt_batches
        utts = []
        for t in range(gen.utterances_per_batch):
            speaker_id = roster.members[t % len(roster.members)]
            utts.append(
                synth_utterance(
                    f"b{roster.batch_index:02d}_u{t:05d}",
                    speakers[speaker_id],
                    gen,
                    geometry,
                    _child(seed, _PH_UTTERANCE, _SPLIT_TRAIN, roster.batch_index, t),
                    corrupted=corrupted,
                )
            )
        batches.append(StreamBatch(roster=roster, utterances=tuple(utts)))

    # held-out cohorts span the full drift range so dev/test reflect it
    span = list(range(1, spec.num_batches + 1))
    dev_profiles = _heldout_speakers(
        "dev", gen.dev_speakers, span, gen, geometry, seed, _SPLIT_DEV
    )
    test_profiles = _heldout_speakers(
        "tst", gen.test_speakers, span, gen, geometry, seed, _SPLIT_TEST
    )
    warmup_profiles = _heldout_speakers(
        "wrm", gen.warmup_speakers, [0], gen, geometry, seed, _SPLIT_WARMUP
    )
    probe_profiles = _heldout_speakers(
        "prb", gen.probe_speakers, [1], gen, geometry, seed, _SPLIT_PROBE
    )
    for profile in dev_profiles + test_profiles + warmup_profiles + probe_profiles:
        speakers[profile.id] = profile

    return CorpusStream(
        schedule=spec,
        gen=gen,
        seed=int(seed),
        geometry=geometry,
        speakers=speakers,
        batches=tuple(batches),
        dev=_split_utterances("dev", gen.dev_utterances, dev_profiles, gen, geometry, seed, _SPLIT_DEV),
        test=_split_utterances("tst", gen.test_utterances, test_profiles, gen, geometry, seed, _SPLIT_TEST),
        warmup=_split_utterances("wrm", gen.warmup_utterances, warmup_profiles, gen, geometry, seed, _SPLIT_WARMUP),
        probe=_split_utterances("prb", gen.probe_utterances, probe_profiles, gen, geometry, seed, _SPLIT_PROBE),
    )


def _utterance_meta(utt: Utterance, frame_start: int) -> dict:
    return {
        "id": utt.id,
        "speaker": utt.speaker,
        "reference": utt.reference.tolist(),
        "frame_start": frame_start,
        "n_frames": utt.duration_frames,
        "corrupted": utt.corrupted,
    }


def save_stream(stream: CorpusStream, out_dir: str | Path) -> Path:
    """Write manifest.json plus a flat binary frame bank; returns the directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ordered: list[Utterance] = []
    for batch in stream.batches:
        ordered.extend(batch.utterances)
    ordered.extend(stream.dev)
    ordered.extend(stream.test)
    ordered.extend(stream.warmup)
    ordered.extend(stream.probe)

    frame_starts = {}
    pos = 0
    for utt in ordered:
        frame_starts[utt.id] = pos
        pos += utt.duration_frames

    def metas(utts):
        return [_utterance_meta(u, frame_starts[u.id]) for u in utts]

    manifest = {
        "format": _MANIFEST_FORMAT,
        "version": _MANIFEST_VERSION,
        "seed": stream.seed,
        "schedule": {"new_speakers": list(stream.schedule.new_speakers)},
        "gen": asdict(stream.gen) | {"corrupt_batches": list(stream.gen.corrupt_batches)},
        "geometry": {
            "class_means": stream.geometry.class_means.tolist(),
            "drift_direction": stream.geometry.drift_direction.tolist(),
        },
        "speakers": [
            {
                "id": p.id,
                "cohort": p.cohort,
                "offset": p.offset.tolist(),
                "drift_scale": p.drift_scale,
            }
            for p in stream.speakers.values()
        ],
        "batches": [
            {
                "batch_index": b.roster.batch_index,
                "members": list(b.roster.members),
                "retained_counts": list(b.roster.retained_counts),
                "new_count": b.roster.new_count,
                "utterances": metas(b.utterances),
            }
            for b in stream.batches
        ],
        "dev": metas(stream.dev),
        "test": metas(stream.test),
        "warmup": metas(stream.warmup),
        "probe": metas(stream.probe),
    }

    total_rows = pos
    cols = stream.gen.input_dim
    with open(out / "frames.bin", "wb") as fh:
        fh.write(struct.pack("<4sIII", _FRAMES_MAGIC, _FRAMES_VERSION, total_rows, cols))
        for utt in ordered:
            fh.write(np.ascontiguousarray(utt.frames).tobytes())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_stream(in_dir: str | Path) -> CorpusStream:
    """Reload a saved stream bit-identically from manifest.json and frames.bin."""
    src = Path(in_dir)
    manifest_path = src / "manifest.json"
    frames_path = src / "frames.bin"
    if not manifest_path.exists() or not frames_path.exists():
        raise DataError(f"no stream at {src}: need manifest.json and frames.bin")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable manifest at {manifest_path}: {exc}") from exc
    if manifest.get("format") != _MANIFEST_FORMAT:
        raise DataError(f"{manifest_path} is not a stream manifest")
    if manifest.get("version") != _MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')}")

    raw = frames_path.read_bytes()
    if len(raw) < 16:
        raise DataError(f"{frames_path} too short for its header")
    magic, version, rows, cols = struct.unpack("<4sIII", raw[:16])
    if magic != _FRAMES_MAGIC:
        raise DataError(f"{frames_path} has wrong magic bytes")
    if version != _FRAMES_VERSION:
        raise DataError(f"unsupported frame-bank version {version}")
    frames = np.frombuffer(raw, dtype="<f8", offset=16)
    if frames.size != rows * cols:
        raise DataError(
            f"{frames_path} holds {frames.size} values, header promises {rows * cols}"
        )
    frames = frames.reshape(rows, cols)

    gen_fields = dict(manifest["gen"])
    gen_fields["corrupt_batches"] = tuple(gen_fields.get("corrupt_batches", ()))
    gen = GenConfig(**gen_fields)
    spec = ScheduleSpec(new_speakers=tuple(manifest["schedule"]["new_speakers"]))
    geometry = CorpusGeometry(
        class_means=np.array(manifest["geometry"]["class_means"]),
        drift_direction=np.array(manifest["geometry"]["drift_direction"]),
    )
    speakers = {
        s["id"]: SpeakerProfile(
            id=s["id"],
            cohort=int(s["cohort"]),
            offset=np.array(s["offset"]),
            drift_scale=float(s["drift_scale"]),
        )
        for s in manifest["speakers"]
    }

    def utt_from(meta: dict) -> Utterance:
        start, n = int(meta["frame_start"]), int(meta["n_frames"])
        return Utterance(
            id=meta["id"],
            speaker=meta["speaker"],
            frames=frames[start : start + n],
            reference=np.array(meta["reference"], dtype=np.int64),
            corrupted=bool(meta.get("corrupted", False)),
        )

    batches = []
    for b in manifest["batches"]:
        roster = Roster(
            batch_index=int(b["batch_index"]),
            members=tuple(b["members"]),
            retained_counts=tuple(int(c) for c in b["retained_counts"]),
            new_count=int(b["new_count"]),
            total=len(b["members"]),
        )
        batches.append(
            StreamBatch(
                roster=roster,
                utterances=tuple(utt_from(m) for m in b["utterances"]),
            )
        )

    return CorpusStream(
        schedule=spec,
        gen=gen,
        seed=int(manifest["seed"]),
        geometry=geometry,
        speakers=speakers,
        batches=tuple(batches),
        dev=tuple(utt_from(m) for m in manifest["dev"]),
        test=tuple(utt_from(m) for m in manifest["test"]),
        warmup=tuple(utt_from(m) for m in manifest["warmup"]),
        probe=tuple(utt_from(m) for m in manifest["probe"]),
    )
