"""Cohort files, validation, patient-level splits, batching and the synthetic cohort.

Feature files hold one utterance's frame-level features::

    b"ALSTF1\\0\\0"  u32 LE frame count  u32 LE feature dim  float32 LE payload (frame-major)

The manifest is UTF-8 JSON lines, one :class:`SessionRecord` per line, with
``feature_path`` relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

FEATURE_MAGIC = b"ALSTF1\x00\x00"
_HEADER = struct.Struct("<8sII")
NUM_SCORES = 5
VOWEL_BASES = {"AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW"}


class DataError(ValueError):
    """Malformed or inconsistent cohort data."""


class FormatError(DataError):
    """A feature file does not follow the binary layout."""


class ValidationError(DataError):
    """One or more manifest records failed validation; ``problems`` lists them all."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__(f"{len(self.problems)} invalid record(s):\n  " + "\n  ".join(self.problems))


def is_vowel(phoneme: str) -> bool:
    return phoneme.rstrip("012") in VOWEL_BASES


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_feature_file(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] == 0:
        raise FormatError(f"features must be frames x dim with dim > 0, got {features.shape}")
    payload = np.ascontiguousarray(features, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, features.shape[0], features.shape[1]))
        fh.write(payload)


def read_feature_file(path) -> np.ndarray:
    """Return the stored (frames, dim) float32 matrix."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: header truncated at byte {len(raw)} (need {_HEADER.size})")
    magic, rows, cols = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if cols == 0:
        raise FormatError(f"{path}: feature dim 0 at byte 12")
    expected = rows * cols * 4
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise FormatError(
            f"{path}: payload at byte {_HEADER.size} has {actual} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).astype(np.float32)


def read_feature_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: header truncated at byte {len(head)} (need {_HEADER.size})")
    magic, rows, cols = _HEADER.unpack(head)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    return rows, cols


# ---------------------------------------------------------------------------
# records and manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentSegment:
    phoneme: str
    start_frame: int
    end_frame_exclusive: int


@dataclass(frozen=True)
class SessionRecord:
    patient_id: str
    utterance_id: str
    date_days: int
    score: int
    feature_path: str
    alignment: tuple = ()
    onset_type: Optional[str] = None

    def to_json(self) -> str:
        d = asdict(self)
        d["alignment"] = [asdict(s) for s in self.alignment]
        return json.dumps(d, sort_keys=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "SessionRecord":
        segs = tuple(
            AlignmentSegment(str(s["phoneme"]), int(s["start_frame"]), int(s["end_frame_exclusive"]))
            for s in d.get("alignment", [])
        )
        return cls(
            patient_id=str(d["patient_id"]),
            utterance_id=str(d["utterance_id"]),
            date_days=int(d["date_days"]),
            score=int(d["score"]),
            feature_path=str(d["feature_path"]),
            alignment=segs,
            onset_type=d.get("onset_type"),
        )


@dataclass
class CohortManifest:
    """Records grouped by patient (patients in sorted id order, records by date)."""

    patients: dict
    root: Path = field(default_factory=lambda: Path("."))

    @classmethod
    def from_records(cls, records, root=".") -> "CohortManifest":
        groups: dict = {}
        for rec in records:
            groups.setdefault(rec.patient_id, []).append(rec)
        patients = {
            pid: sorted(groups[pid], key=lambda r: (r.date_days, r.utterance_id)) for pid in sorted(groups)
        }
        return cls(patients=patients, root=Path(root))

    @property
    def records(self) -> list:
        return [r for recs in self.patients.values() for r in recs]

    @property
    def phoneme_vocab(self) -> list:
        return sorted({s.phoneme for r in self.records for s in r.alignment})

    def __len__(self) -> int:
        return sum(len(v) for v in self.patients.values())

    def subset(self, patient_ids) -> "CohortManifest":
        keep = set(patient_ids)
        return CohortManifest({p: list(r) for p, r in self.patients.items() if p in keep}, self.root)

    def feature_file(self, record: SessionRecord) -> Path:
        return self.root / record.feature_path

    def load_features(self, record: SessionRecord) -> np.ndarray:
        return read_feature_file(self.feature_file(record))

    def feature_dim(self) -> int:
        first = self.records[0]
        return read_feature_header(self.feature_file(first))[1]


def write_manifest(manifest: CohortManifest, path) -> None:
    lines = [r.to_json() for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def validate_record(rec: SessionRecord, num_frames: Optional[int]) -> list:
    where = f"patient {rec.patient_id!r} utterance {rec.utterance_id!r}"
    problems = []
    if rec.score not in range(NUM_SCORES):
        problems.append(f"{where}: score {rec.score} outside 0-4")
    if rec.date_days < 0:
        problems.append(f"{where}: negative date_days {rec.date_days}")
    if rec.onset_type not in (None, "bulbar", "limb"):
        problems.append(f"{where}: unknown onset_type {rec.onset_type!r}")
    prev_end = 0
    for i, seg in enumerate(rec.alignment):
        if not 0 <= seg.start_frame < seg.end_frame_exclusive:
            problems.append(f"{where}: segment {i} ({seg.phoneme}) has empty or negative span "
                            f"[{seg.start_frame}, {seg.end_frame_exclusive})")
        elif seg.start_frame < prev_end:
            problems.append(f"{where}: segment {i} ({seg.phoneme}) overlaps or precedes segment {i - 1}")
        if num_frames is not None and seg.end_frame_exclusive > num_frames:
            problems.append(f"{where}: segment {i} ends at frame {seg.end_frame_exclusive} "
                            f"beyond {num_frames} frames")
        prev_end = max(prev_end, seg.end_frame_exclusive)
    return problems


def load_manifest(path, check_features: bool = True, extra_checks=()) -> CohortManifest:
    """Parse and validate a manifest; every failing record is reported at once.

    ``extra_checks`` are callables ``record -> list of problem strings`` for
    project-specific filters.
    """
    path = Path(path)
    root = path.parent
    problems, records, seen = [], [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = SessionRecord.from_dict(json.loads(line))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"line {lineno}: unreadable record ({exc})")
            continue
        key = (rec.patient_id, rec.utterance_id)
        if key in seen:
            problems.append(f"line {lineno}: duplicate patient/utterance {key}")
        seen.add(key)
        num_frames = None
        if check_features:
            fpath = root / rec.feature_path
            if not fpath.is_file():
                problems.append(f"patient {rec.patient_id!r} utterance {rec.utterance_id!r}: "
                                f"dangling feature_path {rec.feature_path!r}")
            else:
                try:
                    num_frames = read_feature_header(fpath)[0]
                except FormatError as exc:
                    problems.append(str(exc))
        problems.extend(validate_record(rec, num_frames))
        for check in extra_checks:
            problems.extend(check(rec))
        records.append(rec)
    if problems:
        raise ValidationError(problems)
    if not records:
        raise ValidationError([f"{path}: no records"])
    return CohortManifest.from_records(records, root)


def split_by_patient(manifest: CohortManifest, test_fraction: float, seed: int):
    """Disjoint (train, test) manifests; whole patients go to one side."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    ids = sorted(manifest.patients)
    if len(ids) < 2:
        raise DataError("need at least 2 patients to split")
    n_test = min(max(int(round(len(ids) * test_fraction)), 1), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    test_ids = {ids[i] for i in order[:n_test]}
    train_ids = [p for p in ids if p not in test_ids]
    return manifest.subset(train_ids), manifest.subset(test_ids)


def batch_patients(manifest: CohortManifest, batch_size: int, seed: int = 0, epoch: int = 0,
                   shuffle: bool = True) -> Iterator[list]:
    """Yield lists of patient ids, ``batch_size`` patients at a time.

    Each patient appears once per epoch. The order is a function of
    ``(seed, epoch)`` only.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    ids = sorted(manifest.patients)
    if shuffle:
        rng = np.random.default_rng([seed, epoch])
        ids = [ids[i] for i in rng.permutation(len(ids))]
    for start in range(0, len(ids), batch_size):
        yield ids[start:start + batch_size]


def mask_frames(features: np.ndarray, keep) -> np.ndarray:
    """Zero every frame outside the ``keep`` ranges ``[(start, end_exclusive), ...]``."""
    features = np.asarray(features)
    n = features.shape[0]
    out = np.zeros_like(features)
    spans = sorted(keep)
    prev = 0
    for start, end in spans:
        if not 0 <= start <= end <= n:
            raise DataError(f"keep range [{start}, {end}) outside 0..{n}")
        if start < prev:
            raise DataError(f"keep ranges overlap at frame {start}")
        out[start:end] = features[start:end]
        prev = end
    return out


# ---------------------------------------------------------------------------
# synthetic cohort
# ---------------------------------------------------------------------------


def load_transcript(path=None) -> tuple[int, list]:
    """Read a transcript config: returns (repeats, list of phoneme slots).

    Each slot is a tuple of alternative phoneme labels.
    """
    if path is None:
        text = resources.files("alst").joinpath("resources/transcript.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    repeats, slots = 1, []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "repeat":
            repeats = int(rest[0])
            continue
        slots.extend(tuple(tok.split("|")) for tok in rest)
    if not slots:
        raise DataError("transcript has no phonemes")
    return repeats, slots


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_patients: int = 100
    sessions_per_patient: tuple = (3, 10)
    mean_gap_days: float = 50.0
    feature_dim: int = 32
    class_separation: float = 1.5
    baseline_score_distribution: tuple = (0.02, 0.05, 0.13, 0.25, 0.55)
    decline_hazard: float = 0.15
    noise_scale: float = 0.5
    # per-patient feature offset, independent of score
    patient_offset_scale: float = 0.2
    # per-patient shift between the rated score and the speech evidence, in score units
    rating_offset_scale: float = 0.0
    # "all" frames carry the score signal, or only "vowels"
    signal_on: str = "all"
    first_visit_days: tuple = (30, 1500)
    bulbar_fraction: float = 0.12
    transcript_path: Optional[str] = None

    def validate(self) -> None:
        p = np.asarray(self.baseline_score_distribution, dtype=float)
        if p.shape != (NUM_SCORES,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DataError("baseline_score_distribution must be 5 non-negative probabilities summing to 1")
        if self.feature_dim < 2:
            raise DataError("feature_dim must be >= 2")
        if not 0.0 <= self.decline_hazard <= 1.0:
            raise DataError("decline_hazard must be in [0, 1]")
        lo, hi = self.sessions_per_patient
        if not 1 <= lo <= hi:
            raise DataError("sessions_per_patient must be a range 1 <= lo <= hi")
        if self.num_patients < 1:
            raise DataError("num_patients must be >= 1")
        if self.signal_on not in ("all", "vowels"):
            raise DataError("signal_on must be 'all' or 'vowels'")


def class_means(config: SynthConfig) -> np.ndarray:
    """Score-class mean vectors: ordered along one direction plus per-class jitter."""
    rng = np.random.default_rng([config.seed, 1])
    d = config.feature_dim
    axis = rng.standard_normal(d)
    axis /= np.linalg.norm(axis)
    jitter = rng.standard_normal((NUM_SCORES, d))
    jitter /= np.linalg.norm(jitter, axis=1, keepdims=True)
    levels = np.arange(NUM_SCORES) - 2.0
    return config.class_separation * (levels[:, None] * axis + 0.5 * jitter)


def _level_mean(means: np.ndarray, level: float) -> np.ndarray:
    # piecewise-linear path through the class means, extrapolated at both ends
    i = int(min(max(math.floor(level), 0), NUM_SCORES - 2))
    t = level - i
    return (1 - t) * means[i] + t * means[i + 1]


def synthesize_cohort(config: SynthConfig, out_dir) -> CohortManifest:
    """Write a synthetic cohort (features, ``manifest.jsonl``, ``stats.json``) under ``out_dir``."""
    config.validate()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([config.seed, 0])
    repeats, slots = load_transcript(config.transcript_path)
    vocab = sorted({p for slot in slots for p in slot})
    means = class_means(config)
    phone_rng = np.random.default_rng([config.seed, 2])
    # fixed per-phoneme spectral signature so frames differ by phoneme
    phone_vec = {p: 0.5 * phone_rng.standard_normal(config.feature_dim) for p in vocab}
    probs = np.asarray(config.baseline_score_distribution, dtype=float)
    lo, hi = config.sessions_per_patient

    records = []
    gaps, baselines = [], []
    width = len(str(config.num_patients - 1))
    for pi in range(config.num_patients):
        pid = f"P{pi:0{width}d}"
        n_sessions = int(rng.integers(lo, hi + 1))
        score = int(rng.choice(NUM_SCORES, p=probs))
        baselines.append(score)
        offset = config.patient_offset_scale * rng.standard_normal(config.feature_dim)
        rating_shift = config.rating_offset_scale * rng.standard_normal()
        onset = "bulbar" if rng.random() < config.bulbar_fraction else "limb"
        day = int(rng.integers(config.first_visit_days[0], config.first_visit_days[1] + 1))
        for si in range(n_sessions):
            if si > 0:
                gap = max(1, int(round(rng.gamma(4.0, config.mean_gap_days / 4.0))))
                gaps.append(gap)
                day += gap
                if score > 0 and rng.random() < config.decline_hazard:
                    score -= 1
            level_mean = _level_mean(means, score + rating_shift)
            phones = []
            for _ in range(repeats):
                for slot in slots:
                    phones.append(slot[int(rng.integers(len(slot)))] if len(slot) > 1 else slot[0])
            segments, chunks, t = [], [], 0
            for ph in phones:
                dur = int(rng.integers(4, 10) if is_vowel(ph) else rng.integers(2, 6))
                carries = config.signal_on == "all" or is_vowel(ph)
                centre = phone_vec[ph] + offset + (level_mean if carries else 0.0)
                chunks.append(centre + config.noise_scale * rng.standard_normal((dur, config.feature_dim)))
                segments.append(AlignmentSegment(ph, t, t + dur))
                t += dur
            uid = f"{pid}_S{si:02d}"
            rel = f"features/{uid}.alstf"
            write_feature_file(out / rel, np.concatenate(chunks, axis=0))
            records.append(SessionRecord(pid, uid, day, score, rel, tuple(segments), onset))

    manifest = CohortManifest.from_records(records, out)
    write_manifest(manifest, out / "manifest.jsonl")
    hist = np.bincount([r.score for r in records], minlength=NUM_SCORES)
    stats = {
        "num_patients": config.num_patients,
        "num_utterances": len(records),
        "mean_gap_days": float(np.mean(gaps)) if gaps else None,
        "mean_baseline_score": float(np.mean(baselines)),
        "score_histogram": [int(h) for h in hist],
        "config": _config_dict(config),
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    return manifest


def _config_dict(config: SynthConfig) -> dict:
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def utterance_mean_features(manifest: CohortManifest) -> tuple[np.ndarray, np.ndarray]:
    """(num_utterances, dim) frame means and their scores, in manifest order."""
    feats = [manifest.load_features(r).astype(np.float64).mean(axis=0) for r in manifest.records]
    return np.stack(feats), np.array([r.score for r in manifest.records])


def nearest_centroid_accuracy(train: CohortManifest, test: CohortManifest) -> float:
    """Accuracy of a nearest-class-mean classifier on utterance mean features."""
    xtr, ytr = utterance_mean_features(train)
    xte, yte = utterance_mean_features(test)
    classes = np.unique(ytr)
    cents = np.stack([xtr[ytr == c].mean(axis=0) for c in classes])
    d = ((xte[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float(np.mean(classes[d.argmin(axis=1)] == yte))
