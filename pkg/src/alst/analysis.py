"""Ablation and interpretation harnesses: sweeps, phoneme masking, linear baseline, confusion CSVs."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics as mx
from .data import CohortManifest, is_vowel, load_manifest, split_by_patient, utterance_mean_features
from .model import Checkpoint, load_checkpoint
from .train import ConfigError, TrainConfig, evaluate_params, load_sequences, predictions, train

log = logging.getLogger(__name__)

SWEEP_AXES = ("lambda_ce", "position_mode", "layer", "variant")
# variant name -> (pooling mode, readout branch)
VARIANTS = {
    "alst": ("utterance", "classification"),
    "alst_r": ("utterance", "regression"),
    "alst_fa": ("phoneme", "classification"),
    "alst_fa_r": ("phoneme", "regression"),
}
MERGED_PHONEMES = {"AH0": "AH0/UW0", "UW0": "AH0/UW0"}
POLICIES = ("first", "longest", "all", "keep_all")


# ---------------------------------------------------------------------------
# confusion matrix artifact
# ---------------------------------------------------------------------------


def emit_confusion(report: mx.MetricReport, path) -> None:
    """5x5 counts and row-normalised rates; rows are true classes, columns predicted."""
    conf = np.asarray(report.confusion, dtype=np.int64)
    k = conf.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true_class"] + [f"count_{j}" for j in range(k)] + [f"rate_{j}" for j in range(k)])
        for i in range(k):
            total = conf[i].sum()
            rates = [repr(float(c / total)) if total else "" for c in conf[i]]
            w.writerow([i] + [int(c) for c in conf[i]] + rates)


def read_confusion(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    k = len(rows)
    return np.array([[int(r[f"count_{j}"]) for j in range(k)] for r in rows], dtype=np.int64)


# ---------------------------------------------------------------------------
# linear baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineConfig:
    l2: float = 1e-3
    learning_rate: float = 0.1
    epochs: int = 500
    seed: int = 0


@dataclass
class LinearModel:
    classes: np.ndarray
    weight: np.ndarray  # (dim, num_present_classes)
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def decision(self, x: np.ndarray) -> np.ndarray:
        # einsum rather than BLAS so each row's result does not depend on the batch size
        return np.einsum("nd,dk->nk", (x - self.mean) / self.scale, self.weight) + self.bias

    def probs(self, x: np.ndarray) -> np.ndarray:
        """Softmax over present-class margins, zero for classes never seen in training."""
        s = self.decision(x)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        s /= s.sum(axis=1, keepdims=True)
        out = np.zeros((len(x), mx.NUM_CLASSES))
        out[:, self.classes] = s
        return out


def fit_linear(x: np.ndarray, y: np.ndarray, config: BaselineConfig = BaselineConfig()) -> LinearModel:
    """One-vs-rest hinge loss plus L2, full-batch subgradient descent."""
    classes = np.unique(y)
    if len(classes) < 2:
        raise ConfigError(f"linear baseline needs at least 2 classes in training data, got {classes.tolist()}")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - mean) / scale
    targets = np.where(y[:, None] == classes[None, :], 1.0, -1.0)
    rng = np.random.default_rng(config.seed)
    w = 0.01 * rng.standard_normal((x.shape[1], len(classes)))
    b = np.zeros(len(classes))
    n = len(y)
    for _ in range(config.epochs):
        margin = targets * (z @ w + b)
        active = (margin < 1.0) * -targets / n
        w -= config.learning_rate * (z.T @ active + config.l2 * w)
        b -= config.learning_rate * active.sum(axis=0)
    return LinearModel(classes, w, b, mean, scale)


def linear_baseline(train_manifest: CohortManifest, test_manifest: CohortManifest,
                    config: BaselineConfig = BaselineConfig()) -> mx.MetricReport:
    """Utterance-mean features, no longitudinal context, classification-branch report."""
    if train_manifest.feature_dim() != test_manifest.feature_dim():
        raise ConfigError("train and test manifests have different feature dims")
    xtr, ytr = utterance_mean_features(train_manifest)
    model = fit_linear(xtr, ytr, config)
    xte, _ = utterance_mean_features(test_manifest)
    probs = model.probs(xte)
    preds = [mx.LabeledPrediction(r.patient_id, r.date_days, r.score, float(p @ np.arange(mx.NUM_CLASSES)),
                                  tuple(float(v) for v in p))
             for r, p in zip(test_manifest.records, probs)]
    return mx.build_report(preds, "classification")


# ---------------------------------------------------------------------------
# phoneme importance
# ---------------------------------------------------------------------------


@dataclass
class PhonemeEntry:
    label: str
    macro_f1: Optional[float]
    num_utterances: int

    @property
    def absent(self) -> bool:
        return self.macro_f1 is None


@dataclass
class PhonemeImportanceResult:
    policy: str
    branch: str
    entries: list = field(default_factory=list)

    def get(self, label: str) -> PhonemeEntry:
        for e in self.entries:
            if e.label == label:
                return e
        raise KeyError(label)

    def to_csv(self) -> str:
        present = sorted((e for e in self.entries if not e.absent), key=lambda e: (-e.macro_f1, e.label))
        absent = sorted((e for e in self.entries if e.absent), key=lambda e: e.label)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phoneme", "macro_f1", "num_utterances", "status", "policy", "branch"])
        for e in present + absent:
            w.writerow([e.label, "" if e.absent else repr(e.macro_f1), e.num_utterances,
                        "absent" if e.absent else "ok", self.policy, self.branch])
        return buf.getvalue()


def phoneme_bucket(label: str) -> str:
    return MERGED_PHONEMES.get(label, label)


def _keep_ranges(record, bucket: str, policy: str) -> list:
    """One list of keep-ranges per evaluation pass for this utterance."""
    segs = [s for s in record.alignment if phoneme_bucket(s.phoneme) == bucket]
    spans = [(s.start_frame, s.end_frame_exclusive) for s in segs]
    if policy == "first":
        return [[spans[0]]]
    if policy == "longest":
        # earliest of the longest segments
        best = max(range(len(spans)), key=lambda i: (spans[i][1] - spans[i][0], -i))
        return [[spans[best]]]
    return [[s] for s in spans]


def phoneme_importance(checkpoint, manifest: CohortManifest, policy: str = "first",
                       branch: str = "regression", vocabulary: Optional[Sequence[str]] = None
                       ) -> PhonemeImportanceResult:
    """Macro F1 when each utterance keeps a single segment of one phoneme and the rest is zeroed.

    Utterances containing the phoneme are evaluated together (pooled), each
    masked. ``policy`` picks the kept segment: ``first``, ``longest``,
    ``all`` (every occurrence evaluated separately, F1 averaged over
    occurrence index) or ``keep_all`` (no masking).
    """
    if policy not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}")
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    params = checkpoint.params
    if params.config.pooling_mode != "phoneme":
        raise ConfigError("phoneme importance needs a checkpoint trained with pooling_mode phoneme")
    labels = list(vocabulary) if vocabulary is not None else sorted(set(params.config.phoneme_vocab)
                                                                     | set(manifest.phoneme_vocab))
    buckets = sorted({phoneme_bucket(p) for p in labels})

    cache: dict = {}

    def load(rec):
        key = (rec.patient_id, rec.utterance_id)
        if key not in cache:
            cache[key] = manifest.load_features(rec)
        return cache[key]

    result = PhonemeImportanceResult(policy, branch)
    for bucket in buckets:
        holders = [r for r in manifest.records if any(phoneme_bucket(s.phoneme) == bucket for s in r.alignment)]
        if not holders:
            result.entries.append(PhonemeEntry(bucket, None, 0))
            continue
        sub = CohortManifest.from_records(holders, manifest.root)
        sub.load_features = load  # type: ignore[method-assign]
        if policy == "keep_all":
            passes = [None]
        else:
            per_utt = {r.utterance_id: _keep_ranges(r, bucket, policy) for r in holders}
            depth = max(len(v) for v in per_utt.values())
            passes = []
            for k in range(depth):
                passes.append({u: v[k] for u, v in per_utt.items() if len(v) > k})
        f1s = []
        for masks in passes:
            if masks is None:
                run = sub
            else:
                run = CohortManifest.from_records([r for r in holders if r.utterance_id in masks], manifest.root)
                run.load_features = load  # type: ignore[method-assign]
            seqs = load_sequences(run, params.config, masks)
            f1s.append(mx.build_report(predictions(params, run, seqs), branch).macro_f1)
        result.entries.append(PhonemeEntry(bucket, float(np.mean(f1s)), len(holders)))
    return result


def vowel_consonant_means(result: PhonemeImportanceResult) -> tuple[float, float]:
    """Mean F1 over present vowel buckets and over present consonant buckets."""
    v = [e.macro_f1 for e in result.entries if not e.absent and is_vowel(e.label.split("/")[0])]
    c = [e.macro_f1 for e in result.entries if not e.absent and not is_vowel(e.label.split("/")[0])]
    return float(np.mean(v)), float(np.mean(c))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    base_config: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple = (0,)
    branch: str = "regression"
    # layer axis: value -> manifest path holding that layer's features
    layer_manifests: dict = field(default_factory=dict)
    test_fraction: float = 0.2
    split_seed: int = 0

    def validate(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {self.axis!r}")
        if not self.values:
            raise ConfigError("sweep values must be non-empty")
        if not self.seeds:
            raise ConfigError("sweep seeds must be non-empty")
        if self.branch not in ("regression", "classification"):
            raise ConfigError(f"unknown branch {self.branch!r}")
        if self.axis == "layer":
            missing = [v for v in self.values if str(v) not in self.layer_manifests]
            if missing:
                raise ConfigError(f"no feature manifest for layer value(s) {missing}")
            absent = [p for p in self.layer_manifests.values() if not Path(p).is_file()]
            if absent:
                raise ConfigError(f"layer manifest(s) not found: {absent}")
        if self.axis == "variant":
            bad = [v for v in self.values if v not in VARIANTS]
            if bad:
                raise ConfigError(f"unknown variant(s) {bad}; choose from {sorted(VARIANTS)}")
        self.base_config.validate()


def cell_config(spec: SweepSpec, value, seed: int) -> tuple[TrainConfig, str]:
    """TrainConfig and readout branch for one (value, seed) cell."""
    cfg = replace(spec.base_config, seed=int(seed))
    branch = spec.branch
    if spec.axis == "lambda_ce":
        cfg = replace(cfg, model=replace(cfg.model, lambda_ce=float(value)))
    elif spec.axis == "position_mode":
        cfg = replace(cfg, model=replace(cfg.model, position_mode=str(value)))
    elif spec.axis == "variant":
        pooling, branch = VARIANTS[value]
        cfg = replace(cfg, model=replace(cfg.model, pooling_mode=pooling))
    return cfg, branch


def manifest_fingerprint(manifest: CohortManifest) -> str:
    """Hash of every record and the bytes of every feature file it names."""
    h = hashlib.sha256()
    for rec in manifest.records:
        h.update(rec.to_json().encode("utf-8"))
        h.update(hashlib.sha256(manifest.feature_file(rec).read_bytes()).digest())
    return h.hexdigest()


def _cell_key(cfg: TrainConfig, branch: str, train_fp: str, test_fp: str) -> str:
    blob = json.dumps({"train_config": cfg.to_dict(), "branch": branch, "train": train_fp, "test": test_fp},
                      sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:20]


@dataclass
class SweepCell:
    value: object
    seed: int
    key: str
    branch: str
    report: mx.MetricReport
    trained: bool


@dataclass
class SweepResult:
    spec: SweepSpec
    cells: list

    @property
    def runs_trained(self) -> int:
        return sum(c.trained for c in self.cells)

    def summary(self) -> list:
        """Per axis value: mean and sample standard deviation of each metric over seeds."""
        rows = []
        for value in self.spec.values:
            reps = [c.report for c in self.cells if c.value == value]
            row = {"axis": self.spec.axis, "value": value, "num_seeds": len(reps)}
            for m in mx.CSV_FIELDS[1:-1]:
                vals = [getattr(r, m) for r in reps if getattr(r, m) is not None]
                row[f"{m}_mean"] = float(np.mean(vals)) if vals else None
                row[f"{m}_sd"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
            rows.append(row)
        return rows

    def cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "value", "seed", "cell"] + list(mx.CSV_FIELDS))
        for c in self.cells:
            row = c.report.csv_row()
            w.writerow([self.spec.axis, c.value, c.seed, c.key] + [row[k] for k in mx.CSV_FIELDS])
        return buf.getvalue()

    def summary_csv(self) -> str:
        rows = self.summary()
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else v for k, v in r.items()})
        return buf.getvalue()


def _run_cell(args):
    cfg, branch, train_path, test_path, split, cell_dir = args
    train_m, test_m = _load_split(train_path, test_path, *split)
    ckpt, runlog = train(train_m, cfg)
    report = evaluate_params(ckpt.params, test_m, branch)
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    runlog.write(cell_dir / "runlog.jsonl")
    (cell_dir / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    # report last: its presence marks the cell complete
    (cell_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    return report


def _load_split(train_path, test_path, fraction, seed):
    if test_path is not None:
        return load_manifest(train_path), load_manifest(test_path)
    return split_by_patient(load_manifest(train_path), fraction, seed)


def run_sweep(spec: SweepSpec, out_dir, train_manifest=None, test_manifest=None, threads: int = 1) -> SweepResult:
    """Train one model per (value, seed) and evaluate it on the test split.

    ``train_manifest``/``test_manifest`` are manifest paths; with only the
    first, it is split by patient using the sweep's test fraction and split seed. For the
    layer axis the per-value manifests in ``spec.layer_manifests`` replace
    them. Cells already present under ``out_dir/cells`` are reused.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    split = (spec.test_fraction, spec.split_seed)
    if spec.axis != "layer" and train_manifest is None:
        raise ConfigError("run_sweep needs a training manifest")

    fingerprints, sources = {}, {}
    for value in spec.values:
        tr_path = spec.layer_manifests[str(value)] if spec.axis == "layer" else train_manifest
        te_path = None if spec.axis == "layer" else test_manifest
        key = (str(tr_path), str(te_path))
        if key not in fingerprints:
            tr, te = _load_split(tr_path, te_path, *split)
            fingerprints[key] = (manifest_fingerprint(tr), manifest_fingerprint(te))
        sources[value] = (tr_path, te_path, *fingerprints[key])

    plan, todo = [], []
    for value in spec.values:
        tr_path, te_path, tr_fp, te_fp = sources[value]
        for seed in spec.seeds:
            cfg, branch = cell_config(spec, value, seed)
            key = _cell_key(cfg, branch, tr_fp, te_fp)
            cell_dir = out / "cells" / key
            plan.append((value, int(seed), key, branch, cell_dir))
            if not (cell_dir / "report.json").is_file():
                todo.append((cfg, branch, tr_path, te_path, split, str(cell_dir)))
    log.info("sweep %s: %d cells, %d to train", spec.axis, len(plan), len(todo))
    if threads > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_run_cell, todo))
    else:
        for job in todo:
            _run_cell(job)
    fresh = {job[-1] for job in todo}
    cells = []
    for value, seed, key, branch, cell_dir in plan:
        rep = mx.MetricReport.from_dict(json.loads((cell_dir / "report.json").read_text(encoding="utf-8")))
        cells.append(SweepCell(value, seed, key, branch, rep, str(cell_dir) in fresh))
    result = SweepResult(spec, cells)
    (out / "sweep_cells.csv").write_text(result.cells_csv(), encoding="utf-8")
    (out / "sweep_summary.csv").write_text(result.summary_csv(), encoding="utf-8")
    return result
