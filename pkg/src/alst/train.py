"""Training loop and evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics as mx
from . import numcore as nc
from .data import CohortManifest, batch_patients
from .model import (
    AlstConfig,
    AlstParams,
    Checkpoint,
    forward,
    alst_loss,
    init_params,
    load_checkpoint,
    make_sequence,
    pack_batch,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Loss or gradients went non-finite; ``checkpoint`` is the last good state, if any."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: AlstConfig = field(default_factory=AlstConfig)
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 1e-4
    warmup_steps: int = 100
    decay_start_epoch: int = 20
    decay_step_epochs: int = 5
    decay_rate: float = 0.5
    seed: int = 0
    eval_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip: float = 0.0
    shuffle: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 < self.decay_rate < 1:
            raise ConfigError("decay_rate must be in (0, 1)")
        if self.decay_step_epochs < 1:
            raise ConfigError("decay_step_epochs must be >= 1")
        self.model.validate()

    @property
    def schedule(self) -> nc.LrSchedule:
        return nc.LrSchedule(self.base_lr, self.warmup_steps, self.decay_start_epoch,
                             self.decay_step_epochs, self.decay_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = AlstConfig.from_dict(d.get("model", {}))
        return cls(**d)


@dataclass
class RunLog:
    epochs: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    # wall-clock seconds per epoch; kept out of the written log so reruns compare equal
    wall_times: list = field(default_factory=list)

    def lines(self) -> list:
        out = [json.dumps({"kind": "epoch", **e}, sort_keys=True) for e in self.epochs]
        out += [json.dumps({"kind": "eval", **e}, sort_keys=True) for e in self.evals]
        out.append(json.dumps({"kind": "final", "checkpoint": self.checkpoint_path,
                               "steps": len(self.lr_trace)}, sort_keys=True))
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")


def load_sequences(manifest: CohortManifest, config: AlstConfig, frame_masks=None) -> dict:
    """Pool every patient's utterances once; ``patient_id -> PatientSequence``."""
    return {pid: make_sequence(recs, manifest.load_features, config, frame_masks)
            for pid, recs in manifest.patients.items()}


def model_config_for(manifest: CohortManifest, config: AlstConfig) -> AlstConfig:
    """Fill input_dim and phoneme_vocab from the data when they differ."""
    updates = {}
    dim = manifest.feature_dim()
    if dim != config.input_dim:
        updates["input_dim"] = dim
    if config.pooling_mode == "phoneme" and not config.phoneme_vocab:
        updates["phoneme_vocab"] = tuple(manifest.phoneme_vocab)
    return replace(config, **updates) if updates else config


def train(train_manifest: CohortManifest, config: TrainConfig, out_dir=None,
          eval_manifest: Optional[CohortManifest] = None, sequences: Optional[dict] = None):
    """Fit a model; returns ``(Checkpoint, RunLog)``.

    The last epoch's parameters are the result. With ``out_dir`` the final
    checkpoint and ``runlog.jsonl`` are written there.
    """
    if len(train_manifest) == 0:
        raise ConfigError("training manifest is empty")
    config = replace(config, model=model_config_for(train_manifest, config.model))
    config.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    mcfg = config.model
    seqs = sequences if sequences is not None else load_sequences(train_manifest, mcfg)
    eval_seqs = load_sequences(eval_manifest, mcfg) if eval_manifest is not None and config.eval_every else None

    params = init_params(mcfg, seed=config.seed)
    state = nc.AdamState(config.beta1, config.beta2, config.epsilon)
    drop_rng = np.random.default_rng([config.seed, 7])
    schedule = config.schedule
    runlog = RunLog()
    step = 0
    last_good = None
    ckpt_path = out / "checkpoint.alst" if out is not None else None

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses, weights, lrs = [], [], []
        for b, ids in enumerate(batch_patients(train_manifest, config.batch_size, config.seed, epoch,
                                               shuffle=config.shuffle)):
            batch = pack_batch(mcfg, [seqs[i] for i in ids])
            params.zero_grad()
            try:
                outputs = forward(params, batch, training=True, rng=drop_rng)
                loss = alst_loss(outputs, batch.scores, mcfg.lambda_ce)
                if not np.isfinite(loss.item()):
                    raise nc.NumericError("loss is not finite")
                loss.backward()
                grads = [p.grad for p in params.values()]
                if config.grad_clip > 0:
                    nc.clip_grad_norm(grads, config.grad_clip)
                lr = nc.lr_at(schedule, step, epoch)
                nc.adam_step(params.values(), grads, state, lr)
            except nc.NumericError as exc:
                if out is not None and last_good is not None:
                    save_checkpoint(ckpt_path, *last_good)
                raise TrainingAborted(f"epoch {epoch} batch {b}: {exc}", ckpt_path if last_good else None) from exc
            losses.append(loss.item())
            weights.append(batch.num_utterances)
            lrs.append(lr)
            runlog.lr_trace.append(lr)
            step += 1
        mean_loss = float(np.average(losses, weights=weights))
        runlog.epochs.append({"epoch": epoch, "loss": mean_loss, "lr": lrs[-1], "steps": len(lrs)})
        runlog.wall_times.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.5f lr %.3g (%.1fs)", epoch, mean_loss, lrs[-1], runlog.wall_times[-1])
        if out is not None and epoch < config.epochs - 1:
            last_good = (params.copy(), None, None, epoch + 1)
        if eval_seqs is not None and (epoch + 1) % config.eval_every == 0:
            rep = evaluate_params(params, eval_manifest, "regression", eval_seqs)
            runlog.evals.append({"epoch": epoch, **rep.csv_row()})

    extra = {"train_config": config.to_dict()}
    ckpt = Checkpoint(params, state, None, config.epochs, extra)
    if out is not None:
        save_checkpoint(ckpt_path, params, state, None, config.epochs, extra)
        runlog.checkpoint_path = ckpt_path.name
        runlog.write(out / "runlog.jsonl")
    return ckpt, runlog


def predictions(params: AlstParams, manifest: CohortManifest, sequences: Optional[dict] = None,
                batch_size: int = 32) -> list:
    """LabeledPrediction per record, patients in id order, utterances by date."""
    seqs = sequences if sequences is not None else load_sequences(manifest, params.config)
    ids = sorted(seqs)
    preds = []
    for start in range(0, len(ids), batch_size):
        chunk = [seqs[i] for i in ids[start:start + batch_size]]
        out = forward(params, pack_batch(params.config, chunk))
        k = 0
        for s in chunk:
            for u in range(s.num_utterances):
                preds.append(mx.LabeledPrediction(s.patient_id, int(s.dates[u]), int(s.scores[u]),
                                                  float(out.scores[k]), tuple(float(v) for v in out.probs[k])))
                k += 1
    return preds


def evaluate_params(params: AlstParams, manifest: CohortManifest, branch: str = "regression",
                    sequences: Optional[dict] = None) -> mx.MetricReport:
    if manifest.feature_dim() != params.config.input_dim:
        raise ConfigError(f"manifest feature dim {manifest.feature_dim()} != model input_dim "
                          f"{params.config.input_dim}")
    return mx.build_report(predictions(params, manifest, sequences), branch)


def evaluate(checkpoint, manifest: CohortManifest, branch: str = "regression") -> mx.MetricReport:
    """Metrics of a checkpoint (object or path) on ``manifest`` for one output branch."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    return evaluate_params(checkpoint.params, manifest, branch)
