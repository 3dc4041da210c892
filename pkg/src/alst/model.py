"""The longitudinal speech transformer.

A patient's utterances are pooled into tokens (one per utterance, or one per
aligned phoneme), concatenated in date order, encoded jointly by a post-norm
transformer stack, pooled back to one vector per utterance and scored by a
single linear map that emits a continuous score and five class logits.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import numcore as nc
from .data import DataError, mask_frames
from .numcore import ContractError, Tensor

POOLING_MODES = ("utterance", "phoneme")
POSITION_MODES = (
    "none",
    "longitudinal_no_pos",
    "order_trainable",
    "order_sinusoid",
    "day_sinusoid",
    "day_trainable",
)
CE_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"ALSTCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AlstConfig:
    input_dim: int = 1024
    hidden_dim: int = 512
    num_layers: int = 2
    num_heads: int = 1
    ffn_dim: int = 2048
    num_classes: int = 5
    pooling_mode: str = "utterance"
    position_mode: str = "longitudinal_no_pos"
    lambda_ce: float = 1.0
    max_order: int = 64
    day_bucket_size: int = 30
    max_day_buckets: int = 120
    max_utterance_tokens: int = 128
    phoneme_vocab: tuple = ()
    dropout: float = 0.0
    layer_norm_eps: float = 1e-5

    def validate(self) -> None:
        if self.hidden_dim <= 0 or self.input_dim <= 0 or self.ffn_dim <= 0:
            raise ContractError("input_dim, hidden_dim and ffn_dim must be positive")
        if self.num_classes != 5:
            raise ContractError("the speech sub-score has exactly 5 classes")
        if self.num_layers < 0:
            raise ContractError("num_layers must be >= 0")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ContractError("num_heads must divide hidden_dim")
        if self.pooling_mode not in POOLING_MODES:
            raise ContractError(f"pooling_mode must be one of {POOLING_MODES}")
        if self.position_mode not in POSITION_MODES:
            raise ContractError(f"position_mode must be one of {POSITION_MODES}")
        if self.lambda_ce < 0:
            raise ContractError("lambda_ce must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must be in [0, 1)")

    @property
    def trainable_positions(self) -> bool:
        return self.position_mode in ("order_trainable", "day_trainable")

    @property
    def sinusoid_positions(self) -> bool:
        return self.position_mode in ("order_sinusoid", "day_sinusoid")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phoneme_vocab"] = list(self.phoneme_vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlstConfig":
        d = dict(d)
        d["phoneme_vocab"] = tuple(d.get("phoneme_vocab", ()))
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _linear_names(prefix):
    return [f"{prefix}.weight", f"{prefix}.bias"]


def parameter_shapes(config: AlstConfig) -> dict:
    """Name -> shape for every trainable tensor, in creation order."""
    h, f, c = config.hidden_dim, config.ffn_dim, config.num_classes
    shapes = {
        "input_projection.weight": (config.input_dim, h),
        "input_projection.bias": (h,),
    }
    for i in range(config.num_layers):
        p = f"blocks.{i}"
        for name in ("query", "key", "value", "out"):
            shapes[f"{p}.attn.{name}.weight"] = (h, h)
            shapes[f"{p}.attn.{name}.bias"] = (h,)
        shapes[f"{p}.norm1.gain"] = (h,)
        shapes[f"{p}.norm1.bias"] = (h,)
        shapes[f"{p}.ffn.0.weight"] = (h, f)
        shapes[f"{p}.ffn.0.bias"] = (f,)
        shapes[f"{p}.ffn.1.weight"] = (f, h)
        shapes[f"{p}.ffn.1.bias"] = (h,)
        shapes[f"{p}.norm2.gain"] = (h,)
        shapes[f"{p}.norm2.bias"] = (h,)
    shapes["output_projection.weight"] = (h, h)
    shapes["output_projection.bias"] = (h,)
    if config.pooling_mode == "phoneme":
        # row 0 is reserved for phonemes outside the vocabulary
        shapes["phoneme_embedding"] = (len(config.phoneme_vocab) + 1, h)
    else:
        shapes["generic_token_embedding"] = (1, h)
    if config.trainable_positions:
        shapes["within_utterance_position_embedding"] = (config.max_utterance_tokens, h)
    if config.position_mode == "order_trainable":
        shapes["order_embedding"] = (config.max_order, h)
    if config.position_mode == "day_trainable":
        shapes["day_embedding"] = (config.max_day_buckets, h)
    shapes["scorer.weight"] = (h, 1 + c)
    shapes["scorer.bias"] = (1 + c,)
    return shapes


def closed_form_parameter_count(config: AlstConfig) -> int:
    """Trainable scalars, written out term by term.

    input  D*H + H
    block  4(H^2 + H) + 2*2H + (H*F + F) + (F*H + H), times num_layers
    output H^2 + H
    scorer H*(1+C) + (1+C)
    token  (V+1)*H with phoneme tokens, else H
    plus   Tmax*H + O*H (order) or Tmax*H + B*H (day) for trainable positions
    """
    d, h, f, c, L = config.input_dim, config.hidden_dim, config.ffn_dim, config.num_classes, config.num_layers
    total = d * h + h
    total += L * (4 * (h * h + h) + 4 * h + (h * f + f) + (f * h + h))
    total += h * h + h
    total += h * (1 + c) + (1 + c)
    total += (len(config.phoneme_vocab) + 1) * h if config.pooling_mode == "phoneme" else h
    if config.position_mode == "order_trainable":
        total += config.max_utterance_tokens * h + config.max_order * h
    elif config.position_mode == "day_trainable":
        total += config.max_utterance_tokens * h + config.max_day_buckets * h
    return total


@dataclass
class AlstParams:
    config: AlstConfig
    tensors: dict

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors)

    def values(self) -> list:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "AlstParams":
        return AlstParams(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                        for k, v in self.tensors.items()})


def init_params(config: AlstConfig, seed: int = 0) -> AlstParams:
    """Glorot-uniform linear maps, N(0, 0.02) embeddings, zero biases, unit norm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = nc.get_default_dtype()
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        elif name.endswith(".weight"):
            arr = nc.glorot_uniform(rng, shape[0], shape[1], dtype)
        else:
            arr = (0.02 * rng.standard_normal(shape)).astype(dtype)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return AlstParams(config, tensors)


def parameter_count(params: AlstParams) -> int:
    return int(sum(t.size for t in params.values()))


# ---------------------------------------------------------------------------
# token construction
# ---------------------------------------------------------------------------


def pool_segments(frames: np.ndarray, boundaries, utterance_id: str = "?") -> np.ndarray:
    """Mean of the frames inside each ``(start, end_exclusive)`` segment."""
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    out = np.empty((len(boundaries), frames.shape[1]))
    prev = 0
    for j, (start, end) in enumerate(boundaries):
        if start >= end:
            raise DataError(f"utterance {utterance_id!r}: segment {j} is empty [{start}, {end})")
        if start < prev or end > n or start < 0:
            raise DataError(f"utterance {utterance_id!r}: segment {j} [{start}, {end}) "
                            f"overlaps or exceeds {n} frames")
        out[j] = frames[start:end].mean(axis=0)
        prev = end
    return out


@dataclass
class PatientSequence:
    """One patient's utterances in date order, already pooled into tokens."""

    patient_id: str
    utterance_ids: list
    tokens: np.ndarray          # (num_tokens, input_dim)
    token_utterance: np.ndarray  # (num_tokens,) utterance index of each token
    phoneme_ids: np.ndarray     # (num_tokens,)
    dates: np.ndarray           # (num_utterances,) days since diagnosis
    scores: np.ndarray          # (num_utterances,)

    @property
    def num_utterances(self) -> int:
        return len(self.utterance_ids)

    @property
    def num_tokens(self) -> int:
        return len(self.token_utterance)

    def within_positions(self) -> np.ndarray:
        pos = np.zeros(self.num_tokens, dtype=np.int64)
        for u in range(self.num_utterances):
            idx = np.flatnonzero(self.token_utterance == u)
            pos[idx] = np.arange(len(idx))
        return pos

    def reorder(self, order) -> "PatientSequence":
        """Same patient with utterances permuted by ``order`` (index list)."""
        order = list(order)
        toks, tu, ph = [], [], []
        for new, old in enumerate(order):
            idx = np.flatnonzero(self.token_utterance == old)
            toks.append(self.tokens[idx])
            ph.append(self.phoneme_ids[idx])
            tu.append(np.full(len(idx), new))
        return PatientSequence(self.patient_id, [self.utterance_ids[i] for i in order], np.concatenate(toks),
                               np.concatenate(tu), np.concatenate(ph), self.dates[order], self.scores[order])

    def select(self, keep) -> "PatientSequence":
        """Keep only the utterances at indices ``keep`` (in that order)."""
        return self.reorder(keep)


def phoneme_index(config: AlstConfig) -> dict:
    return {p: i + 1 for i, p in enumerate(config.phoneme_vocab)}


def make_sequence(records, load_features, config: AlstConfig, frame_masks=None) -> PatientSequence:
    """Pool one patient's records (assumed date-sorted) into a :class:`PatientSequence`.

    ``load_features(record)`` returns the frame matrix; ``frame_masks`` optionally
    maps utterance_id to keep-ranges applied before pooling. With phoneme
    tokens, a segment whose frames are all masked yields no token, the same
    way padding is excluded.
    """
    records = sorted(records, key=lambda r: (r.date_days, r.utterance_id))
    vocab = phoneme_index(config)
    toks, tu, ph = [], [], []
    for u, rec in enumerate(records):
        frames = load_features(rec)
        keep = None
        if frame_masks is not None and rec.utterance_id in frame_masks:
            keep = frame_masks[rec.utterance_id]
            frames = mask_frames(frames, keep)
        if frames.shape[1] != config.input_dim:
            raise DataError(f"utterance {rec.utterance_id!r}: feature dim {frames.shape[1]} "
                            f"!= model input_dim {config.input_dim}")
        if config.pooling_mode == "phoneme":
            if not rec.alignment:
                raise DataError(f"utterance {rec.utterance_id!r}: phoneme pooling needs an alignment")
            segs = rec.alignment
            if keep is not None:
                segs = [s for s in segs if any(a < s.end_frame_exclusive and s.start_frame < b for a, b in keep)]
                if not segs:
                    raise DataError(f"utterance {rec.utterance_id!r}: frame mask keeps no segment")
            bounds = [(s.start_frame, s.end_frame_exclusive) for s in segs]
            ids = [vocab.get(s.phoneme, 0) for s in segs]
        else:
            bounds = [(0, frames.shape[0])]
            ids = [0]
        toks.append(pool_segments(frames, bounds, rec.utterance_id))
        tu.append(np.full(len(bounds), u))
        ph.append(np.asarray(ids, dtype=np.int64))
    if records:
        for rec in records:
            if rec.date_days < 0:
                raise DataError(f"utterance {rec.utterance_id!r}: negative date {rec.date_days}")
    return PatientSequence(
        patient_id=records[0].patient_id,
        utterance_ids=[r.utterance_id for r in records],
        tokens=np.concatenate(toks).astype(nc.get_default_dtype()),
        token_utterance=np.concatenate(tu).astype(np.int64),
        phoneme_ids=np.concatenate(ph),
        dates=np.array([r.date_days for r in records], dtype=np.int64),
        scores=np.array([r.score for r in records], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# position embeddings
# ---------------------------------------------------------------------------


def sinusoid_encoding(values, dim: int) -> np.ndarray:
    """Standard sin/cos encoding; even columns sin, odd columns cos."""
    values = np.asarray(values, dtype=np.float64)
    i = np.arange(dim // 2 + dim % 2)
    freq = 1.0 / (10000.0 ** (2 * i / dim))
    angles = values[..., None] * freq
    out = np.empty(values.shape + (dim,))
    out[..., 0::2] = np.sin(angles)[..., : (dim + 1) // 2]
    out[..., 1::2] = np.cos(angles)[..., : dim // 2]
    return out


def date_ranks(dates) -> np.ndarray:
    """0-based rank of each date within the patient (ties broken by position)."""
    dates = np.asarray(dates)
    return np.argsort(np.argsort(dates, kind="stable"), kind="stable")


@dataclass
class PositionDiagnostics:
    clamped_orders: int = 0
    clamped_days: int = 0
    clamped_within: int = 0


def position_codes(config: AlstConfig, seq: PatientSequence, diagnostics: Optional[PositionDiagnostics] = None):
    """Per-token (within-utterance index, date code) integer/real arrays."""
    diag = diagnostics if diagnostics is not None else PositionDiagnostics()
    within = seq.within_positions()
    if np.any(seq.dates < 0):
        raise DataError(f"patient {seq.patient_id!r}: negative date")
    mode = config.position_mode
    if mode.startswith("order"):
        codes = date_ranks(seq.dates)
        if mode == "order_trainable":
            diag.clamped_orders += int(np.sum(codes >= config.max_order))
            codes = np.minimum(codes, config.max_order - 1)
    elif mode == "day_trainable":
        codes = seq.dates // config.day_bucket_size
        diag.clamped_days += int(np.sum(codes >= config.max_day_buckets))
        codes = np.minimum(codes, config.max_day_buckets - 1)
    else:
        codes = seq.dates
    if config.trainable_positions:
        diag.clamped_within += int(np.sum(within >= config.max_utterance_tokens))
        within = np.minimum(within, config.max_utterance_tokens - 1)
    return within, codes[seq.token_utterance]


def build_position_embeddings(config: AlstConfig, seq: PatientSequence, params: Optional[AlstParams] = None,
                              diagnostics=None) -> Tensor:
    """(num_tokens, hidden) embedding of within-utterance index plus date code."""
    h = config.hidden_dim
    if config.position_mode in ("none", "longitudinal_no_pos"):
        return Tensor(np.zeros((seq.num_tokens, h), dtype=nc.get_default_dtype()))
    within, codes = position_codes(config, seq, diagnostics)
    return _position_tensor(config, params, within, codes)


def _position_tensor(config, params, within, codes) -> Tensor:
    dtype = nc.get_default_dtype()
    if config.sinusoid_positions:
        return Tensor((sinusoid_encoding(within, config.hidden_dim)
                       + sinusoid_encoding(codes, config.hidden_dim)).astype(dtype))
    table = "order_embedding" if config.position_mode == "order_trainable" else "day_embedding"
    return nc.add(nc.embedding(params["within_utterance_position_embedding"], within),
                  nc.embedding(params[table], codes))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class TokenGroup:
    """Equal-length (after padding) token sequences encoded together."""

    tokens: np.ndarray       # (S, T, D)
    key_mask: np.ndarray     # (S, 1, T) additive
    phoneme_ids: np.ndarray  # (S, T)
    within: np.ndarray       # (S, T)
    codes: np.ndarray        # (S, T)
    pool: np.ndarray         # (S, U, T) mean-pooling weights
    valid: np.ndarray        # flat indices into S*U of real utterances
    real_tokens: np.ndarray  # (S, T) bool


@dataclass
class PackedBatch:
    groups: list
    order: np.ndarray        # group-concatenated utterance rows -> canonical order
    sequences: list
    scores: np.ndarray       # canonical order
    num_utterances: int
    diagnostics: PositionDiagnostics = field(default_factory=PositionDiagnostics)

    @property
    def utterance_keys(self) -> list:
        return [(s.patient_id, u) for s in self.sequences for u in s.utterance_ids]


def _pack_group(config, seqs, diag) -> TokenGroup:
    S = len(seqs)
    T = max(s.num_tokens for s in seqs)
    U = max(s.num_utterances for s in seqs)
    D = config.input_dim
    dtype = nc.get_default_dtype()
    tokens = np.zeros((S, T, D), dtype=dtype)
    real = np.zeros((S, T), dtype=bool)
    ph = np.zeros((S, T), dtype=np.int64)
    within = np.zeros((S, T), dtype=np.int64)
    codes = np.zeros((S, T), dtype=np.int64)
    pool = np.zeros((S, U, T), dtype=dtype)
    valid = []
    for i, s in enumerate(seqs):
        n = s.num_tokens
        tokens[i, :n] = s.tokens
        real[i, :n] = True
        ph[i, :n] = s.phoneme_ids
        if config.position_mode not in ("none", "longitudinal_no_pos"):
            w, c = position_codes(config, s, diag)
            within[i, :n] = w
            codes[i, :n] = c
        for u in range(s.num_utterances):
            idx = np.flatnonzero(s.token_utterance == u)
            if len(idx) == 0:
                raise ContractError(f"patient {s.patient_id!r}: utterance {u} has no tokens")
            pool[i, u, idx] = 1.0 / len(idx)
            valid.append(i * U + u)
    key_mask = np.where(real, 0.0, nc.MASK_VALUE).astype(dtype)[:, None, :]
    return TokenGroup(tokens, key_mask, ph, within, codes, pool, np.asarray(valid), real)


def pack_batch(config: AlstConfig, sequences) -> PackedBatch:
    """Pad patient sequences into tensors the encoder consumes.

    With ``position_mode='none'`` each utterance becomes its own sequence and
    sequences are grouped by exact token count, so no utterance ever shares a
    padded tensor dimension with another patient's or utterance's tokens.
    """
    diag = PositionDiagnostics()
    scores = np.concatenate([s.scores for s in sequences])
    total = len(scores)
    if config.position_mode == "none":
        singles = []
        for s in sequences:
            for u in range(s.num_utterances):
                singles.append(s.select([u]))
        by_len: dict = {}
        for pos, s in enumerate(singles):
            by_len.setdefault(s.num_tokens, []).append(pos)
        groups, order = [], []
        for n in sorted(by_len):
            members = by_len[n]
            groups.append(_pack_group(config, [singles[p] for p in members], diag))
            order.extend(members)
        order = np.asarray(order)
    else:
        groups = [_pack_group(config, list(sequences), diag)]
        order = np.arange(total)
    return PackedBatch(groups, order, list(sequences), scores, total, diag)


# ---------------------------------------------------------------------------
# encoder and scorer
# ---------------------------------------------------------------------------


def _self_attention(params, prefix, x, key_mask, num_heads):
    q = nc.linear(x, params[f"{prefix}.query.weight"], params[f"{prefix}.query.bias"])
    k = nc.linear(x, params[f"{prefix}.key.weight"], params[f"{prefix}.key.bias"])
    v = nc.linear(x, params[f"{prefix}.value.weight"], params[f"{prefix}.value.bias"])
    if num_heads == 1:
        a = nc.attention(q, k, v, mask=key_mask)
    else:
        S, T, H = x.shape
        hd = H // num_heads

        def split(t):
            return nc.permute(t.reshape(S, T, num_heads, hd), (0, 2, 1, 3))

        a = nc.attention(split(q), split(k), split(v), mask=key_mask[:, None])
        a = nc.permute(a, (0, 2, 1, 3)).reshape(S, T, H)
    return nc.linear(a, params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"])


def transformer_stack(params: AlstParams, x: Tensor, key_mask, training=False, rng=None) -> Tensor:
    """Post-norm transformer blocks with ReLU feed-forward layers."""
    cfg = params.config
    eps = cfg.layer_norm_eps
    drop = cfg.dropout if training else 0.0
    for i in range(cfg.num_layers):
        p = f"blocks.{i}"
        a = _self_attention(params, f"{p}.attn", x, key_mask, cfg.num_heads)
        x = nc.layer_norm(x + nc.dropout(a, drop, rng), params[f"{p}.norm1.gain"], params[f"{p}.norm1.bias"], eps)
        f = nc.relu(nc.linear(x, params[f"{p}.ffn.0.weight"], params[f"{p}.ffn.0.bias"]))
        f = nc.linear(f, params[f"{p}.ffn.1.weight"], params[f"{p}.ffn.1.bias"])
        x = nc.layer_norm(x + nc.dropout(f, drop, rng), params[f"{p}.norm2.gain"], params[f"{p}.norm2.bias"], eps)
    return x


def encode_longitudinal(params: AlstParams, tokens, position_embeddings, phoneme_ids, key_mask,
                        training=False, rng=None) -> Tensor:
    """Per-token hidden states: Linear_out(Transformer(Linear_in(z) + e_pos)) + e_phn.

    ``tokens`` is (S, T, D); ``key_mask`` is additive with shape (S, 1, T).
    """
    tokens = nc.as_tensor(tokens)
    key_mask = np.asarray(key_mask)
    if key_mask.shape[-1] != tokens.shape[-2]:
        raise ContractError(f"mask length {key_mask.shape[-1]} != token length {tokens.shape[-2]}")
    x = nc.linear(tokens, params["input_projection.weight"], params["input_projection.bias"])
    if position_embeddings is not None:
        x = x + position_embeddings
    x = transformer_stack(params, x, key_mask, training, rng)
    h = nc.linear(x, params["output_projection.weight"], params["output_projection.bias"])
    if params.config.pooling_mode == "phoneme":
        return h + nc.embedding(params["phoneme_embedding"], phoneme_ids)
    return h + params["generic_token_embedding"]


def score(params: AlstParams, hidden: Tensor, pool: np.ndarray) -> Tensor:
    """Mean-pool token states per utterance (``pool`` is (S, U, T)) and apply the scorer."""
    z = nc.matmul(Tensor(np.asarray(pool)), hidden)
    return nc.linear(z, params["scorer.weight"], params["scorer.bias"])


@dataclass
class ModelOutput:
    """Per-utterance outputs in the batch's canonical (patient, date) order."""

    y_hat: Tensor   # (N,)
    logits: Tensor  # (N, C)
    p_hat: Tensor   # (N, C)
    keys: list

    @property
    def scores(self) -> np.ndarray:
        return self.y_hat.data

    @property
    def probs(self) -> np.ndarray:
        return self.p_hat.data


def _group_position_tensor(config, params, group: TokenGroup):
    if config.position_mode in ("none", "longitudinal_no_pos"):
        return None
    return _position_tensor(config, params, group.within, group.codes)


def forward(params: AlstParams, batch: PackedBatch, training=False, rng=None) -> ModelOutput:
    cfg = params.config
    rows = []
    for g in batch.groups:
        pos = _group_position_tensor(cfg, params, g)
        h = encode_longitudinal(params, g.tokens, pos, g.phoneme_ids, g.key_mask, training, rng)
        out = score(params, h, g.pool)
        S, U, K = out.shape
        rows.append(out.reshape(S * U, K)[g.valid])
    flat = rows[0] if len(rows) == 1 else nc.concat(rows, axis=0)
    if len(batch.groups) > 1 or not np.array_equal(batch.order, np.arange(batch.num_utterances)):
        inverse = np.empty_like(batch.order)
        inverse[batch.order] = np.arange(len(batch.order))
        flat = flat[inverse]
    y_hat = flat[:, 0]
    logits = flat[:, 1:]
    return ModelOutput(y_hat, logits, nc.softmax(logits), batch.utterance_keys)


def predict(params: AlstParams, sequences) -> ModelOutput:
    return forward(params, pack_batch(params.config, sequences))


# ---------------------------------------------------------------------------
# loss and readout
# ---------------------------------------------------------------------------


def alst_loss(outputs: ModelOutput, scores, lambda_ce: float) -> Tensor:
    """Mean over utterances of (y_hat - y)^2 + lambda_ce * (-log p_hat[y])."""
    scores = np.asarray(scores, dtype=np.int64)
    n = len(scores)
    if outputs.y_hat.shape != (n,):
        raise ContractError(f"{outputs.y_hat.shape[0]} outputs for {n} scores")
    if np.any((scores < 0) | (scores >= outputs.p_hat.shape[-1])):
        raise ContractError("scores must be class indices 0-4")
    target = scores.astype(outputs.y_hat.data.dtype)
    loss = nc.mean(nc.square(outputs.y_hat - target))
    if lambda_ce > 0:
        picked = outputs.p_hat[np.arange(n), scores]
        if np.any(picked.data < CE_FLOOR):
            warnings.warn(f"class probability below {CE_FLOOR} clamped in cross entropy", RuntimeWarning)
            picked = nc.clip_min(picked, CE_FLOOR)
        ce = nc.mean(nc.log(picked)) * -1.0
        loss = loss + ce * lambda_ce
    return loss


def predict_class(outputs, branch: str) -> np.ndarray:
    """Class labels from the regression (rounded score) or classification (argmax) branch."""
    if branch == "classification":
        probs = outputs.probs if isinstance(outputs, ModelOutput) else np.asarray(outputs)
        return np.argmax(probs, axis=-1)
    if branch == "regression":
        y = outputs.scores if isinstance(outputs, ModelOutput) else np.asarray(outputs, dtype=float)
        return np.clip(np.floor(y + 0.5), 0, 4).astype(np.int64)
    raise ContractError(f"unknown branch {branch!r}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: AlstParams, adam_state: Optional[nc.AdamState] = None,
                    rng_state: Optional[dict] = None, epoch: int = 0, extra: Optional[dict] = None) -> None:
    """Write a self-describing checkpoint.

    Layout: ``ALSTCKPT`` magic, u32 LE version, u64 LE header length, UTF-8
    JSON header, then float64 LE tensor payloads at the offsets the header lists.
    """
    entries, blobs, offset = [], [], 0

    def put(section, name, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"section": section, "name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, t in params.tensors.items():
        put("param", name, t.data)
    adam = None
    if adam_state is not None:
        adam = {"step_count": adam_state.step_count, "beta1": adam_state.beta1, "beta2": adam_state.beta2,
                "epsilon": adam_state.epsilon}
        for name, m, v in zip(params.tensors, adam_state.first_moment, adam_state.second_moment):
            put("adam_m", name, m)
            put("adam_v", name, v)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "epoch": epoch,
        "adam": adam,
        "rng_state": rng_state,
        "extra": extra or {},
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


@dataclass
class Checkpoint:
    params: AlstParams
    adam_state: Optional[nc.AdamState]
    rng_state: Optional[dict]
    epoch: int
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    base = start + hlen
    config = AlstConfig.from_dict(header["config"])
    dtype = nc.get_default_dtype()
    sections: dict = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in header["tensors"]:
        arr = np.frombuffer(raw, dtype="<f8", count=e["nbytes"] // 8, offset=base + e["offset"])
        sections[e["section"]][e["name"]] = arr.reshape(e["shape"]).astype(dtype)
    tensors = {n: Tensor(a, requires_grad=True, name=n) for n, a in sections["param"].items()}
    expected = parameter_shapes(config)
    if list(tensors) != list(expected) or any(tensors[n].shape != tuple(s) for n, s in expected.items()):
        raise DataError(f"{path}: tensors do not match the stored config")
    adam = None
    if header["adam"] is not None:
        a = header["adam"]
        adam = nc.AdamState(a["beta1"], a["beta2"], a["epsilon"], a["step_count"],
                            [sections["adam_m"][n] for n in tensors], [sections["adam_v"][n] for n in tensors])
    return Checkpoint(AlstParams(config, tensors), adam, header["rng_state"], header["epoch"], header["extra"])
