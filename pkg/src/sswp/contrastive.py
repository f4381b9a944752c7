"""Stage 1: contrastive pretraining of SSWP pairs."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import diffcore as dc
from .corpus import MASK_ID, SSWPUnit, UtteranceRecord, build_sswp_units, utterance_subwords
from .diffcore import Tensor
from .encoders import (AudioEncoderConfig, Params, TextEncoderConfig, audio_forward,
                       init_audio_encoder, init_text_encoder, linear, text_forward, text_hidden)

log = logging.getLogger(__name__)

TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 1.0
THETA = "temp.theta"


class BatchError(ValueError):
    pass


# ---------------------------------------------------------------- loss

def _diag_log_softmax_sum(logits: Tensor) -> Tensor:
    n = logits.shape[0]
    eye = np.eye(n, dtype=logits.dtype)
    return dc.sum_(dc.mul(dc.log_softmax(logits, axis=1), eye))


def similarity_logits(s: Tensor, t: Tensor, theta: Tensor) -> Tensor:
    """(S_i . T_j) / tau on L2-normalised rows; row i is audio unit i."""
    sn = dc.l2_normalize_rows(s)
    tn = dc.l2_normalize_rows(t)
    # built from both products so swapping S and T gives exactly the transpose
    st = dc.matmul(sn, dc.transpose(tn, (1, 0)))
    ts = dc.matmul(tn, dc.transpose(sn, (1, 0)))
    sim = dc.scale(dc.add(st, dc.transpose(ts, (1, 0))), 0.5)
    return dc.mul(sim, dc.exp(dc.scale(theta, -1.0)))


def contrastive_loss(s: Tensor, t: Tensor, theta: Tensor) -> Tensor:
    """Symmetric InfoNCE, to be minimised.

    loss = -(1/2n) sum_i [log softmax_j(S_i.T_j/tau)_i + log softmax_j(T_i.S_j/tau)_i]
    with tau = exp(theta).
    """
    if s.ndim != 2 or s.shape != t.shape:
        raise dc.ShapeError("contrastive_loss", f"S {s.shape} and T {t.shape} must be equal (n, d)")
    n = s.shape[0]
    if n == 0:
        raise dc.ShapeError("contrastive_loss", "empty batch")
    logits = similarity_logits(s, t, theta)
    both = dc.add(_diag_log_softmax_sum(logits), _diag_log_softmax_sum(dc.transpose(logits, (1, 0))))
    return dc.scale(both, -1.0 / (2 * n))


def retrieval_accuracy(logits: np.ndarray) -> float:
    """Fraction of rows whose highest-scoring column is their own pair."""
    return float(np.mean(np.argmax(logits, axis=1) == np.arange(len(logits))))


def clamp_temperature(theta: Tensor) -> None:
    np.clip(theta.data, math.log(TAU_MIN), math.log(TAU_MAX), out=theta.data)


# ---------------------------------------------------------------- batching

@dataclass
class PairBatch:
    units: list[SSWPUnit]
    seqs: list[np.ndarray]
    text_refs: list[tuple[int, int, int]]
    segments: list[np.ndarray]

    def keys(self) -> list[tuple[str, int]]:
        return [(u.utt_id, u.word_index) for u in self.units]


class UnitPool:
    """All SSWP units of a corpus with per-utterance subword sequences cached."""

    def __init__(self, corpus: Sequence[UtteranceRecord], sswp: bool = True):
        self.utts = {u.id: u for u in corpus}
        self.subwords = {u.id: utterance_subwords(u)[0] for u in corpus}
        self.units = [x for u in corpus for x in build_sswp_units(u, sswp)]

    def __len__(self):
        return len(self.units)

    def make_batch(self, idx: Sequence[int]) -> PairBatch:
        units = [self.units[i] for i in idx]
        keys = {(u.utt_id, u.word_index) for u in units}
        if len(keys) != len(units):
            raise BatchError("duplicate units in batch")
        order: dict[str, int] = {}
        refs = []
        for u in units:
            b = order.setdefault(u.utt_id, len(order))
            refs.append((b, *u.subword_range))
        seqs = [self.subwords[k] for k in order]
        segs = [self.utts[u.utt_id].frames[u.speech_span[0]:u.speech_span[1]] for u in units]
        return PairBatch(units, seqs, refs, segs)


def assemble_pair_batch(pool: UnitPool | Sequence[UtteranceRecord], batch_size: int,
                        rng: np.random.Generator) -> PairBatch:
    """Draw ``batch_size`` distinct units uniformly without replacement."""
    if not isinstance(pool, UnitPool):
        pool = UnitPool(pool)
    if batch_size > len(pool):
        raise BatchError(f"corpus has {len(pool)} units, fewer than batch_size={batch_size}; "
                         f"use a smaller batch")
    return pool.make_batch(rng.choice(len(pool), size=batch_size, replace=False))


def epoch_batches(pool: UnitPool, batch_size: int, rng: np.random.Generator):
    """One shuffled pass over all units in full batches (the remainder is dropped)."""
    if batch_size > len(pool):
        raise BatchError(f"corpus has {len(pool)} units, fewer than batch_size={batch_size}; "
                         f"use a smaller batch")
    perm = rng.permutation(len(pool))
    for i in range(len(pool) // batch_size):
        yield pool.make_batch(perm[i * batch_size:(i + 1) * batch_size])


# ---------------------------------------------------------------- model / checkpoint

@dataclass
class ModelConfig:
    vocab_size: int = 512
    feat_dim: int = 16
    d_model: int = 64
    d_joint: int = 64
    n_heads: int = 4
    text_layers: int = 2
    audio_layers: int = 2
    kernel: int = 7
    max_text_len: int = 128

    def text(self) -> TextEncoderConfig:
        return TextEncoderConfig(self.vocab_size, self.d_model, self.text_layers, self.n_heads,
                                 self.max_text_len, self.d_joint)

    def audio(self) -> AudioEncoderConfig:
        return AudioEncoderConfig(self.feat_dim, self.d_model, self.audio_layers, self.n_heads,
                                  self.kernel, self.d_joint)


@dataclass
class EncoderCheckpoint:
    model: ModelConfig
    params: Params

    def text_params(self) -> Params:
        return {k: v for k, v in self.params.items() if k.startswith("text.")}

    def audio_params(self) -> Params:
        return {k: v for k, v in self.params.items() if k.startswith("audio.")}

    def save(self, path) -> None:
        arrays = {k: v.data for k, v in self.params.items()}
        arrays["meta.config"] = ckpt.pack_text(json.dumps({"model": asdict(self.model)}, sort_keys=True))
        ckpt.save(path, arrays)

    @classmethod
    def load(cls, path) -> EncoderCheckpoint:
        arrays = ckpt.load(path)
        meta = json.loads(ckpt.unpack_text(arrays.pop("meta.config")))
        params = {k: dc.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        return cls(ModelConfig(**meta["model"]), params)


def init_encoders(model: ModelConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    p = init_text_encoder(model.text(), rng)
    p.update(init_audio_encoder(model.audio(), rng))
    p[THETA] = dc.parameter([math.log(TAU_INIT)], name=THETA)
    return p


def encode_batch(p: Params, model: ModelConfig, batch: PairBatch) -> tuple[Tensor, Tensor]:
    s = audio_forward(p, model.audio(), batch.segments)
    t = text_forward(p, model.text(), batch.seqs, batch.text_refs)
    return s, t


# ---------------------------------------------------------------- training

@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr0: float = 3e-3
    lr_min: float = 0.0
    seed: int = 0
    sswp: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    init_from: str | None = None
    checkpoint_out: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> PretrainConfig:
        mkeys = {f.name for f in fields(ModelConfig)}
        own = {f.name for f in fields(cls)} - {"model"}
        unknown = set(d) - mkeys - own - {"model"}
        if unknown:
            raise ValueError(f"unknown pretrain config keys: {sorted(unknown)}")
        model = ModelConfig(**{**d.get("model", {}), **{k: v for k, v in d.items() if k in mkeys}})
        return cls(model=model, **{k: v for k, v in d.items() if k in own})


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    retrieval_top1: float
    lr: float
    tau: float


def write_metrics_csv(path, rows: Sequence, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            d = asdict(r) if not isinstance(r, dict) else r
            w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in columns])


def pretrain(corpus: Sequence[UtteranceRecord], cfg: PretrainConfig,
             on_epoch: Callable[[EpochLog], None] | None = None
             ) -> tuple[EncoderCheckpoint, list[EpochLog]]:
    pool = UnitPool(corpus, sswp=cfg.sswp)
    if cfg.init_from:
        params = EncoderCheckpoint.load(cfg.init_from).params
    else:
        params = init_encoders(cfg.model, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    steps_per_epoch = len(pool) // cfg.batch_size
    if steps_per_epoch == 0:
        raise BatchError(f"corpus has {len(pool)} units, fewer than batch_size={cfg.batch_size}; "
                         f"use a smaller batch")
    total = cfg.epochs * steps_per_epoch
    state = dc.AdamState()
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses, accs = [], []
        lr = cfg.lr0
        for batch in epoch_batches(pool, cfg.batch_size, rng):
            lr = cosine_lr_at(step, total, cfg)
            s, t = encode_batch(params, cfg.model, batch)
            loss = contrastive_loss(s, t, params[THETA])
            value = float(loss.data[0])
            if not math.isfinite(value):
                raise dc.NumericAbort(f"non-finite contrastive loss at epoch {epoch}, step {step}")
            grads = dc.backward(loss, params)
            dc.adam_step(params, grads, state, lr)
            clamp_temperature(params[THETA])
            with dc.no_grad():
                accs.append(retrieval_accuracy(similarity_logits(s, t, params[THETA]).data))
            losses.append(value)
            step += 1
        rec = EpochLog(epoch, float(np.mean(losses)), float(np.mean(accs)), lr,
                       float(np.exp(params[THETA].data[0])))
        history.append(rec)
        log.info("pretrain epoch %d loss %.4f top1 %.3f tau %.4f", epoch, rec.mean_loss,
                 rec.retrieval_top1, rec.tau)
        if on_epoch:
            on_epoch(rec)
    result = EncoderCheckpoint(cfg.model, params)
    if cfg.checkpoint_out:
        result.save(cfg.checkpoint_out)
    return result, history


def cosine_lr_at(step: int, total: int, cfg) -> float:
    return dc.cosine_lr(step, total, cfg.lr0, cfg.lr_min)


def evaluate_retrieval(ckpt_: EncoderCheckpoint, corpus: Sequence[UtteranceRecord],
                       batch_size: int, seed: int = 0, sswp: bool = True) -> float:
    """Mean in-batch top-1 retrieval accuracy over one shuffled pass, no updates."""
    pool = UnitPool(corpus, sswp=sswp)
    rng = np.random.default_rng(seed)
    accs = []
    with dc.no_grad():
        for batch in epoch_batches(pool, batch_size, rng):
            s, t = encode_batch(ckpt_.params, ckpt_.model, batch)
            accs.append(retrieval_accuracy(similarity_logits(s, t, ckpt_.params[THETA]).data))
    return float(np.mean(accs))


# ---------------------------------------------------------------- masked-LM text init

def pretrain_text_mlm(corpus: Sequence[UtteranceRecord], model: ModelConfig, epochs: int = 10,
                      batch_size: int = 32, lr0: float = 1e-3, mask_prob: float = 0.15,
                      seed: int = 0) -> EncoderCheckpoint:
    """Masked-subword pretraining of the text encoder alone.

    Stands in for a generic pretrained text backbone: the audio half and the
    text pooling/projection come back freshly initialised.
    """
    params = init_encoders(model, seed)
    text_p = {k: v for k, v in params.items() if k.startswith("text.")}
    rng = np.random.default_rng(seed + 7)
    head = {"mlm.w": dc.parameter(rng.standard_normal((model.d_model, model.vocab_size))
                                  / math.sqrt(model.d_model), name="mlm.w"),
            "mlm.b": dc.parameter(np.zeros(model.vocab_size), name="mlm.b")}
    trainable = {**text_p, **head}
    seqs = [utterance_subwords(u)[0] for u in corpus]
    state = dc.AdamState()
    per_epoch = max(1, math.ceil(len(seqs) / batch_size))
    total = epochs * per_epoch
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(seqs))
        for i in range(per_epoch):
            chunk = [seqs[j] for j in order[i * batch_size:(i + 1) * batch_size]]
            masked, targets = [], []
            for b, s in enumerate(chunk):
                m = rng.random(len(s)) < mask_prob
                if not m.any():
                    m[rng.integers(len(s))] = True
                s2 = s.copy()
                s2[m] = MASK_ID
                masked.append(s2)
                targets.extend((b, t, s[t]) for t in np.flatnonzero(m))
            h, _ = text_hidden(params, model.text(), masked)
            bsz, slen, d = h.shape
            rows = np.array([b * slen + t for b, t, _ in targets])
            sel = dc.embedding(dc.reshape(h, (bsz * slen, d)), rows)
            logp = dc.log_softmax(linear(sel, head, "mlm"), axis=-1)
            onehot = np.zeros(logp.shape, dtype=logp.dtype)
            onehot[np.arange(len(targets)), [y for *_, y in targets]] = 1
            loss = dc.scale(dc.sum_(dc.mul(logp, onehot)), -1.0 / len(targets))
            grads = dc.backward(loss, trainable)
            dc.adam_step(trainable, grads, state, dc.cosine_lr(step, total, lr0, 0.0))
            step += 1
    return EncoderCheckpoint(model, params)
