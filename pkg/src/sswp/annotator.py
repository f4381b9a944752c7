"""Stage 2: multimodal prosodic-boundary annotator.

Per-unit text and audio embeddings are summed, run through a single-layer
bi-LSTM and a linear layer, and classified into the four boundary levels.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import diffcore as dc
from .contrastive import THETA, EncoderCheckpoint, ModelConfig, init_encoders
from .corpus import NUM_LEVELS, BoundaryLevel, UtteranceRecord, build_sswp_units, utterance_subwords
from .diffcore import Tensor
from .encoders import Params, audio_forward, linear, text_forward
from .metrics import MetricsReport, evaluate

log = logging.getLogger(__name__)

HEAD_PREFIXES = ("lstm.", "out.")


@dataclass
class AnnotatorConfig:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    lr_head: float = 3e-3
    lr_min: float = 0.0
    seed: int = 0
    hidden: int = 128
    use_bilstm: bool = True
    freeze_encoders: bool = False
    sswp: bool = True
    text_only: bool = False
    class_weights: list[float] | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def from_dict(cls, d: dict) -> AnnotatorConfig:
        mkeys = {f.name for f in fields(ModelConfig)}
        own = {f.name for f in fields(cls)} - {"model"}
        unknown = set(d) - mkeys - own - {"model"}
        if unknown:
            raise ValueError(f"unknown annotator config keys: {sorted(unknown)}")
        model = ModelConfig(**{**d.get("model", {}), **{k: v for k, v in d.items() if k in mkeys}})
        return cls(model=model, **{k: v for k, v in d.items() if k in own})


# ---------------------------------------------------------------- parameters

def init_annotator(cfg: AnnotatorConfig, seed: int) -> Params:
    p = init_encoders(cfg.model, seed)
    del p[THETA]
    rng = np.random.default_rng(seed + 101)
    d, h = cfg.model.d_joint, cfg.hidden
    if cfg.use_bilstm:
        for direction in ("fwd", "bwd"):
            n = f"lstm.{direction}"
            p[f"{n}.wx"] = dc.parameter(rng.standard_normal((d, 4 * h)) / math.sqrt(d))
            p[f"{n}.wh"] = dc.parameter(rng.standard_normal((h, 4 * h)) / math.sqrt(h))
            bias = np.zeros(4 * h)
            bias[h:2 * h] = 1.0  # forget gate
            p[f"{n}.b"] = dc.parameter(bias)
        fan_in = 2 * h
    else:
        fan_in = d
    p["out.w"] = dc.parameter(rng.standard_normal((fan_in, NUM_LEVELS)) / math.sqrt(fan_in))
    p["out.b"] = dc.parameter(np.zeros(NUM_LEVELS))
    for k, v in p.items():
        v.name = k
    return p


def load_encoder_weights(p: Params, source: EncoderCheckpoint,
                         prefixes: Sequence[str] = ("text.", "audio.")) -> None:
    """Copy encoder tensors from a stage-1 checkpoint, refusing any name/shape mismatch."""
    problems = []
    for name, t in source.params.items():
        if not name.startswith(tuple(prefixes)):
            continue
        if name not in p:
            problems.append(f"{name}: not in annotator")
        elif p[name].shape != t.shape:
            problems.append(f"{name}: checkpoint {t.shape} vs model {p[name].shape}")
    for name in p:
        if name.startswith(tuple(prefixes)) and name not in source.params:
            problems.append(f"{name}: missing from checkpoint")
    if problems:
        raise ckpt.IncompatibleCheckpoint(problems)
    for name, t in source.params.items():
        if name.startswith(tuple(prefixes)):
            p[name].data = np.array(t.data, dtype=p[name].dtype)


# ---------------------------------------------------------------- forward

def fuse(t: Tensor, s: Tensor) -> Tensor:
    """e_i = t_i + s_i."""
    if t.shape != s.shape:
        raise dc.ShapeError("fuse", f"text {t.shape} and audio {s.shape} embeddings differ")
    return dc.add(t, s)


def _lstm(x: Tensor, p: Params, name: str) -> Tensor:
    bsz, m, _ = x.shape
    h_dim = p[f"{name}.wh"].shape[0]
    xw = dc.add(dc.matmul(x, p[f"{name}.wx"]), p[f"{name}.b"])
    zeros = np.zeros((bsz, h_dim), dtype=x.dtype)
    h, c = dc.Tensor(zeros), dc.Tensor(zeros)
    outs = []
    for step in range(m):
        g = dc.add(dc.slice_(xw, (slice(None), step, slice(None))), dc.matmul(h, p[f"{name}.wh"]))
        sg = dc.sigmoid(g)
        i = dc.slice_(sg, (slice(None), slice(0, h_dim)))
        f = dc.slice_(sg, (slice(None), slice(h_dim, 2 * h_dim)))
        o = dc.slice_(sg, (slice(None), slice(3 * h_dim, 4 * h_dim)))
        cand = dc.tanh(dc.slice_(g, (slice(None), slice(2 * h_dim, 3 * h_dim))))
        c = dc.add(dc.mul(f, c), dc.mul(i, cand))
        h = dc.mul(o, dc.tanh(c))
        outs.append(dc.reshape(h, (bsz, 1, h_dim)))
    return dc.concat(outs, axis=1)


def _reverse_index(lengths: np.ndarray, m: int) -> np.ndarray:
    idx = np.tile(np.arange(m), (len(lengths), 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n)[::-1]
    return idx + (np.arange(len(lengths)) * m)[:, None]


def _gather_time(x: Tensor, idx: np.ndarray) -> Tensor:
    bsz, m, d = x.shape
    return dc.embedding(dc.reshape(x, (bsz * m, d)), idx)


def bilstm(x: Tensor, lengths: np.ndarray, p: Params) -> Tensor:
    """Concatenated forward/backward hidden states; each row is reversed within its own length."""
    rev = _reverse_index(lengths, x.shape[1])
    fwd = _lstm(x, p, "lstm.fwd")
    bwd = _gather_time(_lstm(_gather_time(x, rev), p, "lstm.bwd"), rev)
    return dc.concat([fwd, bwd], axis=-1)


def head_logits(p: Params, cfg: AnnotatorConfig, e: Tensor, lengths: np.ndarray) -> Tensor:
    """(B, M, d_joint) fused embeddings -> (B, M, 4) logits."""
    z = bilstm(e, lengths, p) if cfg.use_bilstm else e
    return linear(z, p, "out")


def sequence_logits(p: Params, cfg: AnnotatorConfig, seqs: Sequence[np.ndarray],
                    ranges: Sequence[Sequence[tuple[int, int]]],
                    segments: Sequence[Sequence[np.ndarray]]) -> tuple[Tensor, np.ndarray]:
    """Logits (B, M, 4) for a batch of utterances, plus the (B, M) validity mask."""
    refs = [(b, j, k) for b, rs in enumerate(ranges) for j, k in rs]
    t = text_forward(p, cfg.model.text(), seqs, refs)
    if cfg.text_only:
        e = t
    else:
        s = audio_forward(p, cfg.model.audio(), [seg for segs in segments for seg in segs])
        e = fuse(t, s)
    lengths = np.array([len(rs) for rs in ranges])
    m = int(lengths.max())
    n_units = len(refs)
    # scatter units into a padded (B, M) grid; padding points at an appended zero row
    idx = np.full((len(ranges), m), n_units, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    for b, n in enumerate(lengths):
        idx[b, :n] = offsets[b] + np.arange(n)
    padded = dc.concat([e, dc.Tensor(np.zeros((1, e.shape[1]), dtype=e.dtype))], axis=0)
    grid = dc.embedding(padded, idx)
    valid = np.arange(m)[None, :] < lengths[:, None]
    return head_logits(p, cfg, grid, lengths), valid


def classify_sequence(p: Params, cfg: AnnotatorConfig, e: Tensor) -> np.ndarray:
    """Fused sequence (m, d) -> (m, 4) boundary-level probabilities."""
    if e.ndim != 2 or e.shape[0] < 1:
        raise dc.ShapeError("classify_sequence", f"expected (m, d) with m >= 1, got {e.shape}")
    m = e.shape[0]
    with dc.no_grad():
        logits = head_logits(p, cfg, dc.reshape(e, (1, m, e.shape[1])), np.array([m]))
        return dc.softmax(dc.reshape(logits, (m, NUM_LEVELS)), axis=-1).data


# ---------------------------------------------------------------- losses

def _check_labels(gold) -> np.ndarray:
    gold = np.asarray(gold)
    if gold.size and (gold.min() < 0 or gold.max() >= NUM_LEVELS):
        raise ValueError(f"label out of range 0-{NUM_LEVELS - 1}: {gold.tolist()}")
    return gold.astype(np.int64)


def ce_loss(probs: Tensor, gold, weights=None) -> Tensor:
    """Mean over positions of -w[gold] * log p(gold), from probabilities (m, 4)."""
    gold = _check_labels(gold)
    m = probs.shape[0]
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    onehot[np.arange(m), gold] = 1
    p_gold = dc.sum_(dc.mul(probs, onehot), axis=-1)
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)[gold]
    return dc.scale(dc.sum_(dc.mul(dc.log(p_gold), w.astype(probs.dtype))), -1.0 / m)


def sequence_ce(logits: Tensor, gold: Sequence[np.ndarray], valid: np.ndarray, weights=None) -> Tensor:
    """Padded-batch version of :func:`ce_loss` working from logits, averaged over real positions."""
    bsz, m, c = logits.shape
    target = np.zeros((bsz, m, c), dtype=logits.dtype)
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    for b, g in enumerate(gold):
        g = _check_labels(g)
        target[b, np.arange(len(g)), g] = w[g]
    target[~valid] = 0
    total = dc.sum_(dc.mul(dc.log_softmax(logits, axis=-1), target))
    return dc.scale(total, -1.0 / int(valid.sum()))


# ---------------------------------------------------------------- data plumbing

@dataclass
class _Prepared:
    seq: np.ndarray
    ranges: list[tuple[int, int]]
    segments: list[np.ndarray]
    labels: np.ndarray


def prepare(utt: UtteranceRecord, sswp: bool = True) -> _Prepared:
    units = build_sswp_units(utt, sswp=sswp)
    seq, _ = utterance_subwords(utt)
    segs = [utt.frames[u.speech_span[0]:u.speech_span[1]] for u in units]
    return _Prepared(seq, [u.subword_range for u in units], segs,
                     np.asarray(utt.labels, dtype=np.int64))


def _batch_logits(p, cfg, items: Sequence[_Prepared]):
    return sequence_logits(p, cfg, [x.seq for x in items], [x.ranges for x in items],
                           [x.segments for x in items])


def predict_prepared(p: Params, cfg: AnnotatorConfig, items: Sequence[_Prepared],
                     batch_size: int = 32) -> list[np.ndarray]:
    out = []
    with dc.no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            logits, _ = _batch_logits(p, cfg, chunk)
            # np.argmax takes the first maximum, i.e. ties go to the lower level
            pred = np.argmax(logits.data, axis=-1)
            out.extend(pred[b, :len(x.ranges)] for b, x in enumerate(chunk))
    return out


# ---------------------------------------------------------------- checkpoint

@dataclass
class AnnotatorCheckpoint:
    config: AnnotatorConfig
    params: Params

    def save(self, path) -> None:
        arrays = {k: v.data for k, v in self.params.items()}
        arrays["meta.config"] = ckpt.pack_text(json.dumps(asdict(self.config), sort_keys=True))
        ckpt.save(path, arrays)

    @classmethod
    def load(cls, path) -> AnnotatorCheckpoint:
        arrays = ckpt.load(path)
        if "meta.config" not in arrays:
            raise ckpt.CheckpointError("annotator checkpoint lacks meta.config")
        cfg = AnnotatorConfig.from_dict(json.loads(ckpt.unpack_text(arrays.pop("meta.config"))))
        return cls(cfg, {k: dc.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})

    def predict(self, utts: Sequence[UtteranceRecord]) -> list[np.ndarray]:
        for u in utts:
            u.validate(require_labels=False)
        items = [prepare(u.without_labels(), self.config.sswp) for u in utts]
        return predict_prepared(self.params, self.config, items)


def annotate(checkpoint: AnnotatorCheckpoint, utt: UtteranceRecord) -> list[BoundaryLevel]:
    return [BoundaryLevel(int(x)) for x in checkpoint.predict([utt])[0]]


# ---------------------------------------------------------------- training

@dataclass
class AnnotatorEpochLog:
    epoch: int
    train_loss: float
    valid_macro_f1: float
    valid_pw_f1: float
    valid_pph_f1: float
    valid_iph_f1: float
    lr: float


@dataclass
class TrainResult:
    checkpoint: AnnotatorCheckpoint
    history: list[AnnotatorEpochLog]
    best_epoch: int
    best_valid: MetricsReport


def _snapshot(p: Params) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in p.items()}


def train_annotator(train: Sequence[UtteranceRecord], valid: Sequence[UtteranceRecord],
                    cfg: AnnotatorConfig, pretrained: EncoderCheckpoint | None = None,
                    pretrained_prefixes: Sequence[str] = ("text.", "audio."),
                    on_epoch: Callable[[AnnotatorEpochLog], None] | None = None) -> TrainResult:
    """Train end to end; keeps the parameters with the best validation macro-F1."""
    cfg = copy.deepcopy(cfg)
    p = init_annotator(cfg, cfg.seed)
    if pretrained is not None:
        if pretrained.model != cfg.model:
            diffs = [f"meta.config.{f.name}: checkpoint {getattr(pretrained.model, f.name)} vs "
                     f"model {getattr(cfg.model, f.name)}" for f in fields(ModelConfig)
                     if getattr(pretrained.model, f.name) != getattr(cfg.model, f.name)]
            raise ckpt.IncompatibleCheckpoint(diffs)
        load_encoder_weights(p, pretrained, pretrained_prefixes)
    if cfg.text_only:
        p = {k: v for k, v in p.items() if not k.startswith("audio.")}

    train_items = [prepare(u, cfg.sswp) for u in train]
    valid_items = [prepare(u, cfg.sswp) for u in valid]
    valid_gold = [x.labels for x in valid_items]
    head = {k for k in p if k.startswith(HEAD_PREFIXES)}
    trainable = p if not cfg.freeze_encoders else {k: p[k] for k in head}

    rng = np.random.default_rng(cfg.seed + 2)
    per_epoch = math.ceil(len(train_items) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    state = dc.AdamState()
    history: list[AnnotatorEpochLog] = []
    best = (-1.0, 0, _snapshot(p), None)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_items))
        losses = []
        for i in range(per_epoch):
            chunk = [train_items[j] for j in order[i * cfg.batch_size:(i + 1) * cfg.batch_size]]
            frac = dc.cosine_lr(step, total, 1.0, 0.0)
            lr_enc = cfg.lr_min + (cfg.lr - cfg.lr_min) * frac
            lr_head = cfg.lr_min + (cfg.lr_head - cfg.lr_min) * frac
            logits, valid_mask = _batch_logits(p, cfg, chunk)
            loss = sequence_ce(logits, [x.labels for x in chunk], valid_mask, cfg.class_weights)
            value = float(loss.data[0])
            if not math.isfinite(value):
                raise dc.NumericAbort(f"non-finite CE loss at epoch {epoch}, step {step}")
            grads = dc.backward(loss, trainable)
            rates = {k: (lr_head if k in head else lr_enc) for k in trainable}
            dc.adam_step(trainable, grads, state, rates)
            losses.append(value)
            step += 1
        report = evaluate(predict_prepared(p, cfg, valid_items), valid_gold)
        rec = AnnotatorEpochLog(epoch, float(np.mean(losses)), report.macro_f1,
                                report.f1("PW"), report.f1("PPH"), report.f1("IPH"), lr_head)
        history.append(rec)
        log.info("annotator epoch %d loss %.4f valid macro-F1 %.4f", epoch, rec.train_loss,
                 rec.valid_macro_f1)
        if on_epoch:
            on_epoch(rec)
        if report.macro_f1 > best[0]:
            best = (report.macro_f1, epoch, _snapshot(p), report)
    _, best_epoch, snap, best_report = best
    for k, v in p.items():
        v.data = snap[k]
    return TrainResult(AnnotatorCheckpoint(cfg, p), history, best_epoch, best_report)
