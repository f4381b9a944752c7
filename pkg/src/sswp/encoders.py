"""Text (transformer + subword indexing) and audio (Conformer) SSWP encoders.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names
("text.block0.attn.wq", "audio.pool.v", ...), which is also the checkpoint
naming.  Both encoders end in attentive pooling and a linear projection into
the joint space.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

NEG_INF = -1e9


class EncoderInputError(ValueError):
    pass


@dataclass
class TextEncoderConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 128
    d_joint: int = 64


@dataclass
class AudioEncoderConfig:
    feat_dim: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    kernel: int = 7
    d_joint: int = 64
    max_len: int = 1024


Params = dict[str, Tensor]


# ---------------------------------------------------------------- init

def _dense(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)


def _init_ln(p, name, d):
    p[f"{name}.g"] = dc.parameter(np.ones(d), name=f"{name}.g")
    p[f"{name}.b"] = dc.parameter(np.zeros(d), name=f"{name}.b")


def _init_linear(p, rng, name, fan_in, fan_out):
    p[f"{name}.w"] = dc.parameter(_dense(rng, fan_in, fan_out), name=f"{name}.w")
    p[f"{name}.b"] = dc.parameter(np.zeros(fan_out), name=f"{name}.b")


def _init_attn(p, rng, name, d):
    for k in ("q", "k", "v", "o"):
        _init_linear(p, rng, f"{name}.{k}", d, d)


def _init_pool(p, rng, name, d):
    _init_linear(p, rng, f"{name}.att", d, d)
    p[f"{name}.v"] = dc.parameter(_dense(rng, d, 1), name=f"{name}.v")


def init_text_encoder(cfg: TextEncoderConfig, rng: np.random.Generator, prefix="text") -> Params:
    p: Params = {}
    d = cfg.d_model
    p[f"{prefix}.emb"] = dc.parameter(rng.standard_normal((cfg.vocab_size, d)) * 0.5)
    p[f"{prefix}.pos"] = dc.parameter(rng.standard_normal((cfg.max_len, d)) * 0.1)
    for i in range(cfg.n_layers):
        b = f"{prefix}.block{i}"
        _init_ln(p, f"{b}.ln1", d)
        _init_attn(p, rng, f"{b}.attn", d)
        _init_ln(p, f"{b}.ln2", d)
        _init_linear(p, rng, f"{b}.ffn1", d, 4 * d)
        _init_linear(p, rng, f"{b}.ffn2", 4 * d, d)
    _init_ln(p, f"{prefix}.ln_f", d)
    _init_pool(p, rng, f"{prefix}.pool", d)
    _init_linear(p, rng, f"{prefix}.proj", d, cfg.d_joint)
    for k, v in p.items():
        v.name = k
    return p


def _init_ffn(p, rng, name, d):
    _init_ln(p, f"{name}.ln", d)
    _init_linear(p, rng, f"{name}.l1", d, 4 * d)
    _init_linear(p, rng, f"{name}.l2", 4 * d, d)


def init_audio_encoder(cfg: AudioEncoderConfig, rng: np.random.Generator, prefix="audio") -> Params:
    p: Params = {}
    d = cfg.d_model
    _init_linear(p, rng, f"{prefix}.inp", cfg.feat_dim, d)
    for i in range(cfg.n_layers):
        b = f"{prefix}.block{i}"
        _init_ffn(p, rng, f"{b}.ffn1", d)
        _init_ln(p, f"{b}.ln_att", d)
        _init_attn(p, rng, f"{b}.attn", d)
        _init_ln(p, f"{b}.conv.ln", d)
        _init_linear(p, rng, f"{b}.conv.pw1", d, 2 * d)
        p[f"{b}.conv.dw.w"] = dc.parameter(rng.standard_normal((cfg.kernel, d)) / math.sqrt(cfg.kernel))
        p[f"{b}.conv.dw.b"] = dc.parameter(np.zeros(d))
        _init_ln(p, f"{b}.conv.ln2", d)
        _init_linear(p, rng, f"{b}.conv.pw2", d, d)
        _init_ffn(p, rng, f"{b}.ffn2", d)
        _init_ln(p, f"{b}.ln_out", d)
    _init_pool(p, rng, f"{prefix}.pool", d)
    _init_linear(p, rng, f"{prefix}.proj", d, cfg.d_joint)
    for k, v in p.items():
        v.name = k
    return p


# ---------------------------------------------------------------- building blocks

def linear(x: Tensor, p: Params, name: str) -> Tensor:
    return dc.add(dc.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def _ln(x, p, name):
    return dc.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def self_attention(x: Tensor, valid: np.ndarray, p: Params, name: str, n_heads: int) -> Tensor:
    """Multi-head self-attention over (B, T, d); keys at invalid positions are masked."""
    bsz, t, d = x.shape
    dh = d // n_heads

    def heads(z):
        return dc.transpose(dc.reshape(z, (bsz, t, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(x, p, f"{name}.q"))
    k = heads(linear(x, p, f"{name}.k"))
    v = heads(linear(x, p, f"{name}.v"))
    scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = dc.masked_fill(scores, ~valid[:, None, None, :], NEG_INF)
    att = dc.softmax(scores, axis=-1)
    out = dc.reshape(dc.transpose(dc.matmul(att, v), (0, 2, 1, 3)), (bsz, t, d))
    return linear(out, p, f"{name}.o")


def attentive_pool(h: Tensor, valid: np.ndarray, p: Params, name: str) -> Tensor:
    """Attention-weighted mean over time: (N, T, d) -> (N, d).

    alpha = softmax over valid t of v . tanh(W h_t + b).
    """
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != h.shape[:2]:
        raise EncoderInputError(f"mask shape {valid.shape} does not match {h.shape[:2]}")
    if not valid.any(axis=1).all():
        raise EncoderInputError("attentive pooling needs at least one valid step per row")
    n, t, d = h.shape
    h = dc.masked_fill(h, ~valid[:, :, None], 0.0)
    scores = dc.matmul(dc.tanh(linear(h, p, f"{name}.att")), p[f"{name}.v"])
    scores = dc.masked_fill(dc.reshape(scores, (n, t)), ~valid, NEG_INF)
    alpha = dc.softmax(scores, axis=-1)
    return dc.reshape(dc.matmul(dc.reshape(alpha, (n, 1, t)), h), (n, d))


def pool_weights(h: Tensor, valid: np.ndarray, p: Params, name: str) -> np.ndarray:
    """The pooling weights alone (no graph); for inspection and tests."""
    with dc.no_grad():
        n, t, _ = h.shape
        hz = dc.masked_fill(h, ~valid[:, :, None], 0.0)
        scores = dc.matmul(dc.tanh(linear(hz, p, f"{name}.att")), p[f"{name}.v"])
        scores = dc.masked_fill(dc.reshape(scores, (n, t)), ~valid, NEG_INF)
        return dc.softmax(scores, axis=-1).data


def _ffn(x, p, name, act=dc.swish):
    return linear(act(linear(x, p, f"{name}1")), p, f"{name}2")


def _pad_batch(seqs: Sequence[np.ndarray], fill=0):
    lens = np.array([len(s) for s in seqs])
    t = int(lens.max())
    shape = (len(seqs), t) + np.shape(seqs[0])[1:]
    out = np.full(shape, fill, dtype=np.asarray(seqs[0]).dtype)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    valid = np.arange(t)[None, :] < lens[:, None]
    return out, valid


# ---------------------------------------------------------------- text encoder

def text_hidden(p: Params, cfg: TextEncoderConfig, seqs: Sequence[np.ndarray],
                prefix="text") -> tuple[Tensor, np.ndarray]:
    """Contextual subword states for a batch of whole utterances: (B, S, d) and validity mask."""
    if not seqs or any(len(s) == 0 for s in seqs):
        raise EncoderInputError("empty subword sequence")
    ids, valid = _pad_batch([np.asarray(s, dtype=np.int64) for s in seqs])
    bsz, s = ids.shape
    if s > cfg.max_len:
        raise EncoderInputError(f"sequence of {s} subwords exceeds max_len {cfg.max_len}")
    x = dc.add(dc.embedding(p[f"{prefix}.emb"], ids), dc.slice_(p[f"{prefix}.pos"], slice(0, s)))
    for i in range(cfg.n_layers):
        b = f"{prefix}.block{i}"
        x = dc.add(x, self_attention(_ln(x, p, f"{b}.ln1"), valid, p, f"{b}.attn", cfg.n_heads))
        x = dc.add(x, _ffn(_ln(x, p, f"{b}.ln2"), p, f"{b}.ffn"))
    return _ln(x, p, f"{prefix}.ln_f"), valid


def _gather_spans(h: Tensor, refs: Sequence[tuple[int, int, int]]):
    """Select rows [j, k) of sequence b for every (b, j, k); returns (U, L, d) + mask."""
    bsz, s, d = h.shape
    lens = np.array([k - j for _, j, k in refs])
    width = int(lens.max())
    idx = np.zeros((len(refs), width), dtype=np.int64)
    for u, (b, j, k) in enumerate(refs):
        idx[u, :k - j] = b * s + np.arange(j, k)
    valid = np.arange(width)[None, :] < lens[:, None]
    return dc.embedding(dc.reshape(h, (bsz * s, d)), idx), valid


def text_forward(p: Params, cfg: TextEncoderConfig, seqs: Sequence[np.ndarray],
                 refs: Sequence[tuple[int, int, int]], prefix="text") -> Tensor:
    """Joint-space text embeddings for units ``refs`` = [(seq_index, j, k), ...]."""
    for b, j, k in refs:
        if not 0 <= b < len(seqs):
            raise EncoderInputError(f"unit refers to sequence {b} of {len(seqs)}")
        if j >= k or j < 0 or k > len(seqs[b]):
            raise EncoderInputError(f"invalid subword range ({j}, {k}) for length {len(seqs[b])}")
    h, _ = text_hidden(p, cfg, seqs, prefix)
    g, valid = _gather_spans(h, refs)
    return linear(attentive_pool(g, valid, p, f"{prefix}.pool"), p, f"{prefix}.proj")


def encode_text(p: Params, cfg: TextEncoderConfig, subword_ids: np.ndarray,
                ranges: Sequence[tuple[int, int]], prefix="text") -> Tensor:
    """Encode one utterance once, then pool each requested (j, k) subword range."""
    return text_forward(p, cfg, [subword_ids], [(0, j, k) for j, k in ranges], prefix)


# ---------------------------------------------------------------- audio encoder

def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang[:, : d // 2])
    return out


def conformer_block(x: Tensor, valid: np.ndarray, p: Params, b: str, cfg: AudioEncoderConfig) -> Tensor:
    x = dc.add(x, dc.scale(_ffn(_ln(x, p, f"{b}.ffn1.ln"), p, f"{b}.ffn1.l"), 0.5))
    x = dc.add(x, self_attention(_ln(x, p, f"{b}.ln_att"), valid, p, f"{b}.attn", cfg.n_heads))
    c = linear(_ln(x, p, f"{b}.conv.ln"), p, f"{b}.conv.pw1")
    d = cfg.d_model
    c = dc.mul(dc.slice_(c, (Ellipsis, slice(0, d))), dc.sigmoid(dc.slice_(c, (Ellipsis, slice(d, 2 * d)))))
    # zero padded frames so the same-padded conv sees exactly what an unpadded span would
    c = dc.masked_fill(c, ~valid[:, :, None], 0.0)
    c = dc.depthwise_conv1d(c, p[f"{b}.conv.dw.w"], p[f"{b}.conv.dw.b"])
    c = linear(dc.swish(_ln(c, p, f"{b}.conv.ln2")), p, f"{b}.conv.pw2")
    x = dc.add(x, c)
    x = dc.add(x, dc.scale(_ffn(_ln(x, p, f"{b}.ffn2.ln"), p, f"{b}.ffn2.l"), 0.5))
    return _ln(x, p, f"{b}.ln_out")


def audio_hidden(p: Params, cfg: AudioEncoderConfig, segments: Sequence[np.ndarray],
                 prefix="audio") -> tuple[Tensor, np.ndarray]:
    if not segments or any(len(s) == 0 for s in segments):
        raise EncoderInputError("audio span must contain at least one frame")
    dtype = p[f"{prefix}.inp.w"].dtype
    feats, valid = _pad_batch([np.asarray(s, dtype=dtype) for s in segments])
    t = feats.shape[1]
    if t > cfg.max_len:
        raise EncoderInputError(f"span of {t} frames exceeds max_len {cfg.max_len}")
    x = linear(dc.Tensor(feats), p, f"{prefix}.inp")
    x = dc.add(x, dc.Tensor(sinusoid_table(t, cfg.d_model).astype(dtype)))
    for i in range(cfg.n_layers):
        x = conformer_block(x, valid, p, f"{prefix}.block{i}", cfg)
    return x, valid


def audio_forward(p: Params, cfg: AudioEncoderConfig, segments: Sequence[np.ndarray],
                  prefix="audio") -> Tensor:
    """Joint-space embeddings for independently encoded frame segments."""
    h, valid = audio_hidden(p, cfg, segments, prefix)
    return linear(attentive_pool(h, valid, p, f"{prefix}.pool"), p, f"{prefix}.proj")


def encode_audio(p: Params, cfg: AudioEncoderConfig, frames: np.ndarray,
                 spans: Sequence[tuple[int, int]], prefix="audio") -> Tensor:
    for s, e in spans:
        if e <= s:
            raise EncoderInputError(f"empty audio span ({s}, {e})")
        if s < 0 or e > len(frames):
            raise EncoderInputError(f"span ({s}, {e}) outside {len(frames)} frames")
    return audio_forward(p, cfg, [frames[s:e] for s, e in spans], prefix)


def config_dict(cfg) -> dict:
    return asdict(cfg)
