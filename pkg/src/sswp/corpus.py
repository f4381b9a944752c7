"""Aligned prosody corpora: data model, SSWP units, synthetic generator, file I/O."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

PAD_ID = 0
MASK_ID = 1
PUNCT_IDS = {",": 2, ".": 3, "?": 4, "!": 5, ";": 6, ":": 7}
FIRST_WORD_ID = 8

FEAT_MAGIC = b"SSWF"
FEAT_VERSION = 1


class BoundaryLevel(IntEnum):
    LW = 0
    PW = 1
    PPH = 2
    IPH = 3


NUM_LEVELS = len(BoundaryLevel)


class CorpusError(ValueError):
    pass


class CorpusValidationError(CorpusError):
    def __init__(self, utt_id: str, msg: str):
        super().__init__(f"utterance {utt_id!r}: {msg}")
        self.utt_id = utt_id


class CorpusFormatError(CorpusError):
    pass


@dataclass(frozen=True)
class WordToken:
    text: str
    punct: str | None
    subword_ids: tuple[int, ...]
    frame_start: int
    frame_end: int


@dataclass(frozen=True, eq=False)
class UtteranceRecord:
    id: str
    words: tuple[WordToken, ...]
    frames: np.ndarray
    labels: tuple[int, ...] = ()

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, UtteranceRecord):
            return NotImplemented
        return (self.id == other.id and self.words == other.words
                and self.labels == other.labels
                and self.frames.dtype == other.frames.dtype
                and self.frames.shape == other.frames.shape
                and self.frames.tobytes() == other.frames.tobytes())

    def __hash__(self):
        return hash(self.id)

    def without_labels(self) -> UtteranceRecord:
        return UtteranceRecord(self.id, self.words, self.frames, ())

    def validate(self, require_labels: bool = True) -> None:
        if not self.words:
            raise CorpusValidationError(self.id, "no words")
        if self.frames.ndim != 2:
            raise CorpusValidationError(self.id, f"frames must be 2-D, got {self.frames.shape}")
        prev_end = None
        for i, w in enumerate(self.words):
            if not w.subword_ids:
                raise CorpusValidationError(self.id, f"word {i} has no subword ids")
            if w.frame_start >= w.frame_end:
                raise CorpusValidationError(
                    self.id, f"word {i} has empty span [{w.frame_start}, {w.frame_end})")
            if w.frame_start < 0 or w.frame_end > self.num_frames:
                raise CorpusValidationError(
                    self.id, f"word {i} span [{w.frame_start}, {w.frame_end}) outside "
                    f"{self.num_frames} frames")
            if prev_end is not None and w.frame_start < prev_end:
                raise CorpusValidationError(
                    self.id, f"word {i} starts at {w.frame_start}, overlapping previous word "
                    f"ending at {prev_end}")
            if w.punct is not None and w.punct not in PUNCT_IDS:
                raise CorpusValidationError(self.id, f"word {i} has unknown punctuation {w.punct!r}")
            prev_end = w.frame_end
        if require_labels or self.labels:
            if len(self.labels) != len(self.words):
                raise CorpusValidationError(
                    self.id, f"{len(self.labels)} labels for {len(self.words)} words")
            if any(not 0 <= lab < NUM_LEVELS for lab in self.labels):
                raise CorpusValidationError(self.id, f"label out of range in {self.labels}")
            if self.labels[-1] != BoundaryLevel.IPH:
                raise CorpusValidationError(self.id, "final juncture must be IPH")


@dataclass(frozen=True)
class SSWPUnit:
    """One word(+punctuation) text span paired with its speech(+silence) frame span."""

    utt_id: str
    word_index: int
    text: str
    subword_range: tuple[int, int]
    speech_span: tuple[int, int]
    word_end: int
    label: int | None

    @property
    def silence_frames(self) -> int:
        return self.speech_span[1] - self.word_end


def utterance_subwords(utt: UtteranceRecord, with_punct: bool = True):
    """Flattened subword sequence of the utterance plus each word's (j, k) range.

    With ``with_punct`` the range covers the punctuation id too.
    """
    ids: list[int] = []
    ranges = []
    for w in utt.words:
        j = len(ids)
        ids.extend(w.subword_ids)
        k_word = len(ids)
        if w.punct is not None:
            ids.append(PUNCT_IDS[w.punct])
        ranges.append((j, len(ids) if with_punct else k_word))
    return np.asarray(ids, dtype=np.int64), ranges


def build_sswp_units(utt: UtteranceRecord, sswp: bool = True) -> list[SSWPUnit]:
    """One unit per word: punctuation and the following silence go to the preceding word.

    ``sswp=False`` gives plain word units (no punctuation, no trailing silence),
    the pairing used by the word-only ablation.
    """
    utt.validate(require_labels=False)
    _, ranges = utterance_subwords(utt, with_punct=sswp)
    units = []
    n = len(utt.words)
    for i, w in enumerate(utt.words):
        if sswp:
            end = utt.words[i + 1].frame_start if i + 1 < n else utt.num_frames
            text = w.text + (w.punct or "")
        else:
            end = w.frame_end
            text = w.text
        label = utt.labels[i] if utt.labels else None
        units.append(SSWPUnit(utt.id, i, text, ranges[i], (w.frame_start, end), w.frame_end, label))
    return units


# ---------------------------------------------------------------- generator

@dataclass
class GeneratorConfig:
    seed: int = 0
    num_utterances: int = 260
    vocab_size: int = 1000
    subword_vocab_size: int = 512
    feat_dim: int = 16
    words_per_pw: tuple[int, int] = (1, 3)
    pws_per_pph: tuple[int, int] = (1, 3)
    pphs_per_sentence: tuple[int, int] = (1, 3)
    word_frames: tuple[int, int] = (5, 15)
    silence_lw: tuple[int, int] = (0, 0)
    silence_pw: tuple[int, int] = (0, 1)
    silence_pph: tuple[int, int] = (2, 6)
    silence_iph: tuple[int, int] = (8, 15)
    leading_silence: tuple[int, int] = (0, 3)
    comma_prob: float = 0.7
    noise_sigma: float = 0.1
    pitch_start: float = 1.0
    pitch_end: float = 0.2

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise CorpusError(f"unknown generator config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def silence_range(self, level: int) -> tuple[int, int]:
        return (self.silence_lw, self.silence_pw, self.silence_pph, self.silence_iph)[level]

    def validate(self) -> None:
        if self.num_utterances < 1:
            raise CorpusError("num_utterances must be >= 1")
        if self.vocab_size < 1 or self.feat_dim < 2:
            raise CorpusError("vocab_size must be >= 1 and feat_dim >= 2")
        if self.subword_vocab_size <= FIRST_WORD_ID:
            raise CorpusError(f"subword_vocab_size must exceed {FIRST_WORD_ID}")
        for name in ("words_per_pw", "pws_per_pph", "pphs_per_sentence", "word_frames",
                     "silence_lw", "silence_pw", "silence_pph", "silence_iph", "leading_silence"):
            lo, hi = getattr(self, name)
            if lo < 0 or lo > hi:
                raise CorpusError(f"{name}: invalid range ({lo}, {hi})")
        for name in ("words_per_pw", "pws_per_pph", "pphs_per_sentence", "word_frames"):
            if getattr(self, name)[0] < 1:
                raise CorpusError(f"{name}: lower bound must be >= 1")
        if self.silence_pph[0] <= self.silence_lw[1]:
            raise CorpusError("PPH silence range must lie above the LW range")
        if not 0.0 <= self.comma_prob <= 1.0:
            raise CorpusError("comma_prob must be in [0, 1]")
        if self.noise_sigma < 0:
            raise CorpusError("noise_sigma must be >= 0")


_ONSETS = "b d f g h j k l m n p r s t v w z ch sh th".split()
_NUCLEI = ["a", "e", "i", "o", "u"]


def word_text(vocab_id: int) -> str:
    syl = [o + n for n in _NUCLEI for o in _ONSETS]
    digits = []
    v = vocab_id
    while True:
        digits.append(v % len(syl))
        v //= len(syl)
        if v == 0:
            break
    while len(digits) < 2:
        digits.append((vocab_id * 7 + 3) % len(syl))
    return "".join(syl[d] for d in digits)


def _digest(*parts) -> int:
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def word_subwords(text: str, subword_vocab_size: int) -> tuple[int, ...]:
    n = 1 + _digest(text, "n") % 3
    span = subword_vocab_size - FIRST_WORD_ID
    return tuple(FIRST_WORD_ID + _digest(text, k) % span for k in range(n))


def subword_vector(subword_id: int, dim: int) -> np.ndarray:
    return np.random.default_rng([0x5357, subword_id]).standard_normal(dim)


def identity_vector(subword_ids: Sequence[int], dim: int) -> np.ndarray:
    """Acoustic identity of a word: its subword vectors summed, rescaled to unit variance."""
    v = sum(subword_vector(s, dim) for s in subword_ids)
    return v / np.sqrt(len(subword_ids))


def _grammar(rng, cfg: GeneratorConfig) -> list[int]:
    """Labels of one sentence built PPH -> PW -> word; the final juncture is IPH."""
    labels = []
    for _ in range(rng.integers(cfg.pphs_per_sentence[0], cfg.pphs_per_sentence[1] + 1)):
        for _ in range(rng.integers(cfg.pws_per_pph[0], cfg.pws_per_pph[1] + 1)):
            n = rng.integers(cfg.words_per_pw[0], cfg.words_per_pw[1] + 1)
            labels.extend([BoundaryLevel.LW] * (n - 1) + [BoundaryLevel.PW])
        labels[-1] = BoundaryLevel.PPH
    labels[-1] = BoundaryLevel.IPH
    return [int(x) for x in labels]


def _generate_one(rng, cfg: GeneratorConfig, utt_id: str) -> UtteranceRecord:
    labels = _grammar(rng, cfg)
    vocab = rng.integers(0, cfg.vocab_size, size=len(labels))
    lo, hi = cfg.word_frames
    upper_lo = (lo + hi + 1) // 2
    lengths, silences, puncts = [], [], []
    for lab in labels:
        if lab >= BoundaryLevel.PPH:
            lengths.append(int(rng.integers(upper_lo, hi + 1)))
        else:
            lengths.append(int(rng.integers(lo, hi + 1)))
        s_lo, s_hi = cfg.silence_range(lab)
        silences.append(int(rng.integers(s_lo, s_hi + 1)))
        if lab == BoundaryLevel.IPH:
            puncts.append(".")
        elif lab == BoundaryLevel.PPH and rng.random() < cfg.comma_prob:
            puncts.append(",")
        else:
            puncts.append(None)
    lead = int(rng.integers(cfg.leading_silence[0], cfg.leading_silence[1] + 1))
    total = lead + sum(lengths) + sum(silences)
    frames = np.zeros((total, cfg.feat_dim))

    words, t = [], lead
    for i in range(len(labels)):
        text = word_text(int(vocab[i]))
        subwords = word_subwords(text, cfg.subword_vocab_size)
        words.append(WordToken(text, puncts[i], subwords, t, t + lengths[i]))
        ident = identity_vector(subwords, cfg.feat_dim - 1)
        frames[t:t + lengths[i], 1:] = ident
        t += lengths[i] + silences[i]

    # pitch declines linearly over the voiced frames of each PPH and resets after it
    start = 0
    for i, lab in enumerate(labels):
        if lab >= BoundaryLevel.PPH:
            group = range(start, i + 1)
            voiced = sum(lengths[j] for j in group)
            pitch = np.linspace(cfg.pitch_start, cfg.pitch_end, voiced)
            pos = 0
            for j in group:
                w = words[j]
                frames[w.frame_start:w.frame_end, 0] = pitch[pos:pos + lengths[j]]
                pos += lengths[j]
            start = i + 1

    frames += rng.normal(0.0, cfg.noise_sigma, size=frames.shape) if cfg.noise_sigma > 0 else 0.0
    return UtteranceRecord(utt_id, tuple(words), frames.astype(np.float32), tuple(labels))


def generate_corpus(cfg: GeneratorConfig) -> list[UtteranceRecord]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    return [_generate_one(rng, cfg, f"utt{i:05d}") for i in range(cfg.num_utterances)]


def corpus_units(corpus: Sequence[UtteranceRecord], sswp: bool = True) -> list[SSWPUnit]:
    return [u for utt in corpus for u in build_sswp_units(utt, sswp)]


# ---------------------------------------------------------------- I/O

def write_features(path, frames: np.ndarray) -> None:
    arr = np.ascontiguousarray(frames, dtype="<f4")
    rows, cols = arr.shape
    Path(path).write_bytes(FEAT_MAGIC + struct.pack("<III", FEAT_VERSION, rows, cols) + arr.tobytes())


def read_features(path, utt_id: str = "?") -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CorpusFormatError(f"utterance {utt_id!r}: cannot read feature file: {e}") from None
    if len(buf) < 16 or buf[:4] != FEAT_MAGIC:
        raise CorpusFormatError(f"utterance {utt_id!r}: bad feature file header in {path}")
    version, rows, cols = struct.unpack_from("<III", buf, 4)
    if version != FEAT_VERSION:
        raise CorpusFormatError(f"utterance {utt_id!r}: unsupported feature version {version}")
    need = rows * cols * 4
    if len(buf) - 16 != need:
        raise CorpusFormatError(
            f"utterance {utt_id!r}: feature file has {len(buf) - 16} data bytes, expected {need}")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(rows, cols).astype(np.float32)


def save_corpus(corpus: Sequence[UtteranceRecord], path) -> None:
    """Write ``path`` (JSON lines) plus one feature file per utterance under ``frames/``."""
    path = Path(path)
    fdir = path.parent / "frames"
    fdir.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in corpus:
        rel = f"frames/{utt.id}.sswf"
        write_features(path.parent / rel, utt.frames)
        rec = {
            "id": utt.id,
            "words": [{"text": w.text, "punct": w.punct, "subwords": list(w.subword_ids),
                       "t0": w.frame_start, "t1": w.frame_end} for w in utt.words],
            "labels": [int(x) for x in utt.labels],
            "frames_file": rel,
        }
        lines.append(json.dumps(rec, separators=(",", ":")) + "\n")
    path.write_text("".join(lines), encoding="utf-8")


def load_corpus(path, require_labels: bool = True) -> list[UtteranceRecord]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            words = tuple(WordToken(w["text"], w.get("punct"), tuple(int(s) for s in w["subwords"]),
                                    int(w["t0"]), int(w["t1"])) for w in rec["words"])
            labels = tuple(int(x) for x in rec.get("labels", []))
            utt_id, rel = rec["id"], rec["frames_file"]
        except (ValueError, KeyError, TypeError) as e:
            raise CorpusFormatError(f"{path}:{lineno}: malformed record ({e})") from None
        bad = [x for x in labels if not 0 <= x < NUM_LEVELS]
        if bad:
            raise CorpusFormatError(f"{path}:{lineno}: label {bad[0]} out of range 0-3")
        frames = read_features(path.parent / rel, utt_id)
        utt = UtteranceRecord(utt_id, words, frames, labels)
        utt.validate(require_labels=require_labels)
        out.append(utt)
    return out


def split_corpus(corpus: Sequence[UtteranceRecord], fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint, seed-deterministic utterance-level (train, valid, test) split."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise CorpusError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(corpus)
    perm = np.random.default_rng(seed).permutation(n)
    n_valid = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = n - n_valid - n_test
    pick = lambda idx: [corpus[i] for i in sorted(idx)]  # noqa: E731
    return (pick(perm[:n_train]), pick(perm[n_train:n_train + n_valid]),
            pick(perm[n_train + n_valid:]))
