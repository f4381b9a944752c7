"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (also repeated in the
terminal summary).  The training-based criteria share one pretrained encoder.
"""
import hashlib
import math
import time

import numpy as np
import pytest

from sswp import checkpoint as ckpt
from sswp import diffcore as dc
from sswp import gradcheck
from sswp.ablation import AblationConfig, run_ablation
from sswp.annotator import AnnotatorConfig, train_annotator
from sswp.cli import main as cli_main
from sswp.contrastive import (EncoderCheckpoint, ModelConfig, PretrainConfig, contrastive_loss,
                              evaluate_retrieval, init_encoders, pretrain, write_metrics_csv)
from sswp.corpus import GeneratorConfig, corpus_units, generate_corpus, load_corpus, save_corpus
from sswp.encoders import audio_forward, encode_audio, text_forward
from sswp.metrics import evaluate


@pytest.fixture(scope="module")
def stage1():
    """Pretraining on the default generated corpus, timed."""
    corpus = generate_corpus(GeneratorConfig())
    cfg = PretrainConfig()
    t0 = time.perf_counter()
    enc, history = pretrain(corpus, cfg)
    return corpus, cfg, enc, history, time.perf_counter() - t0


@pytest.fixture(scope="module")
def low_resource_ablation(stage1):
    _, pcfg, enc, _, _ = stage1
    data = generate_corpus(GeneratorConfig(seed=2, num_utterances=500))
    train, valid, test = data[:200], data[200:300], data[300:]
    cfg = AblationConfig(arms=["full", "no_contrastive_pretrain", "no_any_pretrain", "no_sswp",
                               "text_only"],
                         seeds=[0, 1, 2], pretrain=pcfg, annotator=AnnotatorConfig())
    result = run_ablation(stage1[0], train, valid, test, cfg, pretrained={"sswp": enc})
    print(result.table(("PW", "PPH", "IPH")))
    return result


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_suite(criterion, capsys):
    t0 = time.perf_counter()
    results = gradcheck.run_suite(points=10)
    code = cli_main(["gradcheck", "--quiet"])
    elapsed = time.perf_counter() - t0
    names = {r.name for r in results}
    covered = {"text_encoder", "audio_encoder", "contrastive_loss", "ce_loss"} <= names
    worst = max(results, key=lambda r: r.max_rel_err)
    ok = all(r.passed for r in results) and covered and code == 0 and elapsed < 120
    print(gradcheck.format_report(results))
    criterion(1, ok, f"{len(results)} checks, worst {worst.name} {worst.max_rel_err:.2e} "
                     f"(<= 1e-4), exit {code}, {elapsed:.1f}s (< 120s)")
    assert ok


# ---------------------------------------------------------------- 2

def _loss(s, t, tau):
    return float(contrastive_loss(dc.tensor(s, dtype=np.float64), dc.tensor(t, dtype=np.float64),
                                  dc.tensor([math.log(tau)], dtype=np.float64)).data[0])


def test_criterion_2_contrastive_oracle(criterion):
    rng = np.random.default_rng(2)
    single = _loss(rng.standard_normal((1, 5)), rng.standard_normal((1, 5)), 0.07)
    pair = _loss(np.eye(2), np.eye(2), 1.0)
    pair_err = abs(pair - -math.log(math.e / (math.e + 1)))
    sym = perm = 0
    worst_perm = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 17))
        s, t = rng.standard_normal((n, 8)), rng.standard_normal((n, 8))
        tau = float(rng.uniform(0.01, 1.0))
        base = _loss(s, t, tau)
        sym += base == _loss(t, s, tau)
        p = rng.permutation(n)
        d = abs(_loss(s[p], t[p], tau) - base)
        worst_perm = max(worst_perm, d)
        perm += d <= 1e-6
    ok = single == 0.0 and pair_err <= 1e-6 and sym == 50 and perm == 50
    criterion(2, ok, f"n=1 loss {single}, n=2 err {pair_err:.1e}, symmetric {sym}/50, "
                     f"permutation {perm}/50 (max diff {worst_perm:.1e})")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_pretraining_learnability(stage1, criterion):
    corpus, cfg, enc, history, elapsed = stage1
    n_units = len(corpus_units(corpus))
    init = EncoderCheckpoint(cfg.model, init_encoders(cfg.model, cfg.seed))
    chance = evaluate_retrieval(init, corpus, cfg.batch_size, seed=5)
    best = max(h.retrieval_top1 for h in history)
    held = evaluate_retrieval(enc, corpus, cfg.batch_size, seed=5)
    ok = (n_units >= 2000 and len(history) <= 30 and best >= 0.90 and chance < 5 / cfg.batch_size
          and elapsed < 300)
    criterion(3, ok, f"{n_units} units, top-1 at init {chance:.3f} (chance {1 / cfg.batch_size:.3f}), "
                     f"best training top-1 {best:.3f} (>= 0.90) by epoch {len(history)}, "
                     f"post-training pass {held:.3f}, {elapsed:.0f}s (< 300s)")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_end_to_end(stage1, criterion):
    enc = stage1[2]
    data = generate_corpus(GeneratorConfig(seed=1, num_utterances=1200))
    train, valid, test = data[:1000], data[1000:1100], data[1100:]
    t0 = time.perf_counter()
    res = train_annotator(train, valid, AnnotatorConfig(), enc)
    pred = res.checkpoint.predict(test)
    elapsed = time.perf_counter() - t0
    rep = evaluate(pred, [np.asarray(u.labels) for u in test])
    print(rep.to_text())
    pw, pph, iph = rep.f1("PW"), rep.f1("PPH"), rep.f1("IPH")
    ok = pph >= 0.85 and pw >= 0.60 and iph >= 0.99 and elapsed < 600
    criterion(4, ok, f"test PPH F1 {pph:.3f} (>= 0.85), PW F1 {pw:.3f} (>= 0.60), "
                     f"IPH F1 {iph:.3f} (>= 0.99), {elapsed:.0f}s (< 600s)")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_directional_ablation(low_resource_ablation, criterion):
    r = low_resource_ablation
    full_pw, nc_pw, na_pw = (r.mean_f1(a, "PW") for a in
                             ("full", "no_contrastive_pretrain", "no_any_pretrain"))
    full_pph, ns_pph = r.mean_f1("full", "PPH"), r.mean_f1("no_sswp", "PPH")
    # "no_contrastive >=/~ no_any": equal within 0.02 counts as approximately equal
    ok = full_pw >= nc_pw and nc_pw >= na_pw - 0.02 and full_pph > ns_pph
    criterion(5, ok, f"PW F1 full {full_pw:.3f} >= no_contrastive {nc_pw:.3f} >=/~ no_any {na_pw:.3f}; "
                     f"PPH F1 full {full_pph:.3f} > no_sswp {ns_pph:.3f} (3 seeds, 200 train)")
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_6_multimodal_advantage(low_resource_ablation, criterion):
    r = low_resource_ablation
    full, text = r.mean_f1("full", "PPH"), r.mean_f1("text_only", "PPH")
    ok = full - text >= 0.05
    criterion(6, ok, f"PPH F1 multimodal {full:.3f} vs text-only {text:.3f}, "
                     f"gap {full - text:+.3f} (>= 0.05), comma prob {GeneratorConfig().comma_prob}")
    assert ok


# ---------------------------------------------------------------- 7

def _brute_force(pred, gold):
    counts = {}
    for c in range(4):
        tp = sum(p == c and g == c for ps, gs in zip(pred, gold) for p, g in zip(ps, gs))
        fp = sum(p == c and g != c for ps, gs in zip(pred, gold) for p, g in zip(ps, gs))
        fn = sum(p != c and g == c for ps, gs in zip(pred, gold) for p, g in zip(ps, gs))
        counts[c] = (tp, fp, fn)
    return counts


def test_criterion_7_metrics_oracle(criterion):
    rng = np.random.default_rng(7)
    agree = 0
    for _ in range(100):
        n = int(rng.integers(1, 6))
        gold = [rng.integers(0, 4, int(rng.integers(1, 12))).tolist() for _ in range(n)]
        pred = [rng.integers(0, 4, len(g)).tolist() for g in gold]
        rep = evaluate(pred, gold)
        ref = _brute_force(pred, gold)
        agree += all((s.tp, s.fp, s.fn) == ref[c] for c, s in enumerate(rep.classes.values()))
    pw = evaluate([[0, 1, 1, 2]], [[0, 1, 0, 2]]).classes["PW"]
    worked = pw.precision == 0.5 and pw.recall == 1.0 and abs(pw.f1 - 2 / 3) < 1e-12
    ok = agree == 100 and worked
    criterion(7, ok, f"brute-force agreement {agree}/100, worked example PW prec {pw.precision} "
                     f"rec {pw.recall} f1 {pw.f1:.3f}")
    assert ok


# ---------------------------------------------------------------- 8

def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dir_sha(root):
    h = hashlib.sha256()
    for f in sorted(root.rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(root)).encode() + f.read_bytes())
    return h.hexdigest()


def test_criterion_8_determinism_and_formats(tmp_path, criterion):
    checks = {}
    tiny = ModelConfig(d_model=16, d_joint=8, n_heads=2, text_layers=1, audio_layers=1, kernel=3)

    # identical seeds -> identical corpus files, checkpoints and metric logs
    for run in ("a", "b"):
        corpus = generate_corpus(GeneratorConfig(seed=11, num_utterances=30))
        save_corpus(corpus, tmp_path / run / "corpus.jsonl")
        enc, hist = pretrain(corpus, PretrainConfig(epochs=2, batch_size=32, model=tiny))
        enc.save(tmp_path / run / "enc.ckpt")
        write_metrics_csv(tmp_path / run / "pretrain.csv", hist,
                          ["epoch", "mean_loss", "retrieval_top1", "lr", "tau"])
        res = train_annotator(corpus[:20], corpus[20:25],
                              AnnotatorConfig(epochs=2, hidden=8, model=tiny), enc)
        res.checkpoint.save(tmp_path / run / "ann.ckpt")
        write_metrics_csv(tmp_path / run / "train.csv", res.history,
                          ["epoch", "train_loss", "valid_macro_f1", "lr"])
    checks["bit-identical runs"] = _dir_sha(tmp_path / "a") == _dir_sha(tmp_path / "b")

    # round trips
    a = tmp_path / "a"
    back = load_corpus(a / "corpus.jsonl")
    save_corpus(back, tmp_path / "c" / "corpus.jsonl")
    checks["corpus round trip"] = back == generate_corpus(GeneratorConfig(seed=11, num_utterances=30))
    checks["corpus files re-saved identically"] = (
        _sha(tmp_path / "c" / "corpus.jsonl") == _sha(a / "corpus.jsonl")
        and all(_sha(f) == _sha(tmp_path / "c" / "frames" / f.name) for f in (a / "frames").iterdir()))
    ckpt.save(tmp_path / "re.ckpt", ckpt.load(a / "enc.ckpt"))
    checks["checkpoint round trip"] = _sha(tmp_path / "re.ckpt") == _sha(a / "enc.ckpt")

    # encoder properties on 100 random cases at default dimensions
    model = ModelConfig()
    p = init_encoders(model, 3)
    rng = np.random.default_rng(8)
    pad_t = pad_a = iso = 0
    for _ in range(100):
        short = rng.integers(8, model.vocab_size, int(rng.integers(1, 12)))
        other = rng.integers(8, model.vocab_size, int(rng.integers(len(short), 30)))
        j = int(rng.integers(0, len(short)))
        k = int(rng.integers(j + 1, len(short) + 1))
        alone = text_forward(p, model.text(), [short], [(0, j, k)]).data[0]
        batched = text_forward(p, model.text(), [other, short], [(0, 0, 1), (1, j, k)]).data[1]
        pad_t += np.max(np.abs(alone - batched)) <= 1e-5

        seg = rng.standard_normal((int(rng.integers(1, 20)), model.feat_dim)).astype(np.float32)
        longer = rng.standard_normal((int(rng.integers(len(seg), 40)), model.feat_dim)).astype(np.float32)
        alone = audio_forward(p, model.audio(), [seg]).data[0]
        batched = audio_forward(p, model.audio(), [longer, seg]).data[1]
        pad_a += np.max(np.abs(alone - batched)) <= 1e-5

        frames = rng.standard_normal((40, model.feat_dim)).astype(np.float32)
        s = int(rng.integers(0, 39))
        e = int(rng.integers(s + 1, 41))
        before = encode_audio(p, model.audio(), frames, [(s, e)]).data
        mutated = frames.copy()
        mutated[:s] += 5.0
        mutated[e:] -= 5.0
        iso += np.array_equal(before, encode_audio(p, model.audio(), mutated, [(s, e)]).data)
    checks["text padding invariance"] = pad_t == 100
    checks["audio padding invariance"] = pad_a == 100
    checks["audio span isolation"] = iso == 100

    ok = all(checks.values())
    criterion(8, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items())
              + f" (padding {pad_t}/{pad_a}/100, isolation {iso}/100)")
    assert ok
