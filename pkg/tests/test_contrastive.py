import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sswp import diffcore as dc
from sswp.contrastive import (THETA, BatchError, EncoderCheckpoint, ModelConfig, PretrainConfig,
                              UnitPool, assemble_pair_batch, clamp_temperature, contrastive_loss,
                              encode_batch, init_encoders, pretrain, retrieval_accuracy,
                              similarity_logits)
from sswp.corpus import GeneratorConfig, generate_corpus

TINY = ModelConfig(vocab_size=64, feat_dim=6, d_model=16, d_joint=8, n_heads=2,
                   text_layers=1, audio_layers=1, kernel=3, max_text_len=64)


def loss_of(s, t, tau):
    theta = dc.tensor([math.log(tau)], dtype=np.float64)
    return float(contrastive_loss(dc.tensor(s, dtype=np.float64), dc.tensor(t, dtype=np.float64),
                                  theta).data[0])


def test_single_pair_loss_is_zero():
    assert loss_of(np.array([[0.3, -2.0]]), np.array([[1.0, 5.0]]), 0.07) == 0.0


def test_two_identity_pairs():
    eye = np.eye(2)
    assert loss_of(eye, eye, 1.0) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-6)


def test_symmetric_exactly_on_50_batches():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        s, t = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        tau = float(rng.uniform(0.01, 1.0))
        assert loss_of(s, t, tau) == loss_of(t, s, tau)
        s32 = dc.tensor(s.astype(np.float32))
        t32 = dc.tensor(t.astype(np.float32))
        th = dc.tensor([math.log(tau)])
        assert contrastive_loss(s32, t32, th).data[0] == contrastive_loss(t32, s32, th).data[0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_row_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 10))
    s, t = rng.standard_normal((n, 4)), rng.standard_normal((n, 4))
    perm = rng.permutation(n)
    assert loss_of(s[perm], t[perm], 0.2) == pytest.approx(loss_of(s, t, 0.2), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_nonnegative_and_logits_bounded(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 10))
    s, t = rng.standard_normal((n, 4)) * 50, rng.standard_normal((n, 4))
    assert loss_of(s, t, 0.01) >= 0
    logits = similarity_logits(dc.tensor(s), dc.tensor(t), dc.tensor([math.log(0.01)])).data
    assert np.all(np.abs(logits) <= 100 + 1e-3)


def test_shape_errors():
    with pytest.raises(dc.ShapeError):
        contrastive_loss(dc.tensor(np.ones((2, 3))), dc.tensor(np.ones((3, 3))), dc.tensor([0.0]))
    with pytest.raises(dc.ShapeError):
        contrastive_loss(dc.tensor(np.ones((0, 3))), dc.tensor(np.ones((0, 3))), dc.tensor([0.0]))


def test_temperature_clamp():
    th = dc.parameter([math.log(5.0)])
    clamp_temperature(th)
    assert math.exp(th.data[0]) == pytest.approx(1.0, rel=1e-6)
    th = dc.parameter([math.log(1e-4)])
    clamp_temperature(th)
    assert math.exp(th.data[0]) == pytest.approx(0.01, rel=1e-6)


def test_retrieval_accuracy():
    assert retrieval_accuracy(np.eye(4)) == 1.0
    assert retrieval_accuracy(np.array([[0.0, 1.0], [0.0, 1.0]])) == 0.5


# ---------------------------------------------------------------- batching

@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(GeneratorConfig(num_utterances=12, seed=3, feat_dim=6,
                                           subword_vocab_size=64))


def test_full_batch_covers_every_unit(small_corpus):
    pool = UnitPool(small_corpus)
    batch = assemble_pair_batch(pool, len(pool), np.random.default_rng(0))
    assert sorted(batch.keys()) == sorted((u.utt_id, u.word_index) for u in pool.units)


def test_batches_deterministic_and_distinct(small_corpus):
    pool = UnitPool(small_corpus)
    a = assemble_pair_batch(pool, 20, np.random.default_rng(4)).keys()
    b = assemble_pair_batch(pool, 20, np.random.default_rng(4)).keys()
    assert a == b and len(set(a)) == 20


def test_batch_too_large(small_corpus):
    pool = UnitPool(small_corpus)
    with pytest.raises(BatchError, match="smaller batch"):
        assemble_pair_batch(pool, len(pool) + 1, np.random.default_rng(0))


def test_duplicate_units_rejected(small_corpus):
    with pytest.raises(BatchError):
        UnitPool(small_corpus).make_batch([0, 1, 0])


def test_batch_text_refs_point_at_unit_subwords(small_corpus):
    pool = UnitPool(small_corpus)
    batch = assemble_pair_batch(pool, 15, np.random.default_rng(1))
    for u, (b, j, k), seg in zip(batch.units, batch.text_refs, batch.segments):
        assert (j, k) == u.subword_range
        assert np.array_equal(batch.seqs[b], pool.subwords[u.utt_id])
        assert len(seg) == u.speech_span[1] - u.speech_span[0]


def test_chance_retrieval_at_init(small_corpus):
    pool = UnitPool(small_corpus)
    p = init_encoders(TINY, 0)
    accs = []
    rng = np.random.default_rng(0)
    with dc.no_grad():
        for _ in range(10):
            batch = assemble_pair_batch(pool, 16, rng)
            s, t = encode_batch(p, TINY, batch)
            accs.append(retrieval_accuracy(similarity_logits(s, t, p[THETA]).data))
    assert np.mean(accs) < 0.3  # chance is 1/16


# ---------------------------------------------------------------- training

def test_pretrain_deterministic_and_roundtrip(small_corpus, tmp_path):
    cfg = PretrainConfig(epochs=2, batch_size=16, lr0=3e-3, model=TINY, seed=1)
    a, ha = pretrain(small_corpus, cfg)
    b, hb = pretrain(small_corpus, cfg)
    assert [h.mean_loss for h in ha] == [h.mean_loss for h in hb]
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    a.save(tmp_path / "enc.ckpt")
    c = EncoderCheckpoint.load(tmp_path / "enc.ckpt")
    assert c.model == TINY
    assert all(c.params[k].data.tobytes() == a.params[k].data.tobytes() for k in a.params)
    tau = math.exp(a.params[THETA].data[0])
    assert 0.01 <= tau <= 1.0


def test_pretrain_nan_aborts(small_corpus):
    cfg = PretrainConfig(epochs=1, batch_size=16, lr0=3e-3, model=TINY)
    bad = [type(u)(u.id, u.words, np.full_like(u.frames, np.nan), u.labels) for u in small_corpus]
    with pytest.raises(dc.NumericAbort, match="epoch 1"):
        pretrain(bad, cfg)
