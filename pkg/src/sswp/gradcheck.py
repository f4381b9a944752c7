"""Central finite-difference verification of every backward rule.

Each check builds a scalar loss from named float64 inputs, takes the analytic
gradient with :func:`diffcore.backward` and compares it with
``(f(x + h e_i) - f(x - h e_i)) / 2h`` on all (or a random sample of) entries.
The error reported per input is ``max|analytic - numeric| / max(|analytic|, |numeric|, 1e-5)``
over the checked entries of that input, i.e. an infinity-norm relative error.  The
floor matters only for gradients that are exactly zero in theory (the attention
key bias, whose effect softmax cancels), where central differences return pure
roundoff of order 1e-10.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc

H = 1e-5
RTOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    points: int
    passed: bool
    seconds: float = 0.0


FLOOR = 1e-5


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), FLOOR)
    return float(np.max(np.abs(a - n))) / scale


def check_function(fn: Callable[[dict], dc.Tensor], inputs: dict[str, np.ndarray],
                   h: float = H, max_entries: int | None = None,
                   rng: np.random.Generator | None = None,
                   wrt: list[str] | None = None) -> float:
    """Largest relative error between analytic and numeric gradients of ``fn``."""
    rng = rng or np.random.default_rng(0)
    wrt = list(inputs) if wrt is None else wrt
    with dc.precision(np.float64):
        ts = {k: dc.Tensor(np.array(v, dtype=np.float64), requires_grad=k in wrt, name=k)
              for k, v in inputs.items()}
        loss = fn(ts)
        grads = dc.backward(loss, {k: ts[k] for k in wrt})
        worst = 0.0
        with dc.no_grad():
            for k in wrt:
                x = ts[k].data
                flat = np.arange(x.size)
                if max_entries is not None and x.size > max_entries:
                    flat = rng.choice(x.size, size=max_entries, replace=False)
                num = np.empty(len(flat))
                for n, i in enumerate(flat):
                    idx = np.unravel_index(i, x.shape)
                    orig = x[idx]
                    x[idx] = orig + h
                    fp = float(fn(ts).data[0])
                    x[idx] = orig - h
                    fm = float(fn(ts).data[0])
                    x[idx] = orig
                    num[n] = (fp - fm) / (2 * h)
                ana = grads[k].reshape(-1)[flat]
                worst = max(worst, _rel_err(ana, num))
    return worst


def _projected(out: dc.Tensor, proj: np.ndarray) -> dc.Tensor:
    return dc.sum_(dc.mul(out, proj))


# ---------------------------------------------------------------- op cases

def _op_cases():
    """(name, builder(rng) -> (fn, inputs)) for every differentiable op."""
    def unary(op, shape=(3, 4), positive=False, **kw):
        def build(rng):
            x = rng.standard_normal(shape)
            if positive:
                x = np.abs(x) + 0.5
            r = rng.standard_normal(shape)
            return (lambda t: _projected(op(t["x"], **kw), r)), {"x": x}
        return build

    def binary(op, sa, sb):
        def build(rng):
            a, b = rng.standard_normal(sa), rng.standard_normal(sb)
            r = rng.standard_normal(np.broadcast_shapes(sa, sb))
            return (lambda t: _projected(op(t["a"], t["b"]), r)), {"a": a, "b": b}
        return build

    def matmul(rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        r = rng.standard_normal((2, 3, 5))
        return (lambda t: _projected(dc.matmul(t["a"], t["b"]), r)), {"a": a, "b": b}

    def layer_norm(rng):
        x = rng.standard_normal((3, 5))
        g, b = rng.standard_normal(5), rng.standard_normal(5)
        r = rng.standard_normal((3, 5))
        return (lambda t: _projected(dc.layer_norm(t["x"], t["g"], t["b"]), r)), {"x": x, "g": g, "b": b}

    def embedding(rng):
        table = rng.standard_normal((6, 3))
        idx = rng.integers(0, 6, size=(2, 4))
        r = rng.standard_normal((2, 4, 3))
        return (lambda t: _projected(dc.embedding(t["table"], idx), r)), {"table": table}

    def concat(rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
        r = rng.standard_normal((2, 5))
        return (lambda t: _projected(dc.concat([t["a"], t["b"]], axis=1), r)), {"a": a, "b": b}

    def slice_(rng):
        x = rng.standard_normal((4, 5))
        r = rng.standard_normal((2, 3))
        return (lambda t: _projected(dc.slice_(t["x"], (slice(1, 3), slice(0, 5, 2))), r)), {"x": x}

    def reshape(rng):
        x = rng.standard_normal((2, 6))
        r = rng.standard_normal((3, 4))
        return (lambda t: _projected(dc.reshape(t["x"], (3, 4)), r)), {"x": x}

    def transpose(rng):
        x = rng.standard_normal((2, 3, 4))
        r = rng.standard_normal((4, 2, 3))
        return (lambda t: _projected(dc.transpose(t["x"], (2, 0, 1)), r)), {"x": x}

    def masked_fill(rng):
        x = rng.standard_normal((3, 4))
        m = rng.random((3, 4)) < 0.4
        r = rng.standard_normal((3, 4))
        return (lambda t: _projected(dc.masked_fill(t["x"], m, -3.0), r)), {"x": x}

    def reduce(op, axis):
        def build(rng):
            x = rng.standard_normal((3, 4))
            r = rng.standard_normal(np.sum(x, axis=axis).shape or (1,))
            return (lambda t: _projected(op(t["x"], axis=axis), r)), {"x": x}
        return build

    def dwconv(rng):
        x = rng.standard_normal((2, 6, 3))
        w, b = rng.standard_normal((5, 3)), rng.standard_normal(3)
        r = rng.standard_normal((2, 6, 3))
        return (lambda t: _projected(dc.depthwise_conv1d(t["x"], t["w"], t["b"]), r)), {"x": x, "w": w, "b": b}

    def scale(rng):
        c = float(rng.standard_normal())
        x = rng.standard_normal((3, 2))
        r = rng.standard_normal((3, 2))
        return (lambda t: _projected(dc.scale(t["x"], c), r)), {"x": x}

    return [
        ("matmul", matmul),
        ("add", binary(dc.add, (3, 4), (4,))),
        ("sub", binary(dc.sub, (3, 1), (3, 4))),
        ("mul", binary(dc.mul, (2, 3, 4), (3, 1))),
        ("scale", scale),
        ("exp", unary(dc.exp)),
        ("log", unary(dc.log, positive=True)),
        ("tanh", unary(dc.tanh)),
        ("sigmoid", unary(dc.sigmoid)),
        ("softmax", unary(dc.softmax, axis=-1)),
        ("softmax_axis0", unary(dc.softmax, axis=0)),
        ("log_softmax", unary(dc.log_softmax, axis=-1)),
        ("layer_norm", layer_norm),
        ("embedding", embedding),
        ("concat", concat),
        ("slice", slice_),
        ("reshape", reshape),
        ("transpose", transpose),
        ("masked_fill", masked_fill),
        ("sum", reduce(dc.sum_, 1)),
        ("mean", reduce(dc.mean, 0)),
        ("depthwise_conv1d", dwconv),
        ("l2_normalize_rows", unary(dc.l2_normalize_rows)),
    ]


# ---------------------------------------------------------------- model cases

def _model_cases():
    from .annotator import AnnotatorConfig, ce_loss, init_annotator, sequence_logits
    from .contrastive import ModelConfig, contrastive_loss
    from .encoders import (AudioEncoderConfig, TextEncoderConfig, audio_forward,
                           init_audio_encoder, init_text_encoder, text_forward)

    def params_case(init, forward, out_shape, max_entries=4):
        def build(rng):
            with dc.precision(np.float64):
                p = init(rng)
            r = rng.standard_normal(out_shape)
            arrays = {k: v.data for k, v in p.items()}

            def fn(t):
                return _projected(forward(t), r)
            return fn, arrays, max_entries
        return build

    tcfg = TextEncoderConfig(vocab_size=12, d_model=8, n_layers=1, n_heads=2, max_len=16, d_joint=4)
    acfg = AudioEncoderConfig(feat_dim=3, d_model=8, n_layers=1, n_heads=2, kernel=3, d_joint=4)
    seqs = [np.array([3, 5, 9, 2, 7]), np.array([4, 11, 8])]
    refs = [(0, 0, 2), (0, 2, 5), (1, 1, 3)]
    frames = np.random.default_rng(11).standard_normal((9, 3))
    segments = [frames[0:4], frames[4:9]]

    text = params_case(lambda rng: init_text_encoder(tcfg, rng),
                       lambda t: text_forward(t, tcfg, seqs, refs), (3, 4))
    audio = params_case(lambda rng: init_audio_encoder(acfg, rng),
                        lambda t: audio_forward(t, acfg, segments), (2, 4))

    def contrastive(rng):
        s, t = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
        theta = np.array([math.log(0.5) + 0.3 * rng.standard_normal()])
        return (lambda x: contrastive_loss(x["S"], x["T"], x["theta"])), \
            {"S": s, "T": t, "theta": theta}, None

    def ce(rng):
        logits = rng.standard_normal((5, 4))
        gold = rng.integers(0, 4, size=5)
        w = np.abs(rng.standard_normal(4)) + 0.5
        return (lambda x: ce_loss(dc.softmax(x["logits"], axis=-1), gold, w)), {"logits": logits}, None

    model = ModelConfig(vocab_size=12, feat_dim=3, d_model=8, d_joint=4, n_heads=2,
                        text_layers=1, audio_layers=1, kernel=3, max_text_len=16)
    acfg2 = AnnotatorConfig(model=model, hidden=3)
    ann_seqs = [np.array([3, 5, 9, 2]), np.array([4, 11, 8])]
    ann_ranges = [[(0, 2), (2, 4)], [(0, 1), (1, 3)]]
    ann_segs = [[frames[0:3], frames[3:7]], [frames[0:2], frames[2:9]]]
    gold = [np.array([1, 3]), np.array([0, 3])]

    def annotator(rng):
        with dc.precision(np.float64):
            p = init_annotator(acfg2, int(rng.integers(1 << 30)))
        arrays = {k: v.data for k, v in p.items() if k != "temp.theta"}

        def fn(t):
            logits, valid = sequence_logits(t, acfg2, ann_seqs, ann_ranges, ann_segs)
            from .annotator import sequence_ce
            return sequence_ce(logits, gold, valid)
        return fn, arrays, 3

    return [
        ("text_encoder", text, 2),
        ("audio_encoder", audio, 2),
        ("contrastive_loss", contrastive, 10),
        ("ce_loss", ce, 10),
        ("annotator_end_to_end", annotator, 1),
    ]


def run_suite(points: int = 10, rtol: float = RTOL, seed: int = 0,
              only: list[str] | None = None) -> list[CheckResult]:
    """Run every op check at ``points`` random float64 points plus the model checks."""
    results = []
    rng = np.random.default_rng(seed)
    for name, build in _op_cases():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(points):
            fn, inputs = build(rng)
            worst = max(worst, check_function(fn, inputs, rng=rng))
        results.append(CheckResult(name, worst, points, worst <= rtol, time.perf_counter() - t0))
    for name, build, n in _model_cases():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(n):
            fn, inputs, max_entries = build(rng)
            worst = max(worst, check_function(fn, inputs, max_entries=max_entries, rng=rng))
        results.append(CheckResult(name, worst, n, worst <= rtol, time.perf_counter() - t0))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max_rel_err':>12}  points  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.points:6d}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    lines.append("all checks passed" if not failed else "FAILED: " + ", ".join(failed))
    return "\n".join(lines)
