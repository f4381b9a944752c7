"""One-vs-rest precision/recall/F1 over boundary junctures, with confusion matrix."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import NUM_LEVELS, BoundaryLevel

CLASS_NAMES = [lvl.name for lvl in BoundaryLevel]
MACRO_CLASSES = ("PW", "PPH", "IPH")


class MetricsError(ValueError):
    pass


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


@dataclass(frozen=True)
class ClassScores:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def undefined(self) -> bool:
        """Class absent from both gold and predictions."""
        return self.tp + self.fp + self.fn == 0


@dataclass(frozen=True)
class MetricsReport:
    confusion: np.ndarray  # rows gold, columns predicted
    classes: dict[str, ClassScores]

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def f1(self, name: str) -> float:
        return self.classes[name].f1

    @property
    def macro_f1(self) -> float:
        return float(np.mean([self.classes[c].f1 for c in MACRO_CLASSES]))

    def to_dict(self) -> dict:
        return {
            "classes": {name: {"tp": s.tp, "fp": s.fp, "fn": s.fn, "precision": s.precision,
                               "recall": s.recall, "f1": s.f1, "undefined": s.undefined}
                        for name, s in self.classes.items()},
            "confusion": self.confusion.tolist(),
            "macro_f1": self.macro_f1,
            "total": self.total,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [f"{'class':<6}{'tp':>7}{'fp':>7}{'fn':>7}{'prec':>8}{'rec':>8}{'f1':>8}"]
        for name, s in self.classes.items():
            flag = "  (undefined)" if s.undefined else ""
            lines.append(f"{name:<6}{s.tp:>7}{s.fp:>7}{s.fn:>7}"
                         f"{s.precision:>8.3f}{s.recall:>8.3f}{s.f1:>8.3f}{flag}")
        lines.append(f"macro-F1 (PW/PPH/IPH): {self.macro_f1:.3f}")
        lines.append("confusion (rows gold, cols pred): " + " ".join(CLASS_NAMES))
        for name, row in zip(CLASS_NAMES, self.confusion):
            lines.append(f"  {name:<4}" + "".join(f"{v:>7d}" for v in row))
        return "\n".join(lines)


def evaluate(pred: Sequence[Sequence[int]], gold: Sequence[Sequence[int]],
             ids: Sequence[str] | None = None) -> MetricsReport:
    """Count every juncture of every utterance one-vs-rest per class."""
    if len(pred) != len(gold):
        raise MetricsError(f"{len(pred)} predicted vs {len(gold)} gold utterances")
    conf = np.zeros((NUM_LEVELS, NUM_LEVELS), dtype=np.int64)
    for i, (p, g) in enumerate(zip(pred, gold)):
        p, g = np.asarray(p, dtype=np.int64), np.asarray(g, dtype=np.int64)
        if p.shape != g.shape:
            name = ids[i] if ids is not None else f"#{i}"
            raise MetricsError(f"utterance {name}: {len(p)} predicted vs {len(g)} gold labels")
        for arr in (p, g):
            if arr.size and (arr.min() < 0 or arr.max() >= NUM_LEVELS):
                name = ids[i] if ids is not None else f"#{i}"
                raise MetricsError(f"utterance {name}: label out of range")
        np.add.at(conf, (g, p), 1)
    classes = {}
    for c, name in enumerate(CLASS_NAMES):
        tp = int(conf[c, c])
        classes[name] = ClassScores(tp, int(conf[:, c].sum()) - tp, int(conf[c, :].sum()) - tp)
    return MetricsReport(conf, classes)


def format_table(rows: dict[str, MetricsReport], classes=("PW", "PPH")) -> str:
    """Systems x (class: prec rec f1) table in the layout of an ablation study."""
    name_w = max(12, max(len(k) for k in rows))
    head = f"{'system':<{name_w}}" + "".join(f" | {c + ' prec':>9} {'rec':>6} {'f1':>6}" for c in classes)
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        cells = "".join(f" | {rep.classes[c].precision:>9.3f} {rep.classes[c].recall:>6.3f} "
                        f"{rep.classes[c].f1:>6.3f}" for c in classes)
        lines.append(f"{name:<{name_w}}{cells}")
    return "\n".join(lines)
