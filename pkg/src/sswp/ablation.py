"""Ablation harness: train each arm under identical seeds and compare per-class scores.

Arms
----
full                     SSWP contrastive pretraining, then the bi-LSTM annotator.
no_contrastive_pretrain  text encoder from masked-subword pretraining, audio encoder random.
no_any_pretrain          both encoders randomly initialised.
no_sswp                  plain word pairs (no punctuation, no trailing silence) in both stages.
no_bilstm                full pretraining, linear classifier on the fused embeddings.
text_only                full pretraining, audio embeddings dropped from the fusion.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .annotator import AnnotatorConfig, TrainResult, train_annotator
from .contrastive import EncoderCheckpoint, PretrainConfig, pretrain, pretrain_text_mlm
from .corpus import UtteranceRecord
from .metrics import MACRO_CLASSES, MetricsReport, evaluate, format_table

log = logging.getLogger(__name__)

ARMS = ("full", "no_contrastive_pretrain", "no_any_pretrain", "no_sswp", "no_bilstm", "text_only")


class AblationError(ValueError):
    pass


@dataclass
class AblationConfig:
    arms: list[str] = field(default_factory=lambda: list(ARMS))
    seeds: list[int] = field(default_factory=lambda: [0])
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    annotator: AnnotatorConfig = field(default_factory=AnnotatorConfig)
    mlm_epochs: int = 10

    def validate(self) -> None:
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown:
            raise AblationError(f"unknown ablation arm(s) {unknown}; choose from {list(ARMS)}")
        if not self.arms or not self.seeds:
            raise AblationError("need at least one arm and one seed")


@dataclass
class ArmResult:
    arm: str
    seed: int
    report: MetricsReport
    best_epoch: int


@dataclass
class AblationResult:
    runs: list[ArmResult]

    def reports(self, arm: str) -> list[MetricsReport]:
        return [r.report for r in self.runs if r.arm == arm]

    def mean_scores(self, arm: str) -> dict[str, dict[str, float]]:
        """Per-class precision/recall/F1 averaged over seeds."""
        reps = self.reports(arm)
        if not reps:
            raise AblationError(f"no runs for arm {arm!r}")
        out = {}
        for c in reps[0].classes:
            out[c] = {k: float(np.mean([getattr(r.classes[c], k) for r in reps]))
                      for k in ("precision", "recall", "f1")}
        out["macro"] = {"f1": float(np.mean([r.macro_f1 for r in reps]))}
        return out

    def mean_f1(self, arm: str, cls: str) -> float:
        return self.mean_scores(arm)[cls]["f1"]

    def arms(self) -> list[str]:
        return list(dict.fromkeys(r.arm for r in self.runs))

    def table(self, classes=("PW", "PPH")) -> str:
        """Seed-averaged table; per-seed counts are pooled so P/R/F1 are of the pooled counts."""
        pooled = {}
        for arm in self.arms():
            reps = self.reports(arm)
            conf = sum(r.confusion for r in reps)
            pooled[arm] = _from_confusion(conf)
        return format_table(pooled, classes)

    def to_dict(self) -> dict:
        return {"runs": [{"arm": r.arm, "seed": r.seed, "best_epoch": r.best_epoch,
                          **r.report.to_dict()} for r in self.runs],
                "mean": {arm: self.mean_scores(arm) for arm in self.arms()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _from_confusion(conf: np.ndarray) -> MetricsReport:
    gold, pred = [], []
    for g in range(conf.shape[0]):
        for p in range(conf.shape[1]):
            gold.extend([g] * int(conf[g, p]))
            pred.extend([p] * int(conf[g, p]))
    return evaluate([pred], [gold])


def _arm_setup(arm: str, base: AnnotatorConfig) -> tuple[AnnotatorConfig, str | None]:
    """Annotator config for the arm plus which pretraining it starts from."""
    if arm == "full":
        return base, "sswp"
    if arm == "no_contrastive_pretrain":
        return base, "mlm"
    if arm == "no_any_pretrain":
        return base, None
    if arm == "no_sswp":
        return replace(base, sswp=False), "word"
    if arm == "no_bilstm":
        return replace(base, use_bilstm=False), "sswp"
    if arm == "text_only":
        return replace(base, text_only=True), "sswp"
    raise AblationError(f"unknown ablation arm {arm!r}")


def run_ablation(pretrain_corpus: Sequence[UtteranceRecord], train: Sequence[UtteranceRecord],
                 valid: Sequence[UtteranceRecord], test: Sequence[UtteranceRecord],
                 cfg: AblationConfig,
                 on_run: Callable[[ArmResult], None] | None = None,
                 pretrained: dict[str, EncoderCheckpoint] | None = None) -> AblationResult:
    """Train every (arm, seed) and score it on ``test``.

    Each pretraining variant ("sswp", "word", "mlm") is computed once from
    ``cfg.pretrain`` and shared by the arms and seeds that use it; the seeds vary
    stage-2 initialisation and batching.  ``pretrained`` may supply variants that
    were already trained.
    """
    cfg.validate()
    base = copy.deepcopy(cfg.annotator)
    base.model = cfg.pretrain.model
    cache: dict[str, EncoderCheckpoint] = dict(pretrained or {})

    def init_for(kind: str) -> EncoderCheckpoint:
        if kind not in cache:
            if kind == "mlm":
                log.info("ablation: masked-subword text pretraining")
                cache[kind] = pretrain_text_mlm(pretrain_corpus, cfg.pretrain.model,
                                                epochs=cfg.mlm_epochs, seed=cfg.pretrain.seed)
            else:
                log.info("ablation: contrastive pretraining (%s pairs)", kind)
                pcfg = replace(cfg.pretrain, sswp=(kind == "sswp"), checkpoint_out=None)
                cache[kind], _ = pretrain(pretrain_corpus, pcfg)
        return cache[kind]

    gold = [np.asarray(u.labels) for u in test]
    runs = []
    for arm in cfg.arms:
        arm_cfg, kind = _arm_setup(arm, base)
        source = init_for(kind) if kind else None
        prefixes = ("text.",) if kind == "mlm" else ("text.", "audio.")
        for seed in cfg.seeds:
            res: TrainResult = train_annotator(train, valid, replace(arm_cfg, seed=seed),
                                               source, prefixes)
            report = evaluate(res.checkpoint.predict(test), gold, [u.id for u in test])
            run = ArmResult(arm, seed, report, res.best_epoch)
            log.info("ablation %s seed %d: %s", arm, seed,
                     " ".join(f"{c} {report.f1(c):.3f}" for c in MACRO_CLASSES))
            runs.append(run)
            if on_run:
                on_run(run)
    return AblationResult(runs)


def config_dict(cfg: AblationConfig) -> dict:
    return asdict(cfg)
