"""Command-line entry point: ``sswp <command> [options]``.

Every command resolves its configuration (dataclass defaults, then the TOML
file given by ``--config``, then command-line flags) before doing any work and
writes the resolved view to ``<out>/resolved_config.json``.

Exit codes: 0 ok, 2 usage or configuration error, 3 data or checkpoint
incompatibility, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import checkpoint as ckpt
from . import diffcore as dc
from . import gradcheck
from .ablation import ARMS, AblationConfig, AblationError, run_ablation
from .annotator import AnnotatorCheckpoint, AnnotatorConfig, train_annotator
from .contrastive import EncoderCheckpoint, PretrainConfig, pretrain, write_metrics_csv
from .corpus import (CorpusError, CorpusFormatError, CorpusValidationError, GeneratorConfig,
                     generate_corpus, load_corpus, save_corpus, split_corpus)
from .metrics import MetricsError, evaluate

log = logging.getLogger("sswp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config plumbing

def _load_toml(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from None


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def _overrides(args: argparse.Namespace, mapping: dict[str, str]) -> dict:
    """Flag values that were actually given, renamed to config keys."""
    out = {}
    for flag, key in mapping.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def _build(cls, d: dict):
    try:
        if hasattr(cls, "from_dict"):
            return cls.from_dict(d)
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from None


def _plain(obj: Any) -> Any:
    if is_dataclass(obj):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, command: str, resolved: dict) -> None:
    doc = {"command": command, **_plain(resolved)}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_labels(path) -> tuple[list[str], list[list[int]]]:
    """``id`` and ``labels`` from each JSON line (annotation or corpus files alike)."""
    ids, labels = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ids.append(str(rec["id"]))
            labels.append([int(x) for x in rec["labels"]])
        except (ValueError, KeyError, TypeError) as e:
            raise CorpusFormatError(f"{path}:{lineno}: malformed record ({e})") from None
    return ids, labels


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    doc = _load_toml(args.config)
    d = _section(doc, "generator")
    d.update(_overrides(args, {"seed": "seed", "num_utterances": "num_utterances",
                               "comma_prob": "comma_prob", "noise_sigma": "noise_sigma"}))
    split = doc.get("split", {}).get("fractions", [0.8, 0.1, 0.1])
    cfg = _build(GeneratorConfig, d)
    try:
        cfg.validate()
    except CorpusError as e:
        raise ConfigError(str(e)) from None
    out = _prepare_out(args)
    _echo_config(out, "gen-data", {"generator": cfg, "split": {"fractions": split}})
    corpus = generate_corpus(cfg)
    save_corpus(corpus, out / "corpus.jsonl")
    if len(corpus) >= 3:
        try:
            parts = split_corpus(corpus, tuple(split), seed=cfg.seed)
        except CorpusError as e:
            raise ConfigError(str(e)) from None
        for name, part in zip(("train", "valid", "test"), parts):
            save_corpus(part, out / f"{name}.jsonl")
    log.info("wrote %d utterances to %s", len(corpus), out)
    return EXIT_OK


_MODEL_FLAGS = {"d_model": "d_model", "d_joint": "d_joint", "n_heads": "n_heads"}


def cmd_pretrain(args) -> int:
    doc = _load_toml(args.config)
    d = _section(doc, "pretrain")
    d.update(_overrides(args, {"seed": "seed", "epochs": "epochs", "batch_size": "batch_size",
                               "lr0": "lr0", "init_from": "init_from", **_MODEL_FLAGS}))
    if args.word_units:
        d["sswp"] = False
    corpus_path = args.corpus or doc.get("paths", {}).get("corpus")
    if not corpus_path:
        raise ConfigError("pretrain needs --corpus (or paths.corpus in the config)")
    cfg = _build(PretrainConfig, d)
    out = _prepare_out(args)
    cfg.checkpoint_out = str(out / "encoder.ckpt")
    _echo_config(out, "pretrain", {"pretrain": cfg, "corpus": corpus_path})
    corpus = load_corpus(corpus_path, require_labels=False)
    _, history = pretrain(corpus, cfg)
    write_metrics_csv(out / "pretrain_metrics.csv", history,
                      ["epoch", "mean_loss", "retrieval_top1", "lr", "tau"])
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _load_toml(args.config)
    d = _section(doc, "annotator")
    d.update(_overrides(args, {"seed": "seed", "epochs": "epochs", "batch_size": "batch_size",
                               "lr": "lr", "lr_head": "lr_head", **_MODEL_FLAGS}))
    for flag, key, value in (("freeze_encoders", "freeze_encoders", True),
                             ("no_bilstm", "use_bilstm", False),
                             ("word_units", "sswp", False), ("text_only", "text_only", True)):
        if getattr(args, flag):
            d[key] = value
    paths = doc.get("paths", {})
    train_path = args.train or paths.get("train")
    valid_path = args.valid or paths.get("valid")
    pretrained_path = args.pretrained or paths.get("pretrained")
    if not train_path or not valid_path:
        raise ConfigError("train needs --train and --valid corpora")
    cfg = _build(AnnotatorConfig, d)
    out = _prepare_out(args)
    _echo_config(out, "train", {"annotator": cfg, "train": train_path, "valid": valid_path,
                                "pretrained": pretrained_path})
    source = EncoderCheckpoint.load(pretrained_path) if pretrained_path else None
    train, valid = load_corpus(train_path), load_corpus(valid_path)
    res = train_annotator(train, valid, cfg, source)
    res.checkpoint.save(out / "annotator.ckpt")
    write_metrics_csv(out / "train_metrics.csv", res.history,
                      ["epoch", "train_loss", "valid_macro_f1", "valid_pw_f1", "valid_pph_f1",
                       "valid_iph_f1", "lr"])
    (out / "valid_report.json").write_text(res.best_valid.to_json() + "\n")
    return EXIT_OK


def cmd_annotate(args) -> int:
    doc = _load_toml(args.config)
    paths = doc.get("paths", {})
    ckpt_path = args.checkpoint or paths.get("checkpoint")
    corpus_path = args.corpus or paths.get("corpus")
    if not ckpt_path or not corpus_path:
        raise ConfigError("annotate needs --checkpoint and --corpus")
    out = _prepare_out(args)
    _echo_config(out, "annotate", {"checkpoint": ckpt_path, "corpus": corpus_path})
    model = AnnotatorCheckpoint.load(ckpt_path)
    utts = load_corpus(corpus_path, require_labels=False)
    preds = model.predict(utts)
    lines = [json.dumps({"id": u.id, "labels": [int(x) for x in p]}, separators=(",", ":"))
             for u, p in zip(utts, preds)]
    (out / "annotations.jsonl").write_text("".join(x + "\n" for x in lines))
    return EXIT_OK


def cmd_eval(args) -> int:
    doc = _load_toml(args.config)
    paths = doc.get("paths", {})
    pred_path = args.pred or paths.get("pred")
    gold_path = args.gold or paths.get("gold")
    if not pred_path or not gold_path:
        raise ConfigError("eval needs --pred and --gold")
    out = _prepare_out(args)
    _echo_config(out, "eval", {"pred": pred_path, "gold": gold_path})
    pid, pred = _read_labels(pred_path)
    gid, gold = _read_labels(gold_path)
    if pid != gid:
        missing = sorted(set(gid) ^ set(pid))
        raise MetricsError(f"prediction and gold utterance ids differ (e.g. {missing[:3]})"
                           if missing else "prediction and gold files list utterances in a different order")
    report = evaluate(pred, gold, gid)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text() + "\n")
    rows = [{"class": name, "tp": s.tp, "fp": s.fp, "fn": s.fn, "precision": s.precision,
             "recall": s.recall, "f1": s.f1} for name, s in report.classes.items()]
    write_metrics_csv(out / "metrics.csv", rows, ["class", "tp", "fp", "fn", "precision", "recall", "f1"])
    if not args.quiet:
        print(report.to_text())
    return EXIT_OK


def cmd_ablate(args) -> int:
    doc = _load_toml(args.config)
    pre = _section(doc, "pretrain")
    ann = _section(doc, "annotator")
    abl = _section(doc, "ablation")
    if args.seed is not None:
        pre["seed"] = args.seed
    if args.pretrain_epochs is not None:
        pre["epochs"] = args.pretrain_epochs
    if args.epochs is not None:
        ann["epochs"] = args.epochs
    if args.arms:
        abl["arms"] = [a.strip() for a in args.arms.split(",") if a.strip()]
    if args.seeds:
        abl["seeds"] = [int(s) for s in args.seeds.split(",")]
    unknown = set(abl) - {"arms", "seeds", "mlm_epochs"}
    if unknown:
        raise ConfigError(f"unknown ablation config keys: {sorted(unknown)}")
    cfg = AblationConfig(pretrain=_build(PretrainConfig, pre), annotator=_build(AnnotatorConfig, ann),
                         **abl)
    try:
        cfg.validate()
    except AblationError as e:
        raise ConfigError(str(e)) from None
    paths = doc.get("paths", {})
    need = {k: getattr(args, k) or paths.get(k) for k in ("pretrain_corpus", "train", "valid", "test")}
    missing = [k for k, v in need.items() if not v]
    if missing:
        raise ConfigError(f"ablate needs corpus paths: {', '.join('--' + m.replace('_', '-') for m in missing)}")
    out = _prepare_out(args)
    _echo_config(out, "ablate", {"ablation": cfg, **need})
    corpora = {k: load_corpus(v, require_labels=(k != "pretrain_corpus")) for k, v in need.items()}
    result = run_ablation(corpora["pretrain_corpus"], corpora["train"], corpora["valid"],
                          corpora["test"], cfg)
    (out / "ablation.json").write_text(result.to_json() + "\n")
    (out / "ablation.txt").write_text(result.table() + "\n")
    rows = [{"arm": r.arm, "seed": r.seed, "best_epoch": r.best_epoch,
             **{f"{c.lower()}_f1": r.report.f1(c) for c in ("PW", "PPH", "IPH")},
             "macro_f1": r.report.macro_f1} for r in result.runs]
    write_metrics_csv(out / "ablation_metrics.csv", rows,
                      ["arm", "seed", "best_epoch", "pw_f1", "pph_f1", "iph_f1", "macro_f1"])
    if not args.quiet:
        print(result.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(points=args.points, seed=args.seed or 0)
    report = gradcheck.format_report(results)
    if args.out:
        out = _prepare_out(args)
        _echo_config(out, "gradcheck", {"points": args.points, "seed": args.seed or 0,
                                        "rtol": gradcheck.RTOL, "h": gradcheck.H})
        (out / "gradcheck.txt").write_text(report + "\n")
    if not args.quiet:
        print(report)
    return EXIT_OK if all(r.passed for r in results) else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--quiet", action="store_true")

    def with_out(p, required=True):
        p.add_argument("--out", required=required, help="output directory")
        return p

    parser = argparse.ArgumentParser(prog="sswp", description="SSWP prosodic boundary annotation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = with_out(sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus"))
    p.add_argument("--num-utterances", type=int)
    p.add_argument("--comma-prob", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.set_defaults(func=cmd_gen_data)

    def model_flags(p):
        p.add_argument("--d-model", type=int)
        p.add_argument("--d-joint", type=int)
        p.add_argument("--n-heads", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--word-units", action="store_true",
                       help="pair plain words instead of word+punctuation / speech+silence")

    p = with_out(sub.add_parser("pretrain", parents=[common], help="contrastive pretraining"))
    p.add_argument("--corpus")
    p.add_argument("--lr0", type=float)
    p.add_argument("--init-from")
    model_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = with_out(sub.add_parser("train", parents=[common], help="train the boundary annotator"))
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--pretrained", help="encoder checkpoint from `pretrain`")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-head", type=float)
    p.add_argument("--freeze-encoders", action="store_true")
    p.add_argument("--no-bilstm", action="store_true")
    p.add_argument("--text-only", action="store_true")
    model_flags(p)
    p.set_defaults(func=cmd_train)

    p = with_out(sub.add_parser("annotate", parents=[common], help="label a corpus"))
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.set_defaults(func=cmd_annotate)

    p = with_out(sub.add_parser("eval", parents=[common], help="score predictions against gold"))
    p.add_argument("--pred")
    p.add_argument("--gold")
    p.set_defaults(func=cmd_eval)

    p = with_out(sub.add_parser("ablate", parents=[common], help="run ablation arms"))
    p.add_argument("--pretrain-corpus")
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--arms", help=f"comma-separated subset of {','.join(ARMS)}")
    p.add_argument("--seeds", help="comma-separated stage-2 seeds")
    p.add_argument("--epochs", type=int, help="stage-2 epochs")
    p.add_argument("--pretrain-epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = with_out(sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite"),
                 required=False)
    p.add_argument("--points", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"sswp: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ckpt.CheckpointError, CorpusFormatError, CorpusValidationError, MetricsError) as e:
        print(f"sswp: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"sswp: {e}", file=sys.stderr)
        return EXIT_DATA
    except dc.NumericAbort as e:
        print(f"sswp: numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
