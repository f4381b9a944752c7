"""Run gen-data, pretrain, train, annotate and eval in sequence under one output root.

    python scripts/run_pipeline.py --out runs/demo [--config configs/default.toml]
"""
import argparse
import sys
from pathlib import Path

from sswp.cli import main as sswp


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "default.toml"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    root = Path(args.out)
    common = ["--config", args.config, "--seed", str(args.seed)]
    data, enc, ann, pred, ev = (root / n for n in ("data", "encoder", "annotator", "annotations", "eval"))
    steps = [
        ["gen-data", *common, "--out", str(data)],
        ["pretrain", *common, "--corpus", str(data / "train.jsonl"), "--out", str(enc)],
        ["train", *common, "--train", str(data / "train.jsonl"), "--valid", str(data / "valid.jsonl"),
         "--pretrained", str(enc / "encoder.ckpt"), "--out", str(ann)],
        ["annotate", "--checkpoint", str(ann / "annotator.ckpt"), "--corpus", str(data / "test.jsonl"),
         "--out", str(pred)],
        ["eval", "--pred", str(pred / "annotations.jsonl"), "--gold", str(data / "test.jsonl"), "--out", str(ev)],
    ]
    for argv in steps:
        code = sswp(argv)
        if code:
            sys.exit(code)


if __name__ == "__main__":
    main()
