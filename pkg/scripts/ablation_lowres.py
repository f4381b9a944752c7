"""Low-resource ablation: 200 training sentences, several stage-2 seeds.

    python scripts/ablation_lowres.py --out runs/ablation [--seeds 0,1,2] [--encoder enc.ckpt]
"""
import argparse
import logging
from pathlib import Path

from sswp.ablation import AblationConfig, run_ablation
from sswp.annotator import AnnotatorConfig
from sswp.contrastive import EncoderCheckpoint, PretrainConfig
from sswp.corpus import GeneratorConfig, generate_corpus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--arms", default="full,no_contrastive_pretrain,no_any_pretrain,no_sswp,text_only")
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--encoder", help="reuse an SSWP encoder checkpoint for the pretrained arms")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    pre_corpus = generate_corpus(GeneratorConfig())
    data = generate_corpus(GeneratorConfig(seed=2, num_utterances=500))
    train, valid, test = data[:200], data[200:300], data[300:]
    cfg = AblationConfig(arms=args.arms.split(","), seeds=[int(s) for s in args.seeds.split(",")],
                         pretrain=PretrainConfig(), annotator=AnnotatorConfig(epochs=args.epochs))
    given = {"sswp": EncoderCheckpoint.load(args.encoder)} if args.encoder else None
    result = run_ablation(pre_corpus, train, valid, test, cfg, pretrained=given)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(result.to_json() + "\n")
    table = result.table(("PW", "PPH", "IPH"))
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    for arm in result.arms():
        s = result.mean_scores(arm)
        print(f"{arm:<24} mean PW f1 {s['PW']['f1']:.3f}  PPH f1 {s['PPH']['f1']:.3f}")


if __name__ == "__main__":
    main()
