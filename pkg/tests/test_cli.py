import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from sswp.cli import main
from sswp.corpus import load_corpus

MODEL = """
d_model = 16
d_joint = 8
n_heads = 2
text_layers = 1
audio_layers = 1
kernel = 3
"""

TINY_TOML = f"""
[pretrain]
epochs = 1
batch_size = 16
{MODEL}
[annotator]
epochs = 1
batch_size = 8
hidden = 8
lr = 1e-3
{MODEL}
"""


def digest(root: Path, pattern="*") -> str:
    h = hashlib.sha256()
    for f in sorted(root.rglob(pattern)):
        if f.is_file():
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY_TOML)
    return str(p)


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--seed", "7", "--num-utterances", "20", "--out", str(out), "--quiet"]) == 0
    return out


def test_gen_data_deterministic(tmp_path, data_dir):
    again = tmp_path / "again"
    assert main(["gen-data", "--seed", "7", "--num-utterances", "20", "--out", str(again), "--quiet"]) == 0
    assert digest(data_dir) == digest(again)
    assert len(load_corpus(data_dir / "train.jsonl")) == 16
    resolved = json.loads((data_dir / "resolved_config.json").read_text())
    assert resolved["generator"]["seed"] == 7 and resolved["generator"]["num_utterances"] == 20


def test_toml_then_flags(tmp_path):
    cfg = tmp_path / "g.toml"
    cfg.write_text("[generator]\nnum_utterances = 5\ncomma_prob = 1.0\nseed = 3\n")
    out = tmp_path / "o"
    assert main(["gen-data", "--config", str(cfg), "--seed", "4", "--out", str(out), "--quiet"]) == 0
    resolved = json.loads((out / "resolved_config.json").read_text())["generator"]
    assert (resolved["num_utterances"], resolved["comma_prob"], resolved["seed"]) == (5, 1.0, 4)


def test_usage_and_config_errors(tmp_path, capsys):
    assert main(["gen-data"]) == 2
    assert main(["gen-data", "--num-utterances", "0", "--out", str(tmp_path / "x")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[generator\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2
    bad.write_text("[generator]\nbogus = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2
    assert main(["ablate", "--arms", "full,nonsense", "--out", str(tmp_path / "z")]) == 2
    assert "nonsense" in capsys.readouterr().err
    assert main(["no-such-command"]) == 2


def _pipeline(root: Path, data: Path, cfg: str):
    enc, ann, pred, ev = (root / n for n in ("enc", "ann", "pred", "eval"))
    assert main(["pretrain", "--config", cfg, "--corpus", str(data / "corpus.jsonl"),
                 "--out", str(enc), "--quiet"]) == 0
    assert main(["train", "--config", cfg, "--train", str(data / "train.jsonl"),
                 "--valid", str(data / "valid.jsonl"), "--pretrained", str(enc / "encoder.ckpt"),
                 "--out", str(ann), "--quiet"]) == 0
    assert main(["annotate", "--checkpoint", str(ann / "annotator.ckpt"),
                 "--corpus", str(data / "test.jsonl"), "--out", str(pred), "--quiet"]) == 0
    assert main(["eval", "--pred", str(pred / "annotations.jsonl"), "--gold", str(data / "test.jsonl"),
                 "--out", str(ev), "--quiet"]) == 0
    return enc, ann, pred, ev


def test_pipeline_end_to_end_and_deterministic(tmp_path, data_dir, cfg_file):
    before = digest(data_dir)
    enc, ann, pred, ev = _pipeline(tmp_path / "r1", data_dir, cfg_file)
    assert digest(data_dir) == before  # inputs untouched
    for f in (enc / "pretrain_metrics.csv", ann / "train_metrics.csv", ev / "metrics.csv",
              enc / "resolved_config.json", ann / "resolved_config.json"):
        assert f.exists(), f
    header = (enc / "pretrain_metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,mean_loss,retrieval_top1,lr,tau"
    n_in = len((data_dir / "test.jsonl").read_text().splitlines())
    assert len((pred / "annotations.jsonl").read_text().splitlines()) == n_in
    report = json.loads((ev / "report.json").read_text())
    assert set(report["classes"]) == {"LW", "PW", "PPH", "IPH"}

    run2 = _pipeline(tmp_path / "r2", data_dir, cfg_file)
    for a, b in zip((enc, ann, pred, ev), run2):
        assert digest(a, "*.ckpt") == digest(b, "*.ckpt")
        assert digest(a, "*.csv") == digest(b, "*.csv")
        assert digest(a, "*.jsonl") == digest(b, "*.jsonl")


def test_eval_identical_files(tmp_path, data_dir):
    out = tmp_path / "ev"
    gold = str(data_dir / "test.jsonl")
    assert main(["eval", "--pred", gold, "--gold", gold, "--out", str(out), "--quiet"]) == 0
    report = json.loads((out / "report.json").read_text())
    for name, s in report["classes"].items():
        if not s["undefined"]:
            assert s["f1"] == 1.0, name


def test_eval_mismatch_is_data_error(tmp_path, data_dir):
    out = tmp_path / "ev"
    assert main(["eval", "--pred", str(data_dir / "test.jsonl"), "--gold", str(data_dir / "valid.jsonl"),
                 "--out", str(out), "--quiet"]) == 3


def test_incompatible_checkpoint_exit_3(tmp_path, data_dir, cfg_file, capsys):
    enc = tmp_path / "enc"
    assert main(["pretrain", "--config", cfg_file, "--corpus", str(data_dir / "corpus.jsonl"),
                 "--out", str(enc), "--quiet"]) == 0
    code = main(["train", "--config", cfg_file, "--d-joint", "12", "--train", str(data_dir / "train.jsonl"),
                 "--valid", str(data_dir / "valid.jsonl"), "--pretrained", str(enc / "encoder.ckpt"),
                 "--out", str(tmp_path / "ann"), "--quiet"])
    assert code == 3
    assert "d_joint" in capsys.readouterr().err


def test_missing_input_exit_3(tmp_path, cfg_file):
    assert main(["pretrain", "--config", cfg_file, "--corpus", str(tmp_path / "nope.jsonl"),
                 "--out", str(tmp_path / "o"), "--quiet"]) == 3


def test_nan_features_exit_4(tmp_path, data_dir, cfg_file, capsys):
    for f in (data_dir / "frames").iterdir():
        buf = bytearray(f.read_bytes())
        buf[16:] = np.full((len(buf) - 16) // 4, np.nan, "<f4").tobytes()
        f.write_bytes(bytes(buf))
    code = main(["pretrain", "--config", cfg_file, "--corpus", str(data_dir / "corpus.jsonl"),
                 "--out", str(tmp_path / "o"), "--quiet"])
    assert code == 4
    assert "epoch 1" in capsys.readouterr().err


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--points", "1", "--out", str(tmp_path / "g")]) == 0
    text = (tmp_path / "g" / "gradcheck.txt").read_text()
    assert "max_rel_err" in text and "all checks passed" in text
    assert "depthwise_conv1d" in capsys.readouterr().out
