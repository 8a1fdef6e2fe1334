import csv
import hashlib
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from simsid.cli import main, parse_sweep
from simsid.config import ConfigError
from simsid.data import gen_synthetic, to_uint8

SMOKE = ["--epochs", "1", "--n-train", "8", "--n-val", "4", "--n-test", "4", "--batch-size", "4"]
SCORE_RE = re.compile(r"^(?:(\S+) )?raw=([0-9.eE+-]+) A=([0-9.eE+-]+)$")


def digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*.png"))}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *SMOKE, "--out", str(out)]) == 0
    return out


# -- gen-synth -------------------------------------------------------------------------------


def test_gen_synth_counts_and_determinism(tmp_path, capsys):
    args = ["gen-synth", "--n-train", "6", "--n-val", "2", "--n-test", "4", "--seed", "7"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    printed = capsys.readouterr().out
    assert "train/normal 6" in printed and "test/abnormal 2" in printed and "total 12" in printed
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert (tmp_path / "a" / "gen-synth.config").exists()


def test_gen_synth_contamination(tmp_path):
    assert main(["gen-synth", "--n-train", "8", "--n-val", "2", "--n-test", "2", "--contamination", "0.25",
                 "--out", str(tmp_path)]) == 0
    n_abn = len(list((tmp_path / "train" / "abnormal").glob("*.png")))
    n_norm = len(list((tmp_path / "train" / "normal").glob("*.png")))
    assert (n_abn, n_norm) == (2, 6)


def test_gen_synth_refuses_non_empty_dir(tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    assert main(["gen-synth", "--n-train", "2", "--n-val", "2", "--n-test", "2", "--out", str(tmp_path)]) == 2
    assert main(["gen-synth", "--n-train", "2", "--n-val", "2", "--n-test", "2", "--out", str(tmp_path),
                 "--force"]) == 0


# -- train / eval / score ----------------------------------------------------------------------


def test_train_outputs(trained):
    assert (trained / "best.ckpt").exists()
    assert (trained / "train_log.csv").exists()
    text = (trained / "train.config").read_text()
    assert "batch_size = 4" in text and "lambda_s = 10.0" in text


def test_resolved_config_echoes_defaults(tmp_path):
    # a bad data path fails after the config is resolved, so nothing is trained
    code = main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")])
    assert code == 2


def test_eval_reports(trained, capsys):
    assert main(["eval", *SMOKE, "--out", str(trained)]) == 0
    out = trained / "eval"
    metrics = dict(line.split("=", 1) for line in (out / "metrics.txt").read_text().splitlines())
    assert {"auc", "acc", "f1"} <= set(metrics)
    with open(out / "scores.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and set(rows[0]) == {"path", "label", "raw", "A"}
    for name in ("roc.csv", "pr.csv", "roc.svg", "pr.svg"):
        assert (out / name).stat().st_size > 0
    first = (out / "scores.csv").read_bytes()
    assert main(["eval", *SMOKE, "--out", str(trained)]) == 0
    assert (out / "scores.csv").read_bytes() == first


def test_eval_grid_mismatch_rejected(trained):
    assert main(["eval", *SMOKE, "--grid", "2x2", "--out", str(trained)]) == 2


def test_score_single_and_directory(trained, tmp_path, capsys):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    for i, s in enumerate(gen_synthetic(3, seed=0)):
        Image.fromarray(to_uint8(s.pixels)).save(imgs / f"{2 - i}.png")
    capsys.readouterr()
    assert main(["score", "--out", str(trained), "--image", str(imgs / "0.png")]) == 0
    line = capsys.readouterr().out.strip()
    m = SCORE_RE.match(line)
    assert m and m.group(1) is None
    a = float(m.group(3))
    assert 0.0 < a < 1.0
    assert main(["score", "--out", str(trained), "--image", str(imgs)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    names = [Path(SCORE_RE.match(x).group(1)).name for x in lines]
    assert names == ["0.png", "1.png", "2.png"]


def test_score_training_image_is_near_half(trained, capsys):
    from simsid.data import synthetic_split
    sample = synthetic_split(8, 2, 2, seed=0, pool=0).train[0]
    path = trained.parent / "train0.png"
    Image.fromarray(to_uint8(sample.pixels)).save(path)
    capsys.readouterr()
    assert main(["score", "--out", str(trained), "--image", str(path)]) == 0
    a = float(SCORE_RE.match(capsys.readouterr().out.strip()).group(3))
    # calibrated on the 8 training images: a training image sits within a few sigma of mu
    assert 0.05 < a < 0.95


def test_score_unreadable_image(trained, tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"garbage")
    assert main(["score", "--out", str(trained), "--image", str(bad)]) == 2


# -- usage and sweeps ----------------------------------------------------------------------------


@pytest.mark.parametrize("argv", [[], ["fly"], ["train", "--epochs"], ["train", "--bogus-key", "1"],
                                  ["train", "--config", "/nonexistent.cfg"], ["train", "positional"]])
def test_usage_errors(argv):
    assert main(argv) == 1


def test_parse_sweep():
    assert parse_sweep("patch=1,2,4,8") == ("grid", [(1, 1), (2, 2), (4, 4), (8, 8)])
    assert parse_sweep("contamination=0,0.1,0.25,0.5") == ("contamination", [0.0, 0.1, 0.25, 0.5])
    assert parse_sweep("topk=1,5") == ("top_k", [1, 5])
    with pytest.raises(ConfigError):
        parse_sweep("")
    with pytest.raises(ConfigError):
        parse_sweep("depth=1,2")


def test_ablate_records_failed_cells(tmp_path):
    # top_k=200 exceeds the 100 items per block, so that cell fails while the sweep continues
    code = main(["ablate", *SMOKE, "--sweep", "top_k=1,200", "--out", str(tmp_path)])
    assert code == 0
    with open(tmp_path / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["setting"] for r in rows] == ["top_k=1", "top_k=200"]
    assert rows[0]["status"] == "ok" and 0.0 <= float(rows[0]["auc"]) <= 1.0
    assert rows[1]["status"].startswith("failed")
    assert (tmp_path / "results.svg").read_text().startswith("<svg")


def test_empty_sweep_rejected(tmp_path):
    assert main(["ablate", *SMOKE, "--out", str(tmp_path)]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "simsid.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "simsid" in proc.stderr
