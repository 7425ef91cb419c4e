import csv
import json

import numpy as np
import pytest

from gdprune.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_IO, EXIT_NUMERIC, main
from gdprune.complexity import write_rd_csv

TINY_INI = """
[codec]
base_width = 4
latent_channels = 4
num_downsamples = 2

[optim]
crop = 16
batch = 2
lr = 0.001
dense_steps = 4
K_base = 6

[data]
frame_size = 16
num_sequences = 2
sequence_length = 3
eval_sequences = 1
eval_length = 2
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return p


@pytest.fixture
def teacher(tmp_path, tiny):
    assert main(["train-dense", "--config", str(tiny), "--out", str(tmp_path), "--name", "t"]) == 0
    return tmp_path / "t" / "final.ckpt"


def test_bd_identical(tmp_path, capsys):
    write_rd_csv(tmp_path / "a.csv", [0.1, 0.2, 0.4, 0.8], [30, 32, 34, 35])
    assert main(["bd", str(tmp_path / "a.csv"), str(tmp_path / "a.csv"), "-o", str(tmp_path / "bd.json")]) == 0
    res = json.loads((tmp_path / "bd.json").read_text())
    assert res == {"bd_rate_percent": 0.0, "bd_psnr_db": 0.0}


def test_bd_bad_curve(tmp_path):
    write_rd_csv(tmp_path / "a.csv", [0.1, 0.2], [30, 32])
    assert main(["bd", str(tmp_path / "a.csv"), str(tmp_path / "a.csv")]) == EXIT_INPUT


@pytest.mark.filterwarnings("ignore:overflow")
def test_exit_codes(tmp_path, tiny):
    assert main(["train-dense", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    bad = tmp_path / "bad.ini"
    bad.write_text("[prune]\nwho = 1\n")
    assert main(["train-dense", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["compact", str(tmp_path / "none.ckpt")]) == EXIT_IO
    nan = tmp_path / "nan.ini"
    nan.write_text(TINY_INI + "\n[loss]\nlambda1 = 1e38\n")
    assert main(["train-dense", "--config", str(nan), "--out", str(tmp_path), "--steps", "3"]) == EXIT_NUMERIC


def test_output_root_env(tmp_path, tiny, monkeypatch):
    monkeypatch.setenv("GDPRUNE_OUT", str(tmp_path / "envroot"))
    assert main(["train-dense", "--config", str(tiny), "--steps", "2"]) == 0
    assert (tmp_path / "envroot" / "dense" / "final.ckpt").exists()


def test_prune_compact_eval(tmp_path, tiny, teacher):
    assert main(["prune", "--config", str(tiny), "--teacher", str(teacher), "--out", str(tmp_path),
                 "--name", "p", "--s-tar", "0.25"]) == 0
    run = tmp_path / "p"
    for name in ("manifest.ini", "seed.txt", "metrics.csv", "final.ckpt"):
        assert (run / name).exists()
    assert main(["compact", str(run / "final.ckpt"), "-o", str(tmp_path / "c"), "--resolution", "32", "32"]) == 0
    report = json.loads((tmp_path / "c" / "complexity.json").read_text())
    assert report["macs_after_prune"] <= report["macs_total"]
    assert set(json.loads((tmp_path / "c" / "plan.json").read_text())) >= {"pred.dec0", "res.out"}
    assert (tmp_path / "c" / "compact.ckpt").exists()
    assert main(["eval", str(run / "final.ckpt"), "-o", str(tmp_path / "rd.csv")]) == 0


def test_eval_four_checkpoints(tmp_path, tiny):
    ckpts = []
    for lam in (256, 512, 1024, 2048):
        ini = tmp_path / f"l{lam}.ini"
        ini.write_text(TINY_INI + f"\n[loss]\nlambda1 = {lam}\n")
        assert main(["train-dense", "--config", str(ini), "--out", str(tmp_path), "--name", f"l{lam}"]) == 0
        ckpts.append(str(tmp_path / f"l{lam}" / "final.ckpt"))
    assert main(["eval", *ckpts, "-o", str(tmp_path / "rd.csv")]) == 0
    with open(tmp_path / "rd.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert sorted(float(r["lambda1"]) for r in rows) == [256, 512, 1024, 2048]


def test_ablate_grid(tmp_path, tiny, teacher):
    assert main(["ablate", "--config", str(tiny), "--teacher", str(teacher), "--out", str(tmp_path),
                 "--approximators", "ste,gd", "--distill", "none", "--s-tar", "0.5", "--seeds", "0"]) == 0
    with open(tmp_path / "ablate" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    runs = [r for r in rows if r["seed"] != "median"]
    assert len(runs) == 2
    assert {r["approximator"] for r in runs} == {"ste", "gd"}
    assert len(rows) - len(runs) == 2
    # STE runs never decay beta
    with open(tmp_path / "ablate" / "ste_none_s0.5_seed0" / "metrics.csv") as fh:
        assert {float(r["beta"]) for r in csv.DictReader(fh)} == {1.0}


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--trials", "2"]) == 0
    assert "PASS" in capsys.readouterr().out
