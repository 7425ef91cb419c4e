import csv
import json
import shutil

import numpy as np
import pytest

from gdprune import autograd as ag
from gdprune.checkpoint import load_checkpoint
from gdprune.codec import CodecConfig, ToyCodec
from gdprune.config import ExperimentConfig, LossWeights
from gdprune.errors import ConfigError, NumericFault
from gdprune.train import (METRIC_COLUMNS, Adam, MetricLog, Trainer, evaluate, evaluate_trainer, lr_schedule,
                           rds_loss, resume, step_budget, total_loss, train_dense, train_sparse)

TINY = ExperimentConfig(codec=CodecConfig(base_width=4, latent_channels=4, num_downsamples=2)).replace(
    optim={"crop": 16, "lr": 1e-3, "batch": 2},
    data={"frame_size": 16, "num_sequences": 2, "sequence_length": 3, "eval_sequences": 1, "eval_length": 2},
)


def scalar(v):
    return ag.tensor(np.float32(v))


def test_rds_loss_arithmetic():
    w = LossWeights()
    assert rds_loss(scalar(0), scalar(0), scalar(0.01), scalar(0.5), 0.5, w).item() == pytest.approx(2.56)
    assert rds_loss(scalar(0), scalar(0), scalar(0), scalar(0.4), 0.4, w).item() == 0.0
    # rate is bits per pixel
    assert rds_loss(scalar(100), scalar(28), scalar(0), None, 0.0, w, num_pixels=64).item() == 2.0


@pytest.mark.parametrize("s,sign", [(0.3, -1), (0.7, 1)])
def test_sparsity_gap_gradient(s, sign):
    sv = ag.parameter(np.float64(s), dtype=np.float64)
    ag.backward(rds_loss(scalar(0), scalar(0), scalar(0), sv, 0.5, LossWeights()))
    assert sv.grad == sign * 20.0


def test_sparsity_gap_gradient_at_kink_is_zero():
    sv = ag.parameter(np.float64(0.5), dtype=np.float64)
    ag.backward(rds_loss(scalar(0), scalar(0), scalar(0), sv, 0.5, LossWeights()))
    assert sv.grad == 0.0


def test_total_loss():
    assert total_loss(scalar(1), scalar(2), 0.5).item() == 2.0
    assert total_loss(scalar(1.5), scalar(2), 0.0).item() == 1.5
    assert total_loss(scalar(1.5), scalar(0), 0.7).item() == 1.5


def test_lr_schedule():
    assert lr_schedule(0, 1000, 1e-4) == 1e-4
    assert lr_schedule(399, 1000, 1e-4) == 1e-4
    assert lr_schedule(500, 1000, 1e-4) == 5e-5
    assert lr_schedule(950, 1000, 1e-4) == pytest.approx(6.25e-6)


def test_step_budget():
    assert step_budget(0.5, 5000, "none") == 5000
    assert step_budget(0.5, 200000, "proportional") == 100000
    with pytest.raises(ConfigError):
        step_budget(0.5, 10, "log")


def test_adam_first_step_is_lr_sized():
    p = ag.parameter(np.array([1.0, -1.0]), dtype=np.float64)
    opt = Adam({"p": p})
    p.grad = np.array([0.3, -5.0])
    opt.step(0.1)
    np.testing.assert_allclose(p.value, [0.9, -0.9], rtol=1e-6)


def test_adam_eps_override():
    p = ag.parameter(np.array([0.0]), dtype=np.float64)
    opt = Adam({"p": p}, eps=1.0, eps_overrides={"p": 1e-30})
    p.grad = np.array([1e-12])
    opt.step(0.1)
    assert p.value[0] == pytest.approx(-0.1)


def test_metric_log(tmp_path):
    log = MetricLog(tmp_path / "m.csv")
    row = {c: 0.0 for c in METRIC_COLUMNS}
    log.append({**row, "step": 0})
    log.append({**row, "step": 1})
    with pytest.raises(ValueError):
        log.append({**row, "step": 3})
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ("step,beta,lambda3,lr,soft_sparsity,hard_sparsity,target_sparsity,rate_bpp,psnr_db,"
                        "rds_loss,distill_loss,total_loss")
    assert len(lines) == 3


def test_dense_and_ste_sparse_agree_bitwise():
    cfg = TINY.replace(prune={"approximator": "ste"}, loss={"lambda2": 0.0}, distill={"mode": "none"})
    dense = Trainer(cfg, ToyCodec(cfg.codec, seed=1), sparse=False, total_steps=5)
    sparse = Trainer(cfg, ToyCodec(cfg.codec, seed=1), sparse=True, total_steps=5)
    dense.run()
    sparse.run()
    assert sparse.sparsifier.hard_sparsity() == 0.0
    for k, p in dense.model.params.items():
        assert p.value.tobytes() == sparse.model.params[k].value.tobytes(), k


def test_sparse_step_logs_and_protects_teacher():
    cfg = TINY.replace(distill={"mode": "adaptive"})
    teacher = ToyCodec(cfg.codec, seed=2)
    before = {k: v.value.copy() for k, v in teacher.params.items()}
    tr = Trainer(cfg, teacher.clone(), sparse=True, teacher=teacher, total_steps=100)
    tr.state.step = 10  # target sparsity is already above zero here
    row = tr.step()
    assert set(row) == set(METRIC_COLUMNS)
    assert row["distill_loss"] >= 0 and 0 < row["lambda3"] <= 1
    assert all(p.grad is None for p in tr.teacher.params.values())
    assert all(np.array_equal(before[k], v.value) for k, v in teacher.params.items())
    # stage one distills the prediction branch only; residual thresholds still learn
    assert tr.plan.stages[tr.state.stage_index].name == "pred"
    res_thresholds = [t for k, t in tr.sparsifier.thresholds.items() if k.startswith("res.")]
    assert all(t.grad is not None and t.grad != 0 for t in res_thresholds)


def test_distillation_needs_teacher():
    with pytest.raises(ConfigError):
        Trainer(TINY, ToyCodec(TINY.codec), sparse=True, total_steps=3)


def test_numeric_fault_dumps_diagnostics(tmp_path):
    cfg = TINY.replace(distill={"mode": "none"})
    model = ToyCodec(cfg.codec)
    model.params["res.dec0.weight"].value[0, 0, 0, 0] = np.inf
    tr = Trainer(cfg, model, sparse=True, total_steps=3, metrics_path=tmp_path / "metrics.csv")
    with pytest.raises(NumericFault):
        tr.step()
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["step"] == 0 and "res.dec0" in diag["layers"]
    assert diag["layers"]["res.dec0"]["finite_weights"] is False


def test_run_directory_contents(tmp_path):
    res = train_dense(TINY, steps=3, run_dir=tmp_path / "d")
    for name in ("manifest.ini", "seed.txt", "metrics.csv", "final.ckpt"):
        assert (tmp_path / "d" / name).exists()
    with open(tmp_path / "d" / "metrics.csv") as fh:
        steps = [int(r["step"]) for r in csv.DictReader(fh)]
    assert steps == [0, 1, 2]
    ev = evaluate_trainer(res.trainer)
    assert ev.rate_bpp > 0 and np.isfinite(ev.psnr_db)


def test_resume_is_bitwise(tmp_path):
    cfg = TINY.replace(distill={"mode": "adaptive"}, run={"checkpoint_every": 4})
    teacher = ToyCodec(cfg.codec, seed=3)
    train_sparse(cfg, teacher, run_dir=tmp_path / "full", total_steps=10)
    shutil.copy(tmp_path / "full" / "metrics.csv", tmp_path / "part.csv")
    tr = resume(cfg, tmp_path / "full" / "step0000004.ckpt", teacher=teacher, metrics_path=tmp_path / "part.csv")
    assert tr.state.step == 4 and len(tr.log.rows) == 4
    tr.run()
    assert (tmp_path / "part.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()
    tr.save(tmp_path / "resumed.ckpt")
    a = load_checkpoint(tmp_path / "resumed.ckpt").arrays
    b = load_checkpoint(tmp_path / "full" / "final.ckpt").arrays
    assert all(a[k].tobytes() == b[k].tobytes() for k in b)


def test_evaluate_penalises_sparsity_gap():
    from gdprune.train import load_sequences

    seqs = load_sequences(TINY, evaluation=True)
    model = ToyCodec(TINY.codec)
    base = evaluate(model, seqs, TINY.loss)
    gap = evaluate(model, seqs, TINY.loss, soft_sparsity=0.2, s_tar=0.5)
    assert gap.rds_loss == pytest.approx(base.rds_loss + 20 * 0.3)
