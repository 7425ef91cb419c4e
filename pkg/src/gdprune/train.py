"""Training loop for dense teachers and pruned students."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from gdprune import autograd as ag
from gdprune.autograd import Node
from gdprune.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from gdprune.codec import CodeResult, FrameContext, ToyCodec, psnr
from gdprune.complexity import masked_copy
from gdprune.config import ExperimentConfig, LossWeights, render
from gdprune.data import Batcher, FrameSequence, frame_pairs, load_raw, synth_corpus
from gdprune.distill import StagePlan, active_set, distill_loss, full_plan, lambda3_schedule, parse_plan
from gdprune.errors import ConfigError, NumericFault
from gdprune.pruning import Sparsifier, beta_schedule, target_sparsity

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "beta", "lambda3", "lr", "soft_sparsity", "hard_sparsity", "target_sparsity",
                  "rate_bpp", "psnr_db", "rds_loss", "distill_loss", "total_loss")
LR_BREAKPOINTS = (0.4, 0.6, 0.8, 0.9)


def rds_loss(R_m: Node, R_r: Node, D: Node, s: Node | None, s_tar_k: float, w: LossWeights,
             num_pixels: int = 1) -> Node:
    """Rate (bits per pixel) + lambda1 * distortion + lambda2 * |s - s_tar_k|."""
    rate = ag.mul(ag.add(R_m, R_r), 1.0 / num_pixels)
    loss = ag.add(rate, ag.mul(D, w.lambda1))
    if s is not None:
        loss = ag.add(loss, ag.mul(ag.abs_(ag.sub(s, s_tar_k)), w.lambda2))
    return loss


def total_loss(rds: Node, distill: Node, lambda3_k: float) -> Node:
    return ag.add(rds, ag.mul(distill, lambda3_k))


def lr_schedule(k: int, K: int, lr0: float) -> float:
    frac = k / K
    halvings = sum(1 for b in LR_BREAKPOINTS if frac >= b)
    return lr0 * 0.5 ** halvings


def step_budget(s_tar: float, K_base: int, scaling_mode: str = "none") -> int:
    if scaling_mode == "none":
        return int(K_base)
    if scaling_mode == "proportional":
        return max(1, int(round(K_base * s_tar)))
    raise ConfigError(f"unknown step scaling mode {scaling_mode!r}")


class Adam:
    def __init__(self, params: dict[str, Node], beta1=0.9, beta2=0.999, eps=1e-8,
                 eps_overrides: dict[str, float] | None = None):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.eps_for = {k: (eps_overrides or {}).get(k, eps) for k in params}
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step_size = lr * math.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= (step_size * m / (np.sqrt(v) + self.eps_for[name])).astype(p.dtype)


@dataclass
class TrainState:
    step: int = 0
    total_steps: int = 1
    seed: int = 0
    stage_index: int = 0
    ema_loss: float | None = None
    ema_psnr: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvalResult:
    rate_bpp: float
    psnr_db: float
    mse: float
    rds_loss: float
    hard_sparsity: float = 0.0
    soft_sparsity: float = 0.0


class MetricLog:
    """Append-only CSV of per-step metrics."""

    def __init__(self, path: str | Path | None = None, resume: bool = False):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path and not (resume and self.path.exists()):
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)
        elif self.path and resume:
            with open(self.path, newline="") as fh:
                self.rows = [dict(r) for r in csv.DictReader(fh)]

    def append(self, row: dict) -> None:
        if self.rows:
            last = int(self.rows[-1]["step"])
            if int(row["step"]) != last + 1:
                raise ValueError(f"metric log step {row['step']} does not follow {last}")
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in METRIC_COLUMNS])

    def truncate_to(self, step: int) -> None:
        """Drop rows with step >= ``step`` (used when resuming from an earlier checkpoint)."""
        self.rows = [r for r in self.rows if int(r["step"]) < step]
        if self.path:
            with open(self.path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(METRIC_COLUMNS)
                for r in self.rows:
                    w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def load_sequences(cfg: ExperimentConfig, evaluation: bool = False) -> list[FrameSequence]:
    d = cfg.data
    c = cfg.codec.input_channels
    if d.source != "synthetic":
        seq = load_raw(d.source, channels=c)
        return [seq]
    if evaluation:
        return synth_corpus(d.eval_seed, d.eval_sequences, d.eval_length, d.frame_size, d.max_motion, c)
    return synth_corpus(d.data_seed, d.num_sequences, d.sequence_length, d.frame_size, d.max_motion, c)


def stage_plan_for(cfg: ExperimentConfig, model: ToyCodec) -> StagePlan | None:
    if cfg.distill.mode == "none":
        return None
    if cfg.distill.mode == "full":
        return full_plan(model.topology)
    return parse_plan(cfg.distill.plan, model.topology)


class Trainer:
    """One training run (dense or sparse), resumable from a checkpoint."""

    def __init__(self, cfg: ExperimentConfig, model: ToyCodec, *, sparse: bool, teacher: ToyCodec | None = None,
                 sequences: Sequence[FrameSequence] | None = None, total_steps: int | None = None,
                 metrics_path: str | Path | None = None, seed: int | None = None):
        self.cfg = cfg
        self.model = model
        self.sparse = sparse
        seed = cfg.run.seed if seed is None else seed
        K = total_steps if total_steps is not None else (cfg.total_steps() if sparse else cfg.optim.dense_steps)
        self.state = TrainState(step=0, total_steps=max(1, K), seed=seed)
        self.sched = cfg.schedule(self.state.total_steps)
        self.sparsifier = None
        self.plan = None
        self.teacher = None
        if sparse:
            p = cfg.prune
            self.sparsifier = Sparsifier(model.params, model.topology.prunable_ids(), p.shared_threshold, p.norm_grad)
            self.plan = stage_plan_for(cfg, model)
            if self.plan is not None:
                if teacher is None:
                    raise ConfigError("distillation needs a teacher model")
                if teacher.topology != model.topology:
                    raise ConfigError("teacher and student topologies differ")
                self.teacher = teacher.clone(requires_grad=False)
        named = dict(model.params)
        o = cfg.optim
        eps_overrides = {}
        if self.sparsifier is not None:
            for k, t in self.sparsifier.thresholds.items():
                named[f"threshold/{k}"] = t
                eps_overrides[f"threshold/{k}"] = o.threshold_eps
        self.opt = Adam(named, o.adam_beta1, o.adam_beta2, o.adam_eps, eps_overrides)
        self.batcher = Batcher(sequences if sequences is not None else load_sequences(cfg), o.batch, o.crop, seed)
        self.log = MetricLog(metrics_path)

    # -- schedules ------------------------------------------------------

    def beta(self, k: int) -> float:
        if not self.sparse or self.cfg.prune.approximator == "ste":
            return 1.0
        return beta_schedule(k, self.sched)

    def lambda3(self, k: int) -> float:
        if self.plan is None:
            return 0.0
        p = self.cfg.prune
        return lambda3_schedule(k, self.state.total_steps, self.cfg.loss.lambda3_init, p.L0, p.L1)

    def noise_rng(self, k: int) -> np.random.Generator:
        return np.random.default_rng([self.state.seed, k, 7])

    # -- one step -------------------------------------------------------

    def step(self) -> dict:
        st = self.state
        k, K = st.step, st.total_steps
        if k >= K:
            raise RuntimeError("training already finished")
        beta = self.beta(k)
        lam3 = self.lambda3(k)
        s_tar_k = target_sparsity(k, self.sched) if self.sparse else 0.0
        lr = lr_schedule(k, K, self.cfg.optim.lr)
        P = frozenset()
        if self.plan is not None:
            st.stage_index = self.plan.stage_index(k, K)
            P = active_set(k, self.plan, K)
        ctx = self.batcher.batch_at(k)
        npix = ctx.current.shape[0] * ctx.current.shape[2] * ctx.current.shape[3]

        self.opt.zero_grad()
        try:
            weight_fn = self.sparsifier.weight_fn(beta) if self.sparse else None
            out = self.model.code_frame(ctx, "train", self.noise_rng(k), weight_fn)
            D = ag.mean(ag.square(ag.sub(out.reconstruction, ag.tensor(ctx.current))))
            s = self.sparsifier.soft_sparsity(self.cfg.prune.tau) if self.sparse else None
            s_loss = (self.sparsifier.sparsity_estimate(self.cfg.prune.tau, self.cfg.prune.sparsity_estimate)
                      if self.sparse else None)
            hard = self.sparsifier.hard_sparsity() if self.sparse else 0.0
            rds = rds_loss(out.rate_motion, out.rate_residual, D, s_loss, s_tar_k, self.cfg.loss, npix)
            if P:
                with ag.no_grad():
                    t_out = self.teacher.code_frame(ctx, "train", self.noise_rng(k))
                dl = distill_loss(out.hidden, t_out.hidden, P, self.cfg.distill.per_channel)
            else:
                dl = Node(np.zeros((), dtype=np.float32))
            loss = total_loss(rds, dl, lam3)
            ag.backward(loss)
        except NumericFault as exc:
            raise self._fault(k, str(exc)) from exc
        bad = [name for name, p in self.opt.params.items() if p.grad is not None and not np.isfinite(p.grad).all()]
        if bad:
            raise self._fault(k, f"non-finite gradients: {bad[:5]}")
        self.opt.step(lr)
        if self.sparsifier is not None:
            self.sparsifier.clamp_thresholds()
            self.sparsifier.refresh()
        bad = [name for name, p in self.opt.params.items()
               if not (np.isfinite(p.value).all() and np.isfinite(self.opt.v[name]).all())]
        if bad:
            raise self._fault(k, f"non-finite parameters or optimizer moments after update: {bad[:5]}")

        total = loss.item()
        mse = D.item()
        rate = float((out.rate_motion.item() + out.rate_residual.item()) / npix)
        row = {
            "step": k, "beta": beta, "lambda3": lam3, "lr": lr,
            "soft_sparsity": s.item() if s is not None else 0.0, "hard_sparsity": hard,
            "target_sparsity": s_tar_k, "rate_bpp": rate,
            "psnr_db": 10.0 * math.log10(1.0 / mse) if mse > 0 else math.inf,
            "rds_loss": rds.item(), "distill_loss": dl.item(), "total_loss": total,
        }
        st.ema_loss = total if st.ema_loss is None else 0.99 * st.ema_loss + 0.01 * total
        st.ema_psnr = row["psnr_db"] if st.ema_psnr is None else 0.99 * st.ema_psnr + 0.01 * row["psnr_db"]
        st.step += 1
        self.log.append(row)
        return row

    def _fault(self, k: int, msg: str) -> NumericFault:
        diag = {"step": k, "error": msg}
        if self.sparsifier is not None:
            diag["layers"] = self.sparsifier.diagnostics()
        self.last_diagnostics = diag
        if self.log.path is not None:
            (self.log.path.parent / "diagnostics.json").write_text(json.dumps(diag, indent=2))
        return NumericFault(f"step {k}: {msg}; diagnostics: {json.dumps(diag)}")

    def run(self, until: int | None = None, checkpoint_dir: Path | None = None) -> list[dict]:
        stop = self.state.total_steps if until is None else min(until, self.state.total_steps)
        every = self.cfg.run.checkpoint_every
        rows = []
        while self.state.step < stop:
            rows.append(self.step())
            if checkpoint_dir is not None and every and self.state.step % every == 0:
                self.save(Path(checkpoint_dir) / f"step{self.state.step:07d}.ckpt")
        return rows

    # -- persistence ----------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        arrays: dict[str, np.ndarray] = dict(self.model.state_arrays())
        meta = {
            "kind": "sparse" if self.sparse else "dense",
            "train_state": self.state.to_dict(),
            "adam_t": self.opt.t,
            "experiment": render(self.cfg),
        }
        if self.sparsifier is not None:
            for k, t in self.sparsifier.thresholds.items():
                arrays[f"threshold/{k}"] = t.value
            for lid, mask in self.sparsifier.masks().items():
                arrays[f"mask/{lid}"] = mask.astype(np.float32)
            meta["pruning"] = {"layer_ids": self.sparsifier.layer_ids,
                               "shared_threshold": self.sparsifier.shared_threshold}
        for name in self.opt.params:
            arrays[f"adam.m/{name}"] = self.opt.m[name]
            arrays[f"adam.v/{name}"] = self.opt.v[name]
        return Checkpoint(self.model.config, self.model.topology, arrays, meta)

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.checkpoint())

    def restore(self, ckpt: Checkpoint) -> None:
        """Load weights, thresholds, optimizer moments and counters from ``ckpt``."""
        arrays = ckpt.arrays
        self.model.load_arrays({k: v for k, v in arrays.items() if k in self.model.params})
        if self.sparsifier is not None:
            for k, t in self.sparsifier.thresholds.items():
                t.value = arrays[f"threshold/{k}"].reshape(()).copy()
            self.sparsifier.refresh()
        for name in self.opt.params:
            if f"adam.m/{name}" in arrays:
                self.opt.m[name] = arrays[f"adam.m/{name}"].copy()
                self.opt.v[name] = arrays[f"adam.v/{name}"].copy()
        self.opt.t = int(ckpt.meta.get("adam_t", 0))
        ts = ckpt.meta.get("train_state")
        if ts:
            self.state = TrainState(**ts)
            self.sched = self.cfg.schedule(self.state.total_steps)
        self.log.truncate_to(self.state.step)


def model_from_checkpoint(ckpt: Checkpoint, requires_grad: bool = True) -> ToyCodec:
    params = {k: Node(v.copy(), requires_grad=requires_grad, name=k) for k, v in ckpt.arrays.items()
              if "/" not in k}
    return ToyCodec(ckpt.config, ckpt.topology, params)


def masks_from_checkpoint(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    return {k.split("/", 1)[1]: v.astype(bool) for k, v in ckpt.arrays.items() if k.startswith("mask/")}


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: ToyCodec, sequences: Sequence[FrameSequence], weights: LossWeights,
             masks: dict[str, np.ndarray] | None = None, soft_sparsity: float | None = None,
             s_tar: float = 0.0, hard_sparsity: float = 0.0) -> EvalResult:
    """Eval-mode rate/PSNR over every consecutive frame pair."""
    net = masked_copy(model, masks) if masks else model
    pairs = list(frame_pairs(sequences))
    cur = np.concatenate([p.current for p in pairs])
    ref = np.concatenate([p.reference for p in pairs])
    with ag.no_grad():
        out: CodeResult = net.code_frame(FrameContext(cur, ref), "eval")
    xhat = out.reconstruction.value
    npix = cur.shape[0] * cur.shape[2] * cur.shape[3]
    rate = (out.rate_motion.item() + out.rate_residual.item()) / npix
    mse = float(np.mean((xhat.astype(np.float64) - cur) ** 2))
    psnrs = [psnr(xhat[i], cur[i]) for i in range(cur.shape[0])]
    finite = [p for p in psnrs if math.isfinite(p)]
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    rds = rate + weights.lambda1 * mse
    if soft_sparsity is not None:
        rds += weights.lambda2 * abs(soft_sparsity - s_tar)
    return EvalResult(rate, mean_psnr, mse, rds, hard_sparsity, soft_sparsity or 0.0)


def evaluate_trainer(tr: Trainer, sequences: Sequence[FrameSequence] | None = None) -> EvalResult:
    seqs = sequences if sequences is not None else load_sequences(tr.cfg, evaluation=True)
    if tr.sparsifier is None:
        return evaluate(tr.model, seqs, tr.cfg.loss)
    with ag.no_grad():
        soft = tr.sparsifier.sparsity_estimate(tr.cfg.prune.tau, tr.cfg.prune.sparsity_estimate).item()
    return evaluate(tr.model, seqs, tr.cfg.loss, tr.sparsifier.masks(), soft, tr.cfg.prune.s_tar,
                    tr.sparsifier.hard_sparsity())


# ---------------------------------------------------------------------------
# top-level runs


@dataclass
class RunResult:
    trainer: Trainer
    run_dir: Path | None
    rows: list[dict] = field(default_factory=list)


def _prepare_dir(run_dir: str | Path | None, cfg: ExperimentConfig, seed: int) -> Path | None:
    if run_dir is None:
        return None
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.ini").write_text(render(cfg))
    (run_dir / "seed.txt").write_text(f"{seed}\n")
    return run_dir


def train_dense(cfg: ExperimentConfig, steps: int | None = None, seed: int | None = None,
                run_dir: str | Path | None = None, sequences=None) -> RunResult:
    """Rate + lambda1 * distortion training of a dense teacher."""
    seed = cfg.run.seed if seed is None else seed
    run_dir = _prepare_dir(run_dir, cfg, seed)
    model = ToyCodec(cfg.codec, seed=seed)
    steps = cfg.optim.dense_steps if steps is None else steps
    tr = Trainer(cfg, model, sparse=False, sequences=sequences, total_steps=steps,
                 metrics_path=run_dir / "metrics.csv" if run_dir else None, seed=seed)
    rows = tr.run(checkpoint_dir=run_dir)
    if run_dir:
        tr.save(run_dir / "final.ckpt")
    log.info("dense run finished: %d steps", steps)
    return RunResult(tr, run_dir, rows)


def train_sparse(cfg: ExperimentConfig, teacher: ToyCodec, seed: int | None = None,
                 run_dir: str | Path | None = None, sequences=None, total_steps: int | None = None,
                 init: ToyCodec | None = None) -> RunResult:
    """Prune a copy of ``teacher`` (or of ``init``) under the configured schedules."""
    seed = cfg.run.seed if seed is None else seed
    run_dir = _prepare_dir(run_dir, cfg, seed)
    student = (init if init is not None else teacher).clone()
    tr = Trainer(cfg, student, sparse=True, teacher=teacher, sequences=sequences, total_steps=total_steps,
                 metrics_path=run_dir / "metrics.csv" if run_dir else None, seed=seed)
    rows = tr.run(checkpoint_dir=run_dir)
    if run_dir:
        tr.save(run_dir / "final.ckpt")
    return RunResult(tr, run_dir, rows)


def resume(cfg: ExperimentConfig, ckpt_path: str | Path, teacher: ToyCodec | None = None, sequences=None,
           metrics_path: str | Path | None = None) -> Trainer:
    ckpt = load_checkpoint(ckpt_path)
    model = model_from_checkpoint(ckpt)
    sparse = ckpt.meta.get("kind") == "sparse"
    ts = ckpt.meta["train_state"]
    tr = Trainer(cfg, model, sparse=sparse, teacher=teacher, sequences=sequences,
                 total_steps=ts["total_steps"], metrics_path=None, seed=ts["seed"])
    if metrics_path is not None:
        tr.log = MetricLog(metrics_path, resume=True)
    tr.restore(ckpt)
    return tr
