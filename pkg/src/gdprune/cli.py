"""Command-line front end: ``gdprune <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from gdprune.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from gdprune.complexity import (bd_metrics, compact_model, complexity_report, entropy_param_count,
                                read_rd_csv)
from gdprune.config import ExperimentConfig, load_config, parse_config
from gdprune.errors import BDError, ConfigError, FormatError, GdPruneError, NumericFault
from gdprune.pruning import compaction_plan, plan_to_json
from gdprune.train import (evaluate, load_sequences, masks_from_checkpoint, model_from_checkpoint,
                           train_dense, train_sparse)

log = logging.getLogger("gdprune")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 3
EXIT_NUMERIC = 4
EXIT_IO = 5
EXIT_INPUT = 6  # malformed data files, unusable RD curves

OUTPUT_ENV = "GDPRUNE_OUT"

ABLATION_COLUMNS = ("approximator", "distill", "s_tar", "seed", "rate_bpp", "psnr_db", "rds_loss",
                    "hard_sparsity", "run_dir")


def output_root(args, cfg: ExperimentConfig | None = None) -> Path:
    """``--out`` beats $GDPRUNE_OUT beats the config's run.output_dir."""
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return Path(cfg.run.output_dir if cfg is not None else "runs")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(run={"seed": args.seed})
    return cfg


def _load_teacher(path):
    return model_from_checkpoint(load_checkpoint(path), requires_grad=False)


def _experiment_of(ckpt: Checkpoint) -> ExperimentConfig:
    text = ckpt.meta.get("experiment")
    return parse_config(text, "<checkpoint manifest>") if text else ExperimentConfig()


# -- subcommands ---------------------------------------------------------


def cmd_train_dense(args) -> int:
    cfg = _config(args)
    run_dir = output_root(args, cfg) / (args.name or "dense")
    res = train_dense(cfg, steps=args.steps, run_dir=run_dir)
    print(f"dense checkpoint: {run_dir / 'final.ckpt'} ({len(res.rows)} steps)")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _config(args)
    if args.s_tar is not None:
        cfg = cfg.replace(prune={"s_tar": args.s_tar})
    run_dir = output_root(args, cfg) / (args.name or f"prune_s{cfg.prune.s_tar:g}")
    res = train_sparse(cfg, _load_teacher(args.teacher), run_dir=run_dir, total_steps=args.steps)
    last = res.rows[-1] if res.rows else {}
    print(f"pruned checkpoint: {run_dir / 'final.ckpt'} hard_sparsity={last.get('hard_sparsity', 0.0):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = []
    for path in args.checkpoints:
        ckpt = load_checkpoint(path)
        cfg = load_config(args.config) if args.config else _experiment_of(ckpt)
        seqs = load_sequences(cfg, evaluation=True)
        res = evaluate(model_from_checkpoint(ckpt, requires_grad=False), seqs, cfg.loss, masks_from_checkpoint(ckpt))
        rows.append((cfg.loss.lambda1, res.rate_bpp, res.psnr_db, str(path)))
        log.info("%s: lambda1=%g rate=%.4f bpp psnr=%.3f dB", path, cfg.loss.lambda1, res.rate_bpp, res.psnr_db)
    rows.sort(key=lambda r: r[1])
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda1", "rate_bpp", "psnr_db", "checkpoint"])
        for lam, rate, q, src in rows:
            w.writerow([repr(float(lam)), repr(float(rate)), repr(float(q)), src])
    print(f"RD curve ({len(rows)} points): {out}")
    return EXIT_OK


def cmd_compact(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    masks = masks_from_checkpoint(ckpt)
    plan = compaction_plan(model.topology, masks)
    small = compact_model(model, plan)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {k: v for k, v in ckpt.meta.items() if k in ("experiment",)}
    meta["kind"] = "compact"
    save_checkpoint(out_dir / "compact.ckpt", Checkpoint(small.config, small.topology, small.state_arrays(), meta))
    h, w = args.resolution
    report = complexity_report(model.topology, masks, h, w, decoder_only=not args.all_layers,
                               extra_params=entropy_param_count(model) if args.all_layers else 0)
    (out_dir / "complexity.json").write_text(report.to_json())
    (out_dir / "plan.json").write_text(plan_to_json(plan))
    print(f"params {report.params_total} -> {report.params_after_prune}, "
          f"MACs {report.macs_total} -> {report.macs_after_prune} ({report.mac_reduction:.1%} fewer)")
    return EXIT_OK


def cmd_bd(args) -> int:
    ref = read_rd_csv(args.reference)
    test = read_rd_csv(args.test)
    res = bd_metrics(ref[0], ref[1], test[0], test[1])
    text = res.to_json()
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from gdprune.gradcheck import run_suite

    res = run_suite(trials=args.trials, seed=args.seed or 0, h=args.h, tol=args.tol)
    for line in res.lines():
        print(line)
    print("PASS" if res.passed else "FAIL")
    return EXIT_OK if res.passed else EXIT_FAILURE


def _ablation_cell(cfg_text: str, teacher_path: str, approx: str, distill: str, s_tar: float, seed: int,
                   steps: int | None, run_dir: str) -> dict:
    from gdprune.train import evaluate_trainer

    cfg = parse_config(cfg_text).replace(prune={"approximator": approx, "s_tar": s_tar}, distill={"mode": distill})
    res = train_sparse(cfg, _load_teacher(teacher_path), seed=seed, run_dir=run_dir, total_steps=steps)
    ev = evaluate_trainer(res.trainer)
    return {"approximator": approx, "distill": distill, "s_tar": s_tar, "seed": seed, "rate_bpp": ev.rate_bpp,
            "psnr_db": ev.psnr_db, "rds_loss": ev.rds_loss, "hard_sparsity": ev.hard_sparsity, "run_dir": run_dir}


def ablation_grid(approximators, distill_modes, s_tars, seeds) -> list[tuple]:
    return list(itertools.product(approximators, distill_modes, s_tars, seeds))


def median_rows(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["approximator"], r["distill"], r["s_tar"]), []).append(r)
    out = []
    for (approx, distill, s_tar), rs in groups.items():
        m = {"approximator": approx, "distill": distill, "s_tar": s_tar, "seed": "median", "run_dir": ""}
        for col in ("rate_bpp", "psnr_db", "rds_loss", "hard_sparsity"):
            m[col] = statistics.median(r[col] for r in rs)
        out.append(m)
    return out


def cmd_ablate(args) -> int:
    from gdprune.config import render

    cfg = _config(args)
    root = output_root(args, cfg) / (args.name or "ablate")
    root.mkdir(parents=True, exist_ok=True)
    teacher = args.teacher
    if teacher is None:
        train_dense(cfg, run_dir=root / "teacher")
        teacher = str(root / "teacher" / "final.ckpt")
    grid = ablation_grid(args.approximators, args.distill, args.s_tar, args.seeds)
    text = render(cfg)
    jobs = [(text, teacher, a, d, s, seed, args.steps, str(root / f"{a}_{d}_s{s:g}_seed{seed}"))
            for a, d, s, seed in grid]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_ablation_cell, *zip(*jobs)))
    else:
        rows = [_ablation_cell(*j) for j in jobs]
    table = root / "ablation.csv"
    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows + median_rows(rows):
            w.writerow(r)
    print(f"{len(rows)} runs -> {table}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _words(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdprune", description="Gradient-decay filter pruning for a toy video codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="INI experiment config (defaults when omitted)")
        sp.add_argument("--out", help=f"output root (overrides ${OUTPUT_ENV} and run.output_dir)")
        sp.add_argument("--name", help="run directory name under the output root")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train-dense", help="train a dense teacher")
    common(sp)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_train_dense)

    sp = sub.add_parser("prune", help="prune a copy of a dense teacher")
    common(sp)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--s-tar", type=float)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("eval", help="RD points for one or more checkpoints (one per lambda1)")
    sp.add_argument("checkpoints", nargs="+")
    sp.add_argument("--config", help="override the config stored in each checkpoint")
    sp.add_argument("-o", "--output", default="rd.csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compact", help="physically remove pruned filters")
    sp.add_argument("checkpoint")
    sp.add_argument("-o", "--output-dir", default="compact")
    sp.add_argument("--resolution", type=int, nargs=2, default=(1080, 1920), metavar=("H", "W"))
    sp.add_argument("--all-layers", action="store_true", help="count encoder and entropy parameters too")
    sp.set_defaults(func=cmd_compact)

    sp = sub.add_parser("bd", help="BD-rate / BD-PSNR of a test RD curve against a reference")
    sp.add_argument("reference")
    sp.add_argument("test")
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_bd)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--h", type=float, default=1e-3)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="approximator x distillation x target-sparsity grid")
    common(sp)
    sp.add_argument("--teacher", help="dense checkpoint (trained into the output root when omitted)")
    sp.add_argument("--approximators", type=_words, default=["ste", "gd"])
    sp.add_argument("--distill", type=_words, default=["none", "full", "adaptive"])
    sp.add_argument("--s-tar", type=_floats, default=[0.5])
    sp.add_argument("--seeds", type=_ints, default=[0])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, BDError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GdPruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
