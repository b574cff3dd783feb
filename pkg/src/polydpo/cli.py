"""Command-line entry point: ``polydpo <verb> [flags]``.

Every output is written to a temporary file and renamed into place, so a
failed command leaves no partial artifacts. Exit status is 0 on success,
1 on a domain or IO error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, atomic_write_text, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, to_text
from .data import (
    REGIMES,
    DatasetFormatError,
    GenerationError,
    consistency_analysis,
    gen_clean,
    gen_conflicting,
    gen_oversimple,
    load_dataset,
    save_dataset,
)
from .denoiser import Denoiser
from .evaluation import alpha_sweep, evaluate_policy, gradient_curve, save_curve
from .rng import derive_rng
from .trainer import ReferenceMutated, TrainingDiverged, pretrain_run, save_metrics, sft_run, train_run


class CLIError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _overrides(args) -> dict:
    ov = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise CLIError(f"--set expects section.key=value, got {item!r}")
        ov[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        ov["run.seed"] = str(args.seed)
    if getattr(args, "alpha", None) is not None:
        ov["trainer.alpha"] = repr(args.alpha)
    if getattr(args, "beta", None) is not None:
        ov["trainer.beta"] = repr(args.beta)
    if getattr(args, "grid", None) is not None and args.command == "sweep":
        ov["sweep.grid"] = "[" + ", ".join(repr(a) for a in args.grid) + "]"
    if getattr(args, "n_seeds", None) is not None:
        ov["sweep.n_seeds"] = str(args.n_seeds)
    if getattr(args, "diffusion_dpo", False):
        ov["trainer.loss"] = "diffusion-dpo"
    return ov


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _require(path, what: str) -> Path:
    if path is None:
        raise CLIError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} not found: {p}")
    return p


def _metrics_path(args) -> Path:
    return Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.csv")


def _load_model(path, n_conditions: int) -> Denoiser:
    model, _ = load_checkpoint(_require(path, "--init checkpoint"))
    if model.spec.n_conditions != n_conditions:
        raise CLIError(f"checkpoint has {model.spec.n_conditions} conditions, dataset has {n_conditions}")
    return model


def cmd_gen_data(args, cfg: RunConfig) -> None:
    seed = cfg.seed
    n = args.n or cfg.data.n_pairs
    if args.regime == "clean":
        ds = gen_clean(n, seed, cfg.task)
    elif args.regime == "conflicting":
        target = args.target if args.target is not None else cfg.data.target_consistency
        ds = gen_conflicting(n, seed, cfg.task, target)
    else:
        if args.winners:
            src = load_dataset(_require(args.winners, "--winners dataset"))
            task = src.task
        else:
            task = cfg.task
            src = gen_clean(n, seed, task)
        ds = gen_oversimple(list(zip(src.condition, src.winner)), cfg.data.oversimple_batch, seed, task)
    save_dataset(args.out, ds)
    rep = consistency_analysis(ds)
    print(f"wrote {len(ds)} {args.regime} pairs to {args.out}")
    print(rep.to_table(), end="")


def cmd_analyze(args, cfg) -> None:
    ds = load_dataset(_require(args.dataset, "dataset"))
    table = consistency_analysis(ds).to_table()
    if args.out:
        atomic_write_text(args.out, table)
    print(table, end="")


def cmd_pretrain(args, cfg: RunConfig) -> None:
    model, hist = pretrain_run(cfg.task, cfg.model, cfg.stage_config("pretrain"))
    save_checkpoint(args.out, model, cfg.trainer.noise_schedule())
    save_metrics(_metrics_path(args), hist)
    print(f"pretrained {model.n_params} parameters for {len(hist)} steps; final loss {hist[-1].loss:.5f}")


def cmd_sft(args, cfg: RunConfig) -> None:
    ds = load_dataset(_require(args.data, "--data dataset"))
    if args.init:
        init = _load_model(args.init, ds.task.n_conditions)
    else:
        init = Denoiser.init(cfg.model, derive_rng(cfg.seed, "init"))
    model, hist = sft_run(init, ds, cfg.stage_config("sft"))
    save_checkpoint(args.out, model, cfg.trainer.noise_schedule())
    save_metrics(_metrics_path(args), hist)
    print(f"sft ({cfg.trainer.sft_mode}) {len(hist)} steps; final loss {hist[-1].loss:.5f}")


def cmd_train(args, cfg: RunConfig) -> None:
    ds = load_dataset(_require(args.data, "--data dataset"))
    init = _load_model(args.init, ds.task.n_conditions)
    tcfg = cfg.trainer.with_(seed=cfg.seed)
    policy, hist = train_run(ds, tcfg, init)
    save_checkpoint(args.out, policy, tcfg.noise_schedule())
    save_metrics(_metrics_path(args), hist)
    last = hist[-1]
    print(
        f"{tcfg.loss} alpha={tcfg.alpha:g} beta={tcfg.beta:g}: {len(hist)} steps; "
        f"loss {last.total_loss:.5f} p {last.mean_preference_prob:.4f} acc {last.mean_implicit_acc:.3f}"
    )


def cmd_sweep(args, cfg: RunConfig) -> None:
    ds = load_dataset(_require(args.data, "--data dataset"))
    init = _load_model(args.init, ds.task.n_conditions)
    sw = cfg.sweep
    res = alpha_sweep(
        ds, cfg.trainer.with_(seed=cfg.seed), sw.grid, sw.n_seeds, init,
        n_eval=sw.n_eval, eval_seed=sw.eval_seed, tolerance=sw.tolerance,
    )
    res.save(args.out)
    for a in res.alphas:
        mark = "*" if a == res.best_alpha else " "
        score = f"{res.composite(a):.5f}" if a in res.reports else "failed"
        print(f"{mark} alpha={a:g}\tcomposite={score}")
    print(f"best_alpha={res.best_alpha:g} flatness_band={[float(a) for a in res.flatness_band]}")
    for c in res.failures:
        print(f"failed cell alpha={c.alpha:g} seed={c.seed}: {c.error}", file=sys.stderr)


def cmd_grad_curve(args, cfg) -> None:
    rows = gradient_curve(args.grid if args.grid is not None else (0.0,), args.n_points)
    save_curve(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    model, schedule = load_checkpoint(_require(args.init, "--init checkpoint"))
    task = cfg.task
    if model.spec.n_conditions != task.n_conditions:
        raise CLIError("checkpoint and config task disagree on the number of conditions")
    rep = evaluate_policy(model, range(task.n_conditions), args.n or cfg.sweep.n_eval, cfg.sweep.eval_seed, task, schedule)
    text = "".join(f"{k}\t{v!r}\n" for k, v in rep.as_row().items())
    if args.out:
        atomic_write_text(args.out, text)
    print(text, end="")


def cmd_show_config(args, cfg: RunConfig) -> None:
    text = to_text(cfg)
    if args.out:
        atomic_write_text(args.out, text)
    print(text, end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "analyze": cmd_analyze,
    "pretrain": cmd_pretrain,
    "sft": cmd_sft,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "grad-curve": cmd_grad_curve,
    "evaluate": cmd_evaluate,
    "show-config": cmd_show_config,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    common.add_argument("--alpha", type=float, help="Poly-DPO alpha (overrides trainer.alpha)")
    common.add_argument("--beta", type=float, help="DPO beta (overrides trainer.beta)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config value")

    p = argparse.ArgumentParser(prog="polydpo", description="Poly-DPO on a toy 2-D diffusion model.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="synthesize a preference dataset")
    g.add_argument("--regime", required=True, choices=REGIMES)
    g.add_argument("--n", type=int, help="number of pairs (default data.n_pairs)")
    g.add_argument("--target", type=float, help="conflicting: target consistency rate")
    g.add_argument("--winners", help="oversimple: take winners from this dataset")
    g.add_argument("--out", required=True)

    a = sub.add_parser("analyze", parents=[common], help="conflict report for a dataset")
    a.add_argument("dataset")
    a.add_argument("--out")

    pre = sub.add_parser("pretrain", parents=[common], help="train the base model on the task generator")
    pre.add_argument("--out", required=True)
    pre.add_argument("--metrics")

    s = sub.add_parser("sft", parents=[common], help="diffusion-loss fine-tuning on winners")
    s.add_argument("--data", required=True)
    s.add_argument("--init", help="starting checkpoint (default: fresh network)")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")

    t = sub.add_parser("train", parents=[common], help="Poly-DPO preference training")
    t.add_argument("--data", required=True)
    t.add_argument("--init", required=True, help="initial policy, also the frozen reference")
    t.add_argument("--diffusion-dpo", action="store_true", help="use the plain Diffusion-DPO loss")
    t.add_argument("--out", required=True)
    t.add_argument("--metrics")

    w = sub.add_parser("sweep", parents=[common], help="alpha grid search")
    w.add_argument("--data", required=True)
    w.add_argument("--init", required=True)
    w.add_argument("--grid", type=_floats, help="comma-separated alphas (default: sweep.grid)")
    w.add_argument("--n-seeds", type=int)
    w.add_argument("--out", required=True)

    c = sub.add_parser("grad-curve", parents=[common], help="|dL/dz| against p for several alphas")
    c.add_argument("--grid", type=_floats, help="comma-separated alphas (default: 0)")
    c.add_argument("--n-points", type=int, default=99)
    c.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", parents=[common], help="score samples from a checkpoint")
    e.add_argument("--init", required=True, help="checkpoint to evaluate")
    e.add_argument("--n", type=int, help="samples per condition")
    e.add_argument("--out")

    sc = sub.add_parser("show-config", parents=[common], help="print the effective canonical config")
    sc.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except DatasetFormatError as exc:
        print(f"polydpo {args.command}: dataset error: {exc}", file=sys.stderr)
        return 1
    except (
        CLIError, ConfigError, CheckpointError, GenerationError, TrainingDiverged, ReferenceMutated, OSError, ValueError, RuntimeError,
    ) as exc:
        print(f"polydpo {args.command}: {exc}", file=sys.stderr)
        return 1
    print(f"[{args.command} done in {time.perf_counter() - t0:.1f}s]", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
