"""Command-line entry point: ``dim train | sample | flops | check``.

Exit codes: 0 success, 1 a check or run failed, 2 bad usage (unknown
arguments, unreadable config, invalid values).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import checks, config, efficiency
from .diffusion import ddpm_sample
from .model import NULL_LABEL, SIZES
from .numerics import Rng, write_tensor

log = logging.getLogger("dimamba")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    from .train import Trainer, resolve_dataset

    try:
        cfg = config.load(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc.strerror or exc}") from exc
    except config.ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}") from exc
    if args.seed is not None:
        cfg = config.replace(cfg, train={"seed": args.seed})
    if args.output:
        cfg = config.replace(cfg, train={"output_dir": args.output})
    steps = args.steps if args.steps is not None else cfg.optimizer.steps
    out = cfg.train.output_dir
    ckpt = os.path.join(out, "checkpoint.dimc")
    metrics = os.path.join(out, "metrics.jsonl")
    try:
        dataset = resolve_dataset(cfg)  # fail before anything is written
    except (OSError, ValueError) as exc:
        raise UsageError(f"dataset: {exc}") from exc

    if args.resume and os.path.exists(ckpt):
        trainer = Trainer.load(ckpt, dataset)
        log.info("resumed from %s at step %d", ckpt, trainer.step)
    else:
        try:
            trainer = Trainer(cfg, dataset)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        os.makedirs(out, exist_ok=True)
        if os.path.exists(metrics):
            os.remove(metrics)
        with open(os.path.join(out, "config.ini"), "w", encoding="utf-8") as fh:
            fh.write(config.dumps(cfg))
    losses = trainer.run(steps, metrics_path=metrics, ckpt_path=ckpt,
                         ckpt_every=cfg.train.ckpt_every, log_every=cfg.train.log_every)
    if losses:
        tail = losses[-min(100, len(losses)):]
        print(f"step {trainer.step}: mean loss of last {len(tail)} steps {np.mean(tail):.6f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


# -- sample ------------------------------------------------------------------

def _parse_class(raw: str, num_classes: int) -> int:
    if raw == "uncond":
        return NULL_LABEL
    try:
        c = int(raw)
    except ValueError:
        raise UsageError(f"--class must be an integer or 'uncond', got {raw!r}") from None
    if not 0 <= c < num_classes:
        raise UsageError(f"--class must lie in [0, {num_classes}) or be 'uncond'")
    return c


def write_samples(samples: np.ndarray, kind: str, out_dir: str) -> List[str]:
    """Store samples: DIMT tensor for latents, PPM grid for images, one PPM
    grid per frame for video."""
    from .imageio import make_grid, write_ppm

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if kind == "latent":
        p = os.path.join(out_dir, "samples.dimt")
        with open(p, "wb") as fh:
            write_tensor(fh, samples)
        paths.append(p)
    elif kind == "image":
        p = os.path.join(out_dir, "grid.ppm")
        write_ppm(p, make_grid(np.clip(samples[:, 0], -1, 1)))
        paths.append(p)
    else:
        for t in range(samples.shape[1]):
            p = os.path.join(out_dir, f"frame_{t:03d}.ppm")
            write_ppm(p, make_grid(np.clip(samples[:, t], -1, 1)))
            paths.append(p)
    return paths


def cmd_sample(args) -> int:
    from .train import load_for_sampling, schedule_for

    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.cfg_scale < 0:
        raise UsageError("--cfg-scale must be >= 0")
    model, cfg, kind, used_ema = load_for_sampling(args.checkpoint, use_ema=not args.raw_weights)
    if not used_ema and not args.raw_weights:
        print("notice: checkpoint has no EMA weights; sampled with raw weights", file=sys.stderr)
    label = _parse_class(args.class_, model.cfg.num_classes)
    sched = schedule_for(cfg)
    if not 1 <= args.steps <= sched.T:
        raise UsageError(f"--steps must lie in [1, {sched.T}]")
    y = None if label == NULL_LABEL else np.full(args.count, label, dtype=np.int64)
    shape = (args.count,) + model.grid.latent_shape
    z = ddpm_sample(model, sched, shape, y=y, cfg_scale=args.cfg_scale, steps=args.steps,
                    rng=Rng(args.seed), clip=kind != "latent")
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "samples")
    for p in write_samples(z, kind, out):
        print(p)
    return EXIT_OK


# -- flops -------------------------------------------------------------------

def _parse_resolutions(raw: str) -> List[int]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise UsageError("--resolutions must list at least one resolution")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"--resolutions must be comma-separated integers, got {raw!r}") from None


def cmd_flops(args) -> int:
    res = _parse_resolutions(args.resolutions)
    arches = list(efficiency.ARCHES) if args.arch == "all" else [args.arch]
    configs = [(a, args.size, args.patch) for a in arches]
    try:
        report = efficiency.gflops_report(configs, res, walker=True)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sys.stdout.write(report.markdown)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            fh.write(report.csv)
    return EXIT_OK


# -- check -------------------------------------------------------------------

def cmd_check(args) -> int:
    only = [s for s in (args.only or "").split(",") if s]
    known = [name for name, _ in checks.CHECKS]
    bad = [s for s in only if s not in known]
    if bad:
        raise UsageError(f"unknown check(s) {bad}; valid: {known}")
    results = checks.run_checks(only or None, fault=args.fault)
    print(checks.format_results(results))
    total = sum(r.seconds for r in results)
    if total > checks.SOFT_BUDGET_S:
        print(f"warning: suite took {total:.0f}s, over the {checks.SOFT_BUDGET_S:.0f}s budget",
              file=sys.stderr)
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dim", description="Diffusion Mamba training, sampling and cost reports.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config", help="path to a [section] key = value config")
    t.add_argument("--steps", type=int, help="override optimizer.steps")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.add_argument("--output", help="override train.output_dir")
    t.add_argument("--resume", action="store_true", help="continue from output_dir/checkpoint.dimc")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--class", dest="class_", default="uncond", help="class index or 'uncond'")
    s.add_argument("--cfg-scale", type=float, default=1.5)
    s.add_argument("--steps", type=int, default=250)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output directory (default: next to the checkpoint)")
    s.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")
    s.set_defaults(func=cmd_sample)

    f = sub.add_parser("flops", help="operation-count report")
    f.add_argument("--arch", choices=list(efficiency.ARCHES) + ["all"], default="dim")
    f.add_argument("--size", choices=sorted(SIZES), default="XL")
    f.add_argument("--patch", type=int, choices=[2, 4, 8], default=2)
    f.add_argument("--resolutions", default=",".join(map(str, efficiency.DEFAULT_RESOLUTIONS)))
    f.add_argument("--csv", help="also write the table as CSV")
    f.set_defaults(func=cmd_flops)

    c = sub.add_parser("check", help="run the built-in oracle suite")
    c.add_argument("--only", help="comma-separated subset of checks")
    c.add_argument("--fault", choices=list(checks.FAULTS), help="inject a known fault first")
    c.set_defaults(func=cmd_check)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
