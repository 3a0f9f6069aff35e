"""Training loop: data -> random t -> label dropout -> L_simple -> AdamW -> EMA."""

from __future__ import annotations

import json
import logging
import os
import time
from typing import Optional

import numpy as np

from . import config as config_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .datasets import Dataset, PpmDirectory, make_synthetic_dataset
from .diffusion import EmaState, NoiseSchedule, ema_update, loss_simple, make_schedule
from .model import NULL_LABEL, ModelConfig, build_model
from .numerics import Rng, randn
from .optim import AdamW, grad_norm

log = logging.getLogger(__name__)


def resolve_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.name == "ppm_dir":
        return PpmDirectory(d.path)
    if d.name == "two_mode_latent":
        return make_synthetic_dataset(d.name, {"mu": d.mu, "sigma": d.sigma})
    return make_synthetic_dataset(d.name)


def model_config_for(cfg: RunConfig, ds: Dataset) -> ModelConfig:
    m = cfg.model
    T, H, W, C = ds.shape
    return ModelConfig(size_tag=m.size_tag, layers=m.layers, hidden_d=m.hidden_d, patch=m.patch,
                       in_channels=C, num_classes=ds.num_classes, frames=T, input_size=H,
                       ssm_state_n=m.ssm_state_n, delta_rank=m.delta_rank, conv_width=m.conv_width,
                       freq_dim=m.freq_dim, timesteps=cfg.diffusion.timesteps, adaln=m.adaln,
                       class_token=m.class_token)


def schedule_for(cfg: RunConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return make_schedule(d.timesteps, d.beta_start, d.beta_end)


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Optional[Dataset] = None):
        self.cfg = cfg
        self.dataset = dataset or resolve_dataset(cfg)
        self.model_cfg = model_config_for(cfg, self.dataset)
        self.model = build_model(self.model_cfg, Rng(cfg.train.seed))
        self.sched = schedule_for(cfg)
        o = cfg.optimizer
        self.opt = AdamW(self.model.params, lr=o.learning_rate, betas=(o.beta1, o.beta2), eps=o.eps,
                         weight_decay=o.weight_decay)
        self.ema = EmaState.from_params(self.model.params, cfg.train.ema_decay)
        self.rng = Rng(cfg.train.seed).split(1)
        self.step = 0

    # -- one optimization step -----------------------------------------------

    def draw_batch(self):
        cfg = self.cfg
        bs = cfg.optimizer.batch_size
        x, y = self.dataset.batch(bs, self.rng)
        if cfg.train.hflip and self.dataset.kind == "image":
            flip = self.rng.uniform(size=bs) < 0.5
            x[flip] = x[flip][:, :, :, ::-1]
        t = self.rng.integers(1, self.sched.T + 1, bs)
        drop = self.rng.uniform(size=bs) < cfg.diffusion.cfg_dropout
        y = np.where(drop, NULL_LABEL, y)
        eps = randn(self.rng, x.shape)
        return x, t, y, eps

    def train_step(self) -> dict:
        t0 = time.perf_counter()
        x, t, y, eps = self.draw_batch()
        loss, grads = loss_simple(self.model, x, t, eps, y, sched=self.sched)
        gnorm = grad_norm(grads)
        self.opt.step(self.model.params, grads)
        ema_update(self.ema, self.model.params)
        self.step += 1
        dt = time.perf_counter() - t0
        tokens = x.shape[0] * (self.model_cfg.grid.l_total + int(self.model_cfg.class_token))
        return {"step": self.step, "loss": loss, "grad_norm": gnorm, "wall_clock": dt,
                "tokens_per_sec": tokens / dt if dt > 0 else 0.0}

    def run(self, steps: int, metrics_path: Optional[str] = None, ckpt_path: Optional[str] = None,
            ckpt_every: Optional[int] = None, log_every: int = 0) -> list:
        """Train until ``self.step == steps``; returns the per-step losses of this call."""
        losses = []
        fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
        try:
            while self.step < steps:
                rec = self.train_step()
                losses.append(rec["loss"])
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if log_every and self.step % log_every == 0:
                    log.info("step %d loss %.5f grad_norm %.4f", self.step, rec["loss"], rec["grad_norm"])
                if ckpt_path and ckpt_every and self.step % ckpt_every == 0:
                    self.save(ckpt_path)
        finally:
            if fh:
                fh.close()
        if ckpt_path:
            self.save(ckpt_path)
        return losses

    # -- checkpoints ------------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format": "DIMC",
            "config": config_mod.dumps(self.cfg),
            "model_config": self.model_cfg.to_dict(),
            "data_kind": self.dataset.kind,
            "step": self.step,
            "adam_step": self.opt.step_count,
            "rng_state": self.rng.get_state(),
        }

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        save_checkpoint(path, self.manifest(), {
            "model": self.model.params, "ema": self.ema.shadow,
            "adam_m": self.opt.m, "adam_v": self.opt.v,
        }, dtype=self.cfg.train.ckpt_dtype)

    @classmethod
    def load(cls, path: str, dataset: Optional[Dataset] = None) -> "Trainer":
        manifest, groups = load_checkpoint(path)
        cfg = config_mod.loads(manifest["config"])
        tr = cls(cfg, dataset)
        for k in tr.model.params:
            tr.model.params[k][...] = groups["model"][k]
            tr.opt.m[k][...] = groups["adam_m"][k]
            tr.opt.v[k][...] = groups["adam_v"][k]
            tr.ema.shadow[k][...] = groups["ema"][k]
        tr.opt.step_count = manifest["adam_step"]
        tr.step = manifest["step"]
        tr.rng = Rng.from_state(manifest["rng_state"])
        return tr


def load_for_sampling(path: str, use_ema: bool = True):
    """Return ``(model, run_config, data_kind, used_ema)`` from a checkpoint.

    Falls back to the raw weights with a warning when the EMA group is missing.
    """
    manifest, groups = load_checkpoint(path)
    cfg = config_mod.loads(manifest["config"])
    mcfg = ModelConfig(**manifest["model_config"])
    model = build_model(mcfg, Rng(0))
    source = "model"
    if use_ema:
        if "ema" in groups:
            source = "ema"
        else:
            log.warning("checkpoint %s has no EMA weights; sampling with raw weights", path)
    for k in model.params:
        model.params[k][...] = groups[source][k]
    return model, cfg, manifest["data_kind"], source == "ema"
