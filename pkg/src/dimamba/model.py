"""Full DiM noise-prediction network.

patchify -> linear patch embed + fixed positions -> prepend class token
(timestep MLP + label embedding) -> stack of DiM blocks (adaLN on the same
conditioning vector) -> modulated final norm -> zero-init linear head ->
drop class token -> depatchify.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from . import block
from .numerics import Rng, check_finite, silu, silu_grad
from .patchify import PatchGrid, depatchify, embed_tokens, patchify, pos_embed_table
from .ssm import delta_rank as default_delta_rank

SIZES = {"S": (16, 384), "B": (16, 768), "L": (32, 1024), "XL": (36, 1152)}
PATCHES = (2, 4, 8)
NULL_LABEL = -1


@dataclass(frozen=True)
class ModelConfig:
    size_tag: str = "B"
    layers: int = 16
    hidden_d: int = 768
    patch: int = 4
    in_channels: int = 4
    num_classes: int = 1000
    frames: int = 1
    input_size: int = 32
    ssm_state_n: int = 16
    delta_rank: Optional[int] = None
    conv_width: int = 4
    freq_dim: int = 256
    timesteps: int = 1000
    adaln: bool = True
    class_token: bool = True

    def __post_init__(self):
        if self.size_tag in SIZES:
            if (self.layers, self.hidden_d) != SIZES[self.size_tag]:
                raise ValueError(
                    f"DiM-{self.size_tag} has (layers, hidden) = {SIZES[self.size_tag]}, "
                    f"got ({self.layers}, {self.hidden_d})")
        elif self.size_tag != "custom":
            raise ValueError(f"unknown size tag {self.size_tag!r}; expected one of "
                             f"{sorted(SIZES)} or 'custom'")
        if self.patch not in PATCHES:
            raise ValueError(f"patch must be one of {PATCHES}, got {self.patch}")
        if self.hidden_d % 4:
            raise ValueError("hidden_d must be divisible by 4")
        if min(self.layers, self.in_channels, self.num_classes, self.frames,
               self.ssm_state_n, self.conv_width) < 1:
            raise ValueError("layers, channels, classes, frames, state size and conv width must be >= 1")
        if self.freq_dim % 2:
            raise ValueError("freq_dim must be even")
        PatchGrid(self.input_size, self.input_size, self.in_channels, self.patch, self.frames)

    @classmethod
    def preset(cls, size_tag: str, patch: int = 4, **kw) -> "ModelConfig":
        if size_tag not in SIZES:
            raise ValueError(f"unknown size tag {size_tag!r}; expected one of {sorted(SIZES)}")
        layers, d = SIZES[size_tag]
        return cls(size_tag=size_tag, layers=layers, hidden_d=d, patch=patch, **kw)

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.input_size, self.input_size, self.in_channels, self.patch, self.frames)

    @property
    def d_inner(self) -> int:
        return 2 * self.hidden_d

    @property
    def dt_rank(self) -> int:
        return self.delta_rank if self.delta_rank is not None else default_delta_rank(self.d_inner)

    @property
    def name(self) -> str:
        tag = self.size_tag if self.size_tag != "custom" else f"custom{self.layers}x{self.hidden_d}"
        return f"DiM-{tag}/{self.patch}"

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Name -> shape for every parameter, in canonical order."""
    d, di, n, r = cfg.hidden_d, cfg.d_inner, cfg.ssm_state_n, cfg.dt_rank
    tok = cfg.grid.token_dim
    shapes: Dict[str, tuple] = {
        "x_embed.w": (tok, d), "x_embed.b": (d,),
        "t_embed.w1": (cfg.freq_dim, d), "t_embed.b1": (d,),
        "t_embed.w2": (d, d), "t_embed.b2": (d,),
        "y_embed.table": (cfg.num_classes + 1, d),
    }
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        if cfg.adaln:
            shapes[pre + "mod_w"] = (d, 3 * d)
            shapes[pre + "mod_b"] = (3 * d,)
        shapes[pre + "in_proj"] = (d, 2 * di)
        for side in ("fwd", "bwd"):
            shapes[pre + f"conv_{side}_w"] = (di, cfg.conv_width)
            shapes[pre + f"conv_{side}_b"] = (di,)
            s = pre + f"ssm_{side}."
            shapes[s + "a_log"] = (di, n)
            shapes[s + "d_skip"] = (di,)
            shapes[s + "x_proj"] = (di, r + 2 * n)
            shapes[s + "dt_proj_w"] = (r, di)
            shapes[s + "dt_proj_b"] = (di,)
        shapes[pre + "out_proj"] = (2 * di, d)
    shapes["final.mod_w"] = (d, 2 * d)
    shapes["final.mod_b"] = (2 * d,)
    shapes["head.w"] = (d, tok)
    shapes["head.b"] = (tok,)
    return shapes


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


@dataclass
class DimModel:
    cfg: ModelConfig
    params: Dict[str, np.ndarray]
    pos: np.ndarray = field(repr=False)

    @property
    def grid(self) -> PatchGrid:
        return self.cfg.grid

    @property
    def blocks(self) -> list:
        return [block.subdict(self.params, f"blocks.{i}") for i in range(self.cfg.layers)]

    def copy(self) -> "DimModel":
        return DimModel(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.pos)

    def with_params(self, params: Dict[str, np.ndarray]) -> "DimModel":
        return DimModel(self.cfg, params, self.pos)

    # -- forward / backward --------------------------------------------------

    def _check_inputs(self, z, t, y):
        z = np.asarray(z, dtype=np.float64)
        squeeze = z.ndim == 4
        if squeeze:
            z = z[None]
        if z.shape[1:] != self.grid.latent_shape:
            raise ValueError(f"latent shape {z.shape[1:]} does not match model grid {self.grid.latent_shape}")
        B = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,)).copy()
        y = np.full(B, NULL_LABEL, dtype=np.int64) if y is None else \
            np.broadcast_to(np.asarray(y, dtype=np.int64), (B,)).copy()
        if np.any(t < 1) or np.any(t > self.cfg.timesteps):
            raise ValueError(f"timestep must lie in [1, {self.cfg.timesteps}], got {t.min()}..{t.max()}")
        if np.any((y != NULL_LABEL) & ((y < 0) | (y >= self.cfg.num_classes))):
            raise ValueError(f"class label out of range [0, {self.cfg.num_classes})")
        return z, t, y, squeeze

    def forward_cached(self, z, t, y):
        p = self.params
        cfg = self.cfg
        t_freq = timestep_embedding(t, cfg.freq_dim)
        h1 = t_freq @ p["t_embed.w1"] + p["t_embed.b1"]
        t_emb = silu(h1) @ p["t_embed.w2"] + p["t_embed.b2"]
        y_idx = np.where(y == NULL_LABEL, cfg.num_classes, y)
        cond = t_emb + p["y_embed.table"][y_idx]

        patches = patchify(z, self.grid)
        if cfg.class_token:
            tokens = embed_tokens(patches, p["x_embed.w"], p["x_embed.b"], self.pos, cond)
        else:
            tokens = patches @ p["x_embed.w"] + p["x_embed.b"] + self.pos
        block_caches = []
        for bp in self.blocks:
            tokens, bc = block._forward(tokens, cond if cfg.adaln else None, bp)
            block_caches.append(bc)
        body = tokens[:, 1:] if cfg.class_token else tokens
        xhat, rstd = block.layer_norm(body)
        shift, scale = block.modulation(cond, p["final.mod_w"], p["final.mod_b"], 2)
        u = xhat * (1.0 + scale[:, None]) + shift[:, None]
        out_tokens = u @ p["head.w"] + p["head.b"]
        out = depatchify(out_tokens, self.grid)
        cache = dict(t_freq=t_freq, h1=h1, y_idx=y_idx, cond=cond, patches=patches,
                     block_caches=block_caches, xhat=xhat, rstd=rstd, scale=scale, u=u)
        return out, cache

    def backward(self, cache, grad_out) -> Dict[str, np.ndarray]:
        """Gradients of ``sum(grad_out * forward(...))`` for every parameter."""
        p = self.params
        cfg = self.cfg
        D = cfg.hidden_d
        g: Dict[str, np.ndarray] = {}
        g_tok_out = patchify(grad_out, self.grid)
        tok_dim = g_tok_out.shape[-1]
        u = cache["u"]
        g["head.w"] = u.reshape(-1, D).T @ g_tok_out.reshape(-1, tok_dim)
        g["head.b"] = g_tok_out.sum(axis=(0, 1))
        gu = g_tok_out @ p["head.w"].T
        xhat = cache["xhat"]
        g_scale = np.einsum("bld,bld->bd", gu, xhat)
        g_shift = gu.sum(axis=1)
        g_cond, g["final.mod_w"], g["final.mod_b"] = block.modulation_backward(
            cache["cond"], p["final.mod_w"], [g_shift, g_scale])
        g_body = block.layer_norm_backward(xhat, cache["rstd"], gu * (1.0 + cache["scale"][:, None]))
        if cfg.class_token:
            B, L, _ = g_body.shape
            g_tokens = np.concatenate([np.zeros((B, 1, D)), g_body], axis=1)
        else:
            g_tokens = g_body
        for i in range(cfg.layers - 1, -1, -1):
            bp = block.subdict(p, f"blocks.{i}")
            g_tokens, gc, gb = block._backward(cache["block_caches"][i], bp, g_tokens)
            if gc is not None:
                g_cond = g_cond + gc
            g.update(block.prefixed(gb, f"blocks.{i}"))
        if cfg.class_token:
            g_cond = g_cond + g_tokens[:, 0]
            g_tokens = g_tokens[:, 1:]
        patches = cache["patches"]
        g["x_embed.w"] = patches.reshape(-1, patches.shape[-1]).T @ g_tokens.reshape(-1, D)
        g["x_embed.b"] = g_tokens.sum(axis=(0, 1))

        table = np.zeros_like(p["y_embed.table"])
        np.add.at(table, cache["y_idx"], g_cond)
        g["y_embed.table"] = table
        h1 = cache["h1"]
        g["t_embed.w2"] = silu(h1).T @ g_cond
        g["t_embed.b2"] = g_cond.sum(axis=0)
        gh1 = (g_cond @ p["t_embed.w2"].T) * silu_grad(h1)
        g["t_embed.w1"] = cache["t_freq"].T @ gh1
        g["t_embed.b1"] = gh1.sum(axis=0)
        return {k: g[k] for k in p}

    def __call__(self, z, t, y=None) -> np.ndarray:
        return forward(self, z, t, y)


def _init(name: str, shape, cfg: ModelConfig, rng: Rng) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith(("head.", "final.")) or leaf in ("mod_w", "mod_b", "out_proj"):
        return np.zeros(shape)
    if name.startswith("x_embed.") or name.startswith("t_embed."):
        if leaf.startswith("b"):
            return np.zeros(shape)
        bound = math.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-bound, bound, shape)
    if name == "y_embed.table":
        return rng.gen.standard_normal(shape) * 0.02
    raise KeyError(name)


def build_model(cfg: ModelConfig, rng: Rng, materialize: bool = True) -> DimModel:
    """Initialize a model.

    With ``materialize=False`` every parameter is a zero-stride view of a
    single scalar: shapes and counts are exact but nothing is allocated.
    """
    shapes = param_shapes(cfg)
    if not materialize:
        zero = np.zeros(())
        params = {k: np.broadcast_to(zero, s) for k, s in shapes.items()}
        return DimModel(cfg, params, np.broadcast_to(zero, (cfg.grid.l_total, cfg.hidden_d)))
    params: Dict[str, np.ndarray] = {}
    for k in ("x_embed.w", "x_embed.b", "t_embed.w1", "t_embed.b1", "t_embed.w2", "t_embed.b2",
              "y_embed.table"):
        params[k] = _init(k, shapes[k], cfg, rng)
    for i in range(cfg.layers):
        bp = block.init_block_params(cfg.hidden_d, rng, n=cfg.ssm_state_n, dt_rank=cfg.dt_rank,
                                     conv_width=cfg.conv_width, adaln=cfg.adaln)
        params.update(block.prefixed(bp, f"blocks.{i}"))
    for k in ("final.mod_w", "final.mod_b", "head.w", "head.b"):
        params[k] = _init(k, shapes[k], cfg, rng)
    params = {k: params[k] for k in shapes}
    for k, s in shapes.items():
        assert params[k].shape == s, (k, params[k].shape, s)
    return DimModel(cfg, params, pos_embed_table(cfg.grid, cfg.hidden_d))


def count_params(model_or_cfg) -> int:
    """Exact number of scalar parameters."""
    if isinstance(model_or_cfg, ModelConfig):
        return int(sum(math.prod(s) for s in param_shapes(model_or_cfg).values()))
    return int(sum(v.size for v in model_or_cfg.params.values()))


def forward(model: DimModel, z_t, t, y=None) -> np.ndarray:
    """Predict the noise in ``z_t`` (``[T, H, W, C]`` or batched) at timestep ``t``.

    ``y`` is a class index, ``None`` / ``-1`` for the null (unconditional) label.
    """
    z, tt, yy, squeeze = model._check_inputs(z_t, t, y)
    out, _ = model.forward_cached(z, tt, yy)
    check_finite(out, "model output")
    return out[0] if squeeze else out
