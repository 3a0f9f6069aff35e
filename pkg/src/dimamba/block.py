"""Bidirectional DiM block with adaptive layer-norm conditioning.

    u        = LN(x) * (1 + scale) + shift              (shift, scale, gate) = cond_mod(silu(c))
    v, g     = split(u @ in_proj)                       inner width Di = 2D each
    y_fwd    = ssm_fwd(silu(conv_fwd(v)))
    y_bwd    = flip(ssm_bwd(silu(conv_bwd(flip(v)))))
    combined = concat(y_fwd * silu(g), y_bwd * silu(g))  [.., 2 Di]
    out      = x + (1 + gate) * (combined @ out_proj)

``out_proj`` starts at zero, so a fresh block is the identity map. The
convolutions are depthwise and causal in their own scan direction.
"""

from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np

from . import ssm
from .numerics import Rng, check_finite, silu, silu_grad

Params = Dict[str, np.ndarray]

LN_EPS = 1e-6
CONV_WIDTH = 4


def subdict(params: Params, prefix: str) -> Params:
    prefix = prefix + "."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def prefixed(params: Params, prefix: str) -> Params:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def init_block_params(d: int, rng: Rng, n: int = 16, dt_rank: int | None = None,
                      conv_width: int = CONV_WIDTH, adaln: bool = True) -> Params:
    di = 2 * d
    p: Params = {}
    if adaln:
        p["mod_w"] = np.zeros((d, 3 * d))
        p["mod_b"] = np.zeros(3 * d)
    p["in_proj"] = rng.gen.standard_normal((d, 2 * di)) / math.sqrt(d)
    bound = 1.0 / math.sqrt(conv_width)
    for side in ("fwd", "bwd"):
        p[f"conv_{side}_w"] = rng.uniform(-bound, bound, (di, conv_width))
        p[f"conv_{side}_b"] = rng.uniform(-bound, bound, di)
        p.update(prefixed(ssm.init_ssm_params(di, n, rng, dt_rank), f"ssm_{side}"))
    p["out_proj"] = np.zeros((2 * di, d))
    return p


# -- pieces ------------------------------------------------------------------

def conv_causal(v, w, b):
    """Depthwise causal conv along axis 1: ``v [B, L, C]``, ``w [C, K]``."""
    K = w.shape[1]
    L = v.shape[1]
    out = np.broadcast_to(b, v.shape).copy()
    for k in range(K):
        shift = K - 1 - k
        if shift >= L:
            continue
        out[:, shift:] += v[:, :L - shift] * w[:, k]
    return out


def conv_causal_backward(v, w, g):
    K = w.shape[1]
    L = v.shape[1]
    gv = np.zeros_like(v)
    gw = np.zeros_like(w)
    for k in range(K):
        shift = K - 1 - k
        if shift >= L:
            continue
        gv[:, :L - shift] += g[:, shift:] * w[:, k]
        gw[:, k] = np.einsum("blc,blc->c", g[:, shift:], v[:, :L - shift])
    gb = g.sum(axis=(0, 1))
    return gv, gw, gb


def layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return xc * rstd, rstd


def layer_norm_backward(xhat, rstd, g):
    return rstd * (g - g.mean(axis=-1, keepdims=True)
                   - xhat * (g * xhat).mean(axis=-1, keepdims=True))


def modulation(cond, w, b, parts: int):
    """``silu(cond) @ w + b`` split into ``parts`` chunks of width D."""
    sc = silu(cond)
    return np.split(sc @ w + b, parts, axis=-1)


def modulation_backward(cond, w, gparts):
    gm = np.concatenate(gparts, axis=-1)
    sc = silu(cond)
    gw = sc.T @ gm
    gb = gm.sum(axis=0)
    gcond = (gm @ w.T) * silu_grad(cond)
    return gcond, gw, gb


# -- block -------------------------------------------------------------------

def _forward(x, cond, p: Params):
    B, L, D = x.shape
    if L == 0:
        raise ValueError("token sequence must be non-empty")
    di = p["in_proj"].shape[1] // 2
    adaln = "mod_w" in p
    xhat, rstd = layer_norm(x)
    if adaln:
        if cond is None:
            raise ValueError("block expects a conditioning vector")
        shift, scale, gate = modulation(cond, p["mod_w"], p["mod_b"], 3)
        u = xhat * (1.0 + scale[:, None]) + shift[:, None]
    else:
        shift = scale = gate = None
        u = xhat
    vg = u @ p["in_proj"]
    v, g = vg[..., :di], vg[..., di:]

    cf = conv_causal(v, p["conv_fwd_w"], p["conv_fwd_b"])
    sf = silu(cf)
    yf, cache_f = ssm.selective_scan_forward(sf, subdict(p, "ssm_fwd"))

    vr = v[:, ::-1]
    cb = conv_causal(vr, p["conv_bwd_w"], p["conv_bwd_b"])
    sb = silu(cb)
    ybr, cache_b = ssm.selective_scan_forward(sb, subdict(p, "ssm_bwd"))
    yb = ybr[:, ::-1]

    sg = silu(g)
    comb = np.concatenate([yf * sg, yb * sg], axis=-1)
    o = comb @ p["out_proj"]
    if adaln:
        out = x + (1.0 + gate[:, None]) * o
    else:
        out = x + o
    cache = dict(x=x, cond=cond, xhat=xhat, rstd=rstd, scale=scale, gate=gate, u=u,
                 v=v, g=g, vr=vr, cf=cf, cb=cb, yf=yf, yb=yb, sg=sg, comb=comb, o=o,
                 cache_f=cache_f, cache_b=cache_b)
    return out, cache


def _backward(cache, p: Params, gout):
    x = cache["x"]
    B, L, D = x.shape
    di = p["in_proj"].shape[1] // 2
    adaln = "mod_w" in p
    grads: Params = {}

    gx = gout.copy()
    if adaln:
        g_gate = np.einsum("bld,bld->bd", gout, cache["o"])
        go = gout * (1.0 + cache["gate"][:, None])
    else:
        go = gout
    comb = cache["comb"]
    grads["out_proj"] = comb.reshape(-1, 2 * di).T @ go.reshape(-1, D)
    gcomb = go @ p["out_proj"].T
    gcf_part, gcb_part = gcomb[..., :di], gcomb[..., di:]
    sg = cache["sg"]
    g_sg = gcf_part * cache["yf"] + gcb_part * cache["yb"]
    gg = g_sg * silu_grad(cache["g"])

    gsf, gssm_f = ssm.selective_scan_backward_cached(cache["cache_f"], subdict(p, "ssm_fwd"), gcf_part * sg)
    gcf = gsf * silu_grad(cache["cf"])
    gv, grads["conv_fwd_w"], grads["conv_fwd_b"] = conv_causal_backward(cache["v"], p["conv_fwd_w"], gcf)

    gybr = (gcb_part * sg)[:, ::-1]
    gsb, gssm_b = ssm.selective_scan_backward_cached(cache["cache_b"], subdict(p, "ssm_bwd"), gybr)
    gcb = gsb * silu_grad(cache["cb"])
    gvr, grads["conv_bwd_w"], grads["conv_bwd_b"] = conv_causal_backward(cache["vr"], p["conv_bwd_w"], gcb)
    gv = gv + gvr[:, ::-1]
    grads.update(prefixed(gssm_f, "ssm_fwd"))
    grads.update(prefixed(gssm_b, "ssm_bwd"))

    gvg = np.concatenate([gv, gg], axis=-1)
    grads["in_proj"] = cache["u"].reshape(-1, D).T @ gvg.reshape(-1, 2 * di)
    gu = gvg @ p["in_proj"].T

    xhat = cache["xhat"]
    gcond = None
    if adaln:
        g_scale = np.einsum("bld,bld->bd", gu, xhat)
        g_shift = gu.sum(axis=1)
        gxhat = gu * (1.0 + cache["scale"][:, None])
        gcond, grads["mod_w"], grads["mod_b"] = modulation_backward(
            cache["cond"], p["mod_w"], [g_shift, g_scale, g_gate])
    else:
        gxhat = gu
    gx += layer_norm_backward(xhat, cache["rstd"], gxhat)
    return gx, gcond, grads


def _as_batch(tokens, cond):
    tokens = np.asarray(tokens, dtype=np.float64)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None]
        if cond is not None:
            cond = np.asarray(cond, dtype=np.float64)[None]
    if tokens.ndim != 3:
        raise ValueError(f"tokens must be [L, D] or [B, L, D], got {tokens.shape}")
    if cond is not None:
        cond = np.asarray(cond, dtype=np.float64)
        check_finite(cond, "conditioning vector")
    return tokens, cond, squeeze


def dim_block_forward(tokens, cond: Optional[np.ndarray], params: Params) -> np.ndarray:
    """Apply one block to ``tokens`` (``[L, D]`` or ``[B, L, D]``)."""
    x, c, squeeze = _as_batch(tokens, cond)
    out, _ = _forward(x, c, params)
    check_finite(out, "dim block output")
    return out[0] if squeeze else out


def dim_block_backward(tokens, cond, params: Params, grad_out):
    """Exact adjoint of :func:`dim_block_forward`.

    Returns ``(grad_tokens, grad_cond, grad_params)``; ``grad_cond`` is None
    when the block has no conditioning path.
    """
    x, c, squeeze = _as_batch(tokens, cond)
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != np.shape(tokens):
        raise ValueError(f"grad_out shape {g.shape} does not match tokens {np.shape(tokens)}")
    if squeeze:
        g = g[None]
    _, cache = _forward(x, c, params)
    gx, gc, grads = _backward(cache, params, g)
    if squeeze:
        gx = gx[0]
        gc = None if gc is None else gc[0]
    return gx, gc, grads
