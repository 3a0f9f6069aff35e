"""Selective state-space core: ZOH discretization, the input-dependent scan
and the time-invariant convolution kernel used to cross-check it.

``A`` is a real negative diagonal stored as ``a_log`` (``A = -exp(a_log)``),
so every discretized quantity is elementwise over ``[D_inner, N]``.

An ``SsmParams`` is a plain dict of arrays::

    a_log      [Di, N]
    d_skip     [Di]
    x_proj     [Di, R + 2N]   -> (delta logits, B, C) per token
    dt_proj_w  [R, Di]
    dt_proj_b  [Di]
"""

from __future__ import annotations

import math
from typing import Dict

import numpy as np

from . import kernels
from .numerics import Rng, check_finite, sigmoid, softplus

SsmParams = Dict[str, np.ndarray]

# below this |delta*a| the b_bar closed form is replaced by its Taylor series
SERIES_THRESHOLD = 1e-8

SSM_KEYS = ("a_log", "d_skip", "x_proj", "dt_proj_w", "dt_proj_b")


def delta_rank(d_inner: int) -> int:
    return int(math.ceil(d_inner / 16))


def init_ssm_params(d_inner: int, n: int, rng: Rng, dt_rank: int | None = None,
                    dt_min: float = 1e-3, dt_max: float = 0.1) -> SsmParams:
    r = delta_rank(d_inner) if dt_rank is None else dt_rank
    a_log = np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (d_inner, 1))
    x_proj = rng.gen.standard_normal((d_inner, r + 2 * n)) / math.sqrt(d_inner)
    dt_proj_w = rng.uniform(-1.0, 1.0, (r, d_inner)) / math.sqrt(r)
    # bias = softplus^-1(dt) with dt log-uniform in [dt_min, dt_max]
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), d_inner))
    dt_proj_b = dt + np.log(-np.expm1(-dt))
    return {
        "a_log": a_log,
        "d_skip": np.ones(d_inner),
        "x_proj": x_proj,
        "dt_proj_w": dt_proj_w,
        "dt_proj_b": dt_proj_b,
    }


def state_size(params: SsmParams) -> int:
    return params["a_log"].shape[1]


def discretize_zoh(a, delta, b):
    """Zero-order hold for a diagonal system.

    Returns ``(a_bar, b_bar)`` with ``a_bar = exp(delta*a)`` and
    ``b_bar = (exp(delta*a) - 1) / a * b``. Arguments broadcast elementwise.
    """
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("delta must be strictly positive")
    if np.any(a >= 0):
        raise ValueError("a must be strictly negative")
    z = delta * a
    a_bar = np.exp(z)
    small = np.abs(z) < SERIES_THRESHOLD
    phi = np.where(small, delta * (1.0 + 0.5 * z), np.expm1(z) / a)
    return a_bar, phi * b


def ssm_conv_kernel(a_bar, b_bar, c, L: int) -> np.ndarray:
    """Kernel ``(C B, C A B, ..., C A^{L-1} B)`` of a time-invariant diagonal SSM.

    ``a_bar, b_bar, c`` are ``[..., N]``; the result is ``[..., L]``.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    a_bar = np.asarray(a_bar, dtype=np.float64)
    powers = a_bar[..., None, :] ** np.arange(L)[:, None]
    return np.sum(np.asarray(c)[..., None, :] * powers * np.asarray(b_bar)[..., None, :], axis=-1)


def causal_conv1d(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Direct O(L^2) causal convolution along axis -2 with a per-channel kernel.

    ``x``: ``[..., L, D]``; ``kernel``: ``[D, L]``.
    """
    L = x.shape[-2]
    y = np.zeros_like(x)
    for t in range(L):
        for k in range(t + 1):
            y[..., t, :] += kernel[:, k] * x[..., t - k, :]
    return y


def scan(x, delta, A, Bm, Cm, d_skip):
    """Recurrence with explicit per-token ``delta [B,L,Di]``, ``Bm, Cm [B,L,N]``.

    Returns ``(y, h, em1)``; ``h`` holds every hidden state and
    ``em1 = expm1(delta * A)`` is kept for :func:`scan_grads`.
    The series threshold is read from the module at call time.
    """
    c = np.ascontiguousarray
    x, delta, A, Bm, Cm = (c(v, dtype=np.float64) for v in (x, delta, A, Bm, Cm))
    em1 = np.expm1(delta[..., None] * A)
    y, h = kernels.scan_forward(x, delta, A, Bm, Cm, c(d_skip, dtype=np.float64), em1,
                                SERIES_THRESHOLD)
    return y, h, em1


def scan_grads(x, delta, A, Bm, Cm, d_skip, h, em1, gy):
    """Adjoint of :func:`scan`: ``(gx, gdelta, gA, gB, gC, gD)``."""
    c = np.ascontiguousarray
    return kernels.scan_backward(c(x), c(delta), c(A), c(Bm), c(Cm), c(d_skip), em1, h,
                                 c(gy, dtype=np.float64), SERIES_THRESHOLD)


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected [L, D_inner] or [B, L, D_inner], got {x.shape}")
    return x, False


def selective_scan_forward(x: np.ndarray, params: SsmParams):
    """Batched forward pass; returns ``(y, cache)``."""
    if x.shape[1] == 0:
        raise ValueError("sequence length must be >= 1")
    n = state_size(params)
    r = params["dt_proj_w"].shape[0]
    xdbl = x @ params["x_proj"]
    dt_logit = xdbl[..., :r]
    Bm = xdbl[..., r:r + n]
    Cm = xdbl[..., r + n:]
    dt_pre = dt_logit @ params["dt_proj_w"] + params["dt_proj_b"]
    delta = softplus(dt_pre)
    A = -np.exp(params["a_log"])
    y, h, em1 = scan(x, delta, A, Bm, Cm, params["d_skip"])
    cache = (x, dt_logit, Bm, Cm, dt_pre, delta, A, h, em1)
    return y, cache


def selective_scan_backward_cached(cache, params: SsmParams, gy: np.ndarray):
    x, dt_logit, Bm, Cm, dt_pre, delta, A, h, em1 = cache
    gx, gdelta, gA, gB, gC, gD = scan_grads(x, delta, A, Bm, Cm, params["d_skip"], h, em1, gy)
    g_dtpre = gdelta * sigmoid(dt_pre)
    Di = x.shape[-1]
    R = dt_logit.shape[-1]
    g_dt_logit = g_dtpre @ params["dt_proj_w"].T
    g_xdbl = np.concatenate([g_dt_logit, gB, gC], axis=-1)
    gx = gx + g_xdbl @ params["x_proj"].T
    grads = {
        "a_log": gA * A,
        "d_skip": gD,
        "x_proj": x.reshape(-1, Di).T @ g_xdbl.reshape(-1, g_xdbl.shape[-1]),
        "dt_proj_w": dt_logit.reshape(-1, R).T @ g_dtpre.reshape(-1, Di),
        "dt_proj_b": g_dtpre.reshape(-1, Di).sum(axis=0),
    }
    return gx, grads


def selective_scan(x: np.ndarray, params: SsmParams) -> np.ndarray:
    """Selective scan of ``x`` (``[L, Di]`` or ``[B, L, Di]``)."""
    xb, squeeze = _batched(x)
    y, _ = selective_scan_forward(xb, params)
    check_finite(y, "selective_scan output")
    return y[0] if squeeze else y


def selective_scan_backward(x: np.ndarray, params: SsmParams, grad_y: np.ndarray):
    """Reverse-mode adjoint of :func:`selective_scan`.

    Returns ``(grad_x, grad_params)`` where ``grad_params`` is keyed like
    ``params``.
    """
    xb, squeeze = _batched(x)
    gy = np.asarray(grad_y, dtype=np.float64)
    if gy.shape != np.shape(x):
        raise ValueError(f"grad_y shape {gy.shape} does not match x shape {np.shape(x)}")
    if squeeze:
        gy = gy[None]
    _, cache = selective_scan_forward(xb, params)
    gx, grads = selective_scan_backward_cached(cache, params, gy)
    return (gx[0] if squeeze else gx), grads
