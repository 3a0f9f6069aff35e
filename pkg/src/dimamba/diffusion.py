"""DDPM machinery: linear-beta schedule, forward noising, the epsilon-MSE
objective, Gaussian posterior, ancestral sampling with classifier-free
guidance, and an EMA of the weights.

Timesteps are 1-based everywhere: ``t`` in ``[1, T]`` indexes entry ``t - 1``
of the schedule tables and ``alpha_bar_0 = 1``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .model import NULL_LABEL, DimModel
from .numerics import Rng, check_finite, randn


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    timesteps: np.ndarray  # model-facing timestep for each entry (1..T of the base chain)

    def __post_init__(self):
        beta = self.beta
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty vector")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie strictly between 0 and 1")

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    @property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def posterior_var(self) -> np.ndarray:
        return (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar) * self.beta

    @property
    def coef_z0(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar_prev) * self.beta / (1.0 - self.alpha_bar)

    @property
    def coef_zt(self) -> np.ndarray:
        return np.sqrt(self.alpha) * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    def _index(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep must lie in [1, {self.T}]")
        return t - 1


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over ``T`` steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(beta=beta, timesteps=np.arange(1, T + 1))


def respace(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Evenly strided sub-chain of ``steps`` timesteps keeping alpha_bar at the
    retained indices. ``steps == T`` returns the schedule unchanged."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > sched.T:
        raise ValueError(f"steps ({steps}) exceeds the schedule length ({sched.T})")
    if steps == sched.T:
        return sched
    idx = np.unique(np.round(np.linspace(0, sched.T - 1, steps)).astype(np.int64))
    ab = sched.alpha_bar[idx]
    prev = np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule(beta=1.0 - ab / prev, timesteps=sched.timesteps[idx])


def _bcast(v, like):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))


def q_sample(z0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; ``t`` scalar or one per batch row."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError("eps must have the same shape as z0")
    ab = sched.alpha_bar[sched._index(t)]
    return _bcast(np.sqrt(ab), z0) * z0 + _bcast(np.sqrt(1.0 - ab), z0) * eps


def _posterior(z_t, z0, t, sched: NoiseSchedule):
    i = sched._index(t)
    mean = _bcast(sched.coef_z0[i], z0) * z0 + _bcast(sched.coef_zt[i], z_t) * z_t
    return mean, sched.posterior_var[i]


def posterior_params(z_t, z0, t, sched: NoiseSchedule):
    """Mean and variance of ``q(z_{t-1} | z_t, z_0)`` for ``t >= 2``."""
    if np.any(np.asarray(t) < 2):
        raise ValueError("posterior is only defined here for t >= 2")
    return _posterior(np.asarray(z_t, dtype=np.float64), np.asarray(z0, dtype=np.float64), t, sched)


def cfg_combine(eps_cond, eps_uncond, s: float) -> np.ndarray:
    """Guided prediction ``eps_uncond + s * (eps_cond - eps_uncond)``."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    if s == 1.0:
        return eps_cond.copy()
    return eps_uncond + s * (eps_cond - eps_uncond)


# -- training objective ------------------------------------------------------

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DIM_THREADS", "1")))
    except ValueError:
        return 1


def _loss_shard(model: DimModel, z_t, t, y, eps):
    pred, cache = model.forward_cached(z_t, t, y)
    diff = pred - eps
    sq = float(np.sum(diff * diff))
    return sq, cache, diff


def loss_simple(model: DimModel, z0, t, eps, y=None, rng: Optional[Rng] = None,
                sched: Optional[NoiseSchedule] = None, threads: Optional[int] = None):
    """Mean squared error between ``eps`` and the model's prediction at
    ``q_sample(z0, t, eps)``.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``model.params``.
    ``rng`` is accepted for interface symmetry and left untouched.
    With more than one thread the batch is split into contiguous shards whose
    gradients are summed in shard order.
    """
    sched = sched or make_schedule(model.cfg.timesteps)
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim == 4:
        z0, eps = z0[None], np.asarray(eps)[None]
    B = z0.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    z_t = q_sample(z0, t, eps, sched)
    z_t, tt, yy, _ = model._check_inputs(z_t, t, y)
    n = eps.size
    nthreads = min(threads or _threads(), B)
    if nthreads <= 1:
        sq, cache, diff = _loss_shard(model, z_t, tt, yy, eps)
        grads = model.backward(cache, diff * (2.0 / n))
        return sq / n, grads

    bounds = np.linspace(0, B, nthreads + 1).astype(int)

    def work(k):
        sl = slice(bounds[k], bounds[k + 1])
        sq, cache, diff = _loss_shard(model, z_t[sl], tt[sl], yy[sl], eps[sl])
        return sq, model.backward(cache, diff * (2.0 / n))

    with ThreadPoolExecutor(nthreads) as pool:
        parts = list(pool.map(work, range(nthreads)))
    loss = sum(p[0] for p in parts) / n
    grads = {k: sum(p[1][k] for p in parts) for k in model.params}
    return loss, grads


def kl_weight(t: int, sched: NoiseSchedule) -> float:
    """Weight ``w_t`` with ``KL_t = w_t * ||eps - eps_hat||^2`` under the fixed
    posterior variance."""
    i = sched._index(t)
    var = sched.posterior_var[i]
    return float(sched.beta[i] ** 2 / (2.0 * var * sched.alpha[i] * (1.0 - sched.alpha_bar[i])))


def kl_term(z_t, z0, eps_hat, t: int, sched: NoiseSchedule) -> float:
    """KL(q(z_{t-1}|z_t,z_0) || p(z_{t-1}|z_t)) with the model mean built from
    ``eps_hat`` and both variances equal to the posterior variance."""
    mean_q, var = posterior_params(z_t, z0, t, sched)
    i = sched._index(t)
    mean_p = (z_t - sched.beta[i] / np.sqrt(1.0 - sched.alpha_bar[i]) * eps_hat) / np.sqrt(sched.alpha[i])
    return float(np.sum((mean_q - mean_p) ** 2) / (2.0 * var))


# -- sampling ----------------------------------------------------------------

def _predict(model: DimModel, z, t, y, cfg_scale: float):
    B = z.shape[0]
    tt = np.full(B, t, dtype=np.int64)
    if y is None:
        y = np.full(B, NULL_LABEL, dtype=np.int64)
    if np.all(y == NULL_LABEL) or cfg_scale == 1.0:
        out, _ = model.forward_cached(z, tt, y)
        return out
    both, _ = model.forward_cached(np.concatenate([z, z]), np.concatenate([tt, tt]),
                                   np.concatenate([y, np.full(B, NULL_LABEL, dtype=np.int64)]))
    return cfg_combine(both[:B], both[B:], cfg_scale)


def ddpm_sample(model: DimModel, sched: NoiseSchedule, shape, y=None, cfg_scale: float = 1.5,
                steps: Optional[int] = None, rng: Optional[Rng] = None, clip: bool = False) -> np.ndarray:
    """Ancestral sampling from ``z_T ~ N(0, I)``.

    ``shape`` is ``[B, T, H, W, C]``; ``y`` a label per row (or one label, or
    None for unconditional). With ``cfg_scale != 1`` and a label, each step
    runs a conditional and a null-label pass and mixes them with
    :func:`cfg_combine`. ``clip`` clamps the reconstructed ``z0`` to [-1, 1].
    The last step returns the posterior mean.
    """
    if rng is None:
        raise ValueError("ddpm_sample needs an explicit Rng")
    if cfg_scale < 0:
        raise ValueError("cfg_scale must be >= 0")
    steps = sched.T if steps is None else steps
    sub = respace(sched, steps)
    shape = tuple(shape)
    B = shape[0]
    if y is not None:
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (B,)).copy()
    ab = sub.alpha_bar
    z = randn(rng, shape)
    for i in range(sub.T - 1, -1, -1):
        eps = _predict(model, z, int(sub.timesteps[i]), y, cfg_scale)
        z0_hat = (z - np.sqrt(1.0 - ab[i]) * eps) / np.sqrt(ab[i])
        if clip:
            z0_hat = np.clip(z0_hat, -1.0, 1.0)
        mean, var = _posterior(z, z0_hat, i + 1, sub)
        if i == 0:
            z = mean
        else:
            z = mean + np.sqrt(var) * randn(rng, shape)
    return check_finite(z, "sample")


# -- EMA ---------------------------------------------------------------------

@dataclass
class EmaState:
    shadow: Dict[str, np.ndarray]
    decay: float = 0.9999

    @classmethod
    def from_params(cls, params: Dict[str, np.ndarray], decay: float = 0.9999) -> "EmaState":
        return cls({k: v.copy() for k, v in params.items()}, decay)


def ema_update(ema: EmaState, params: Dict[str, np.ndarray], decay: Optional[float] = None) -> EmaState:
    """``shadow <- decay * shadow + (1 - decay) * param`` for every entry, in place."""
    d = ema.decay if decay is None else decay
    if set(params) != set(ema.shadow):
        raise ValueError("EMA shadow and model parameters have different names")
    for k, v in params.items():
        s = ema.shadow[k]
        if s.shape != v.shape:
            raise ValueError(f"shape mismatch for {k}: {s.shape} vs {v.shape}")
        s *= d
        s += (1.0 - d) * v
    return ema
