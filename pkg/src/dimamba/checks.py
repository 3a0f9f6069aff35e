"""Built-in oracle suite run by ``dim check``.

Every check compares an implementation against an independent oracle and
returns ``(ok, detail)``. The oracles never call the code under test for the
quantity being checked, so a corrupted constant (see ``inject_fault``) shows
up as a named failure instead of cancelling out.
"""

from __future__ import annotations

import contextlib
import io
import math
import os
import tempfile
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import block, checkpoint, config, diffusion, efficiency, kernels, model, patchify, ssm
from .numerics import Rng, finite_diff_grad, read_tensor, rel_error, write_tensor

SOFT_BUDGET_S = 300.0
FAULTS = ("series_threshold",)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _ssm_instance(rng, B, L, Di, N, time_invariant=False):
    g = rng.gen
    x = g.standard_normal((B, L, Di))
    A = -np.exp(g.uniform(-1.0, 1.5, (Di, N)))
    if time_invariant:
        delta = np.broadcast_to(np.exp(g.uniform(-4, 0, (1, 1, Di))), (B, L, Di)).copy()
        Bm = np.broadcast_to(g.standard_normal((1, 1, N)), (B, L, N)).copy()
        Cm = np.broadcast_to(g.standard_normal((1, 1, N)), (B, L, N)).copy()
    else:
        delta = np.exp(g.uniform(-4, 0, (B, L, Di)))
        Bm = g.standard_normal((B, L, N))
        Cm = g.standard_normal((B, L, N))
    return x, delta, A, Bm, Cm, g.standard_normal(Di)


def check_scan_vs_kernel() -> Tuple[bool, str]:
    """Recurrence vs convolution with an independently discretized kernel."""
    rng = Rng(11)
    worst = 0.0
    for L in (1, 2, 16, 64):
        for Di in (1, 4):
            x, delta, A, Bm, Cm, dskip = _ssm_instance(rng, 1, L, Di, 16, time_invariant=True)
            y, _, _ = ssm.scan(x, delta, A, Bm, Cm, dskip)
            d = delta[0, 0][:, None]
            a_bar = np.exp(d * A)
            b_bar = np.expm1(d * A) / A * Bm[0, 0]
            kern = ssm.ssm_conv_kernel(a_bar, b_bar, Cm[0, 0], L)
            ref = ssm.causal_conv1d(x[0], kern) + dskip * x[0]
            worst = max(worst, float(np.max(np.abs(y[0] - ref))))
    return worst < 1e-10, f"max abs diff {worst:.2e} (tol 1e-10)"


def check_zoh_closed_form() -> Tuple[bool, str]:
    """discretize_zoh vs scalar math.exp / math.expm1, series range included."""
    g = Rng(12).gen
    a = -np.exp(g.uniform(-3, 3, 1000))
    delta = np.exp(g.uniform(-6, 1, 1000))
    delta[:100] = 10.0 ** g.uniform(-14, -10, 100)  # |delta a| < 1e-8
    b = g.standard_normal(1000)
    a_bar, b_bar = ssm.discretize_zoh(a, delta, b)
    worst = 0.0
    for i in range(1000):
        z = delta[i] * a[i]
        ea = math.exp(z)
        eb = math.expm1(z) / a[i] * b[i]
        worst = max(worst, abs(a_bar[i] - ea) / max(abs(ea), 1e-300),
                    abs(b_bar[i] - eb) / max(abs(eb), 1e-300))
    return worst < 1e-12, f"max rel err {worst:.2e} (tol 1e-12)"


def check_backend_parity() -> Tuple[bool, str]:
    if kernels.BACKEND != "cython":
        return True, "compiled backend not built; python only"
    py, cy = kernels.get_backend("python"), kernels.get_backend("cython")
    x, delta, A, Bm, Cm, dskip = _ssm_instance(Rng(13), 2, 9, 5, 6)
    em1 = np.expm1(delta[..., None] * A)
    yp, hp = py.scan_forward(x, delta, A, Bm, Cm, dskip, em1, ssm.SERIES_THRESHOLD)
    yc, hc = cy.scan_forward(x, delta, A, Bm, Cm, dskip, em1, ssm.SERIES_THRESHOLD)
    gy = Rng(14).gen.standard_normal(yp.shape)
    gp = py.scan_backward(x, delta, A, Bm, Cm, dskip, em1, hp, gy, ssm.SERIES_THRESHOLD)
    gc = cy.scan_backward(x, delta, A, Bm, Cm, dskip, em1, hc, gy, ssm.SERIES_THRESHOLD)
    worst = max([rel_error(yp, yc)] + [rel_error(a, b) for a, b in zip(gp, gc)])
    return worst < 1e-12, f"max rel err {worst:.2e} (tol 1e-12)"


def _fd_check(f, arrays: dict, analytic: dict, tol: float = 1e-4) -> Tuple[bool, str]:
    worst, where = 0.0, ""
    for k, arr in arrays.items():
        def fk(v, arr=arr):
            old = arr.copy()
            arr[...] = v
            try:
                return f()
            finally:
                arr[...] = old
        err = rel_error(analytic[k], finite_diff_grad(fk, arr.copy()))
        if err >= worst:
            worst, where = err, k
    return worst < tol, f"worst {where}: {worst:.2e} (tol {tol:g})"


def check_grad_scan() -> Tuple[bool, str]:
    rng = Rng(15)
    p = ssm.init_ssm_params(4, 3, rng, dt_rank=2)
    x = rng.gen.standard_normal((2, 5, 4))
    G = rng.gen.standard_normal(x.shape)
    f = lambda: float(np.sum(ssm.selective_scan(x, p) * G))
    gx, gp = ssm.selective_scan_backward(x, p, G)
    return _fd_check(f, {"x": x, **p}, {"x": gx, **gp})


def check_grad_block() -> Tuple[bool, str]:
    rng = Rng(16)
    p = block.init_block_params(4, rng, n=3)
    for k in p:
        p[k] = p[k] + 0.2 * rng.gen.standard_normal(p[k].shape)
    x = rng.gen.standard_normal((5, 4))
    c = rng.gen.standard_normal(4)
    G = rng.gen.standard_normal(x.shape)
    f = lambda: float(np.sum(block.dim_block_forward(x, c, p) * G))
    gx, gc, gp = block.dim_block_backward(x, c, p, G)
    return _fd_check(f, {"x": x, "c": c, **p}, {"x": gx, "c": gc, **gp})


def _micro_model(seed: int, **kw):
    cfg = model.ModelConfig(size_tag="custom", layers=2, hidden_d=8, patch=2, in_channels=1,
                            num_classes=3, input_size=4, ssm_state_n=4, freq_dim=8, **kw)
    m = model.build_model(cfg, Rng(seed))
    g = Rng(seed + 1).gen
    for k in m.params:  # move off the zero init so every path carries gradient
        m.params[k] = m.params[k] + 0.1 * g.standard_normal(m.params[k].shape)
    return m


def check_grad_model() -> Tuple[bool, str]:
    m = _micro_model(17)
    g = Rng(18).gen
    z = g.standard_normal((2,) + m.grid.latent_shape)
    t = np.array([3, 700])
    y = np.array([1, model.NULL_LABEL])

    def f():
        return float(np.sum(m.forward_cached(z, t, y)[0] ** 2))

    out, cache = m.forward_cached(z, t, y)
    grads = m.backward(cache, 2.0 * out)
    keys = [k for k in m.params if k.startswith(("blocks.1.", "head.", "t_embed.w1"))]
    return _fd_check(f, {k: m.params[k] for k in keys}, grads)


def check_grad_loss() -> Tuple[bool, str]:
    m = _micro_model(19)
    g = Rng(20).gen
    z0 = g.standard_normal((3,) + m.grid.latent_shape)
    eps = g.standard_normal(z0.shape)
    t = np.array([1, 400, 1000])
    y = np.array([0, 2, model.NULL_LABEL])
    sched = diffusion.make_schedule(1000)
    _, grads = diffusion.loss_simple(m, z0, t, eps, y, sched=sched, threads=1)
    f = lambda: diffusion.loss_simple(m, z0, t, eps, y, sched=sched, threads=1)[0]
    keys = ["blocks.0.ssm_fwd.a_log", "blocks.0.in_proj", "x_embed.w", "y_embed.table"]
    return _fd_check(f, {k: m.params[k] for k in keys}, grads)


def check_ddpm_identities() -> Tuple[bool, str]:
    s = diffusion.make_schedule(1000)
    ab = 1.0
    worst_rec = 0.0
    for i, b in enumerate(s.beta):
        ab = ab * (1.0 - b)
        worst_rec = max(worst_rec, abs(ab - s.alpha_bar[i]))
    g = Rng(21).gen
    worst_post = 0.0
    for t in (2, 10, 500, 1000):
        z0, zt = g.standard_normal(6), g.standard_normal(6)
        mean, var = diffusion.posterior_params(zt, z0, t, s)
        i = t - 1
        prior_var = 1.0 - s.alpha_bar[i - 1]
        prec = 1.0 / prior_var + s.alpha[i] / s.beta[i]
        ref_var = 1.0 / prec
        ref_mean = ref_var * (math.sqrt(s.alpha_bar[i - 1]) * z0 / prior_var
                              + math.sqrt(s.alpha[i]) * zt / s.beta[i])
        worst_post = max(worst_post, float(np.max(np.abs(mean - ref_mean))), abs(var - ref_var))
    ok = worst_rec == 0.0 and worst_post < 1e-12
    return ok, f"alpha_bar recursion diff {worst_rec:.1e}; posterior diff {worst_post:.2e}"


def check_cfg_identities() -> Tuple[bool, str]:
    g = Rng(22).gen
    c, u = g.standard_normal((4, 5)), g.standard_normal((4, 5))
    ok = np.array_equal(diffusion.cfg_combine(c, u, 1.0), c) and \
        np.array_equal(diffusion.cfg_combine(c, u, 0.0), u)
    return ok, "s=1 -> conditional, s=0 -> unconditional, bit-exact"


def check_roundtrips() -> Tuple[bool, str]:
    g = Rng(23).gen
    grid = patchify.PatchGrid(8, 8, 3, 2, 4)
    z = g.standard_normal((2,) + grid.latent_shape)
    ok_patch = np.array_equal(patchify.depatchify(patchify.patchify(z, grid), grid), z)
    buf = io.BytesIO()
    write_tensor(buf, z)
    buf.seek(0)
    ok_tensor = np.array_equal(read_tensor(buf), z)
    cfg = config.RunConfig()
    ok_cfg = config.dumps(config.loads(config.dumps(cfg))) == config.dumps(cfg)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "c.dimc")
        groups = {"model": {"w": z, "v": g.standard_normal(3)}}
        checkpoint.save_checkpoint(path, {"step": 3}, groups)
        man, back = checkpoint.load_checkpoint(path)
        ok_ckpt = man == {"step": 3} and all(np.array_equal(back["model"][k], v)
                                             for k, v in groups["model"].items())
    parts = dict(patchify=ok_patch, tensor=ok_tensor, config=ok_cfg, checkpoint=ok_ckpt)
    return all(parts.values()), ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in parts.items())


PUBLISHED_PARAMS_M = {"S": 33.71, "B": 134.37, "L": 473.73, "XL": 673.82}


def check_counts() -> Tuple[bool, str]:
    counts = {}
    for s in PUBLISHED_PARAMS_M:
        cfg = model.ModelConfig.preset(s, patch=2, in_channels=4, num_classes=1000, input_size=32)
        counts[s] = model.count_params(cfg) / 1e6
    dev = {s: counts[s] / PUBLISHED_PARAMS_M[s] - 1.0 for s in counts}
    ratio = counts["L"] / counts["B"]
    ladder = [efficiency.flops_dim(efficiency.tokens_at(r, 2), 1152) for r in (256, 512, 1024, 2048)]
    ratios_ok = all(b == 4 * a for a, b in zip(ladder, ladder[1:]))
    ok = all(abs(v) <= 0.15 for v in dev.values()) and abs(ratio / 3.53 - 1) <= 0.10 and ratios_ok
    detail = ", ".join(f"{s} {counts[s]:.2f}M ({dev[s]:+.1%})" for s in counts)
    return ok, f"{detail}; L/B {ratio:.2f}; flops ladder x4={ratios_ok}"


CHECKS: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
    ("scan_vs_kernel", check_scan_vs_kernel),
    ("zoh_closed_form", check_zoh_closed_form),
    ("backend_parity", check_backend_parity),
    ("grad_scan", check_grad_scan),
    ("grad_block", check_grad_block),
    ("grad_model", check_grad_model),
    ("grad_loss", check_grad_loss),
    ("ddpm_identities", check_ddpm_identities),
    ("cfg_identities", check_cfg_identities),
    ("roundtrips", check_roundtrips),
    ("param_and_flop_counts", check_counts),
]


@contextlib.contextmanager
def inject_fault(name: Optional[str]):
    """Temporarily corrupt a constant so the suite can prove it notices."""
    if name is None:
        yield
        return
    if name != "series_threshold":
        raise ValueError(f"unknown fault {name!r}; valid: {list(FAULTS)}")
    old = ssm.SERIES_THRESHOLD
    ssm.SERIES_THRESHOLD = 10.0  # pushes ordinary steps onto the short series
    try:
        yield
    finally:
        ssm.SERIES_THRESHOLD = old


def run_checks(only: Optional[List[str]] = None, fault: Optional[str] = None) -> List[CheckResult]:
    results = []
    with inject_fault(fault):
        for name, fn in CHECKS:
            if only and name not in only:
                continue
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_results(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  time     detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.ok else 'FAIL':<6}  {r.seconds:6.2f}s  {r.detail}")
    return "\n".join(lines)
