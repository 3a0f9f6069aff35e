"""Pure-numpy scan kernels.

Reference for the compiled ``_scan`` extension and the fallback when it is
not built. The selective-scan pair takes ``em1 = expm1(delta * A)`` from the
caller so both backends share one transcendental evaluation.

The linear recurrences run over ``[B, L, ...]`` along axis 1:

    forward:  h[:, t] = a[:, t] * h[:, t-1] + u[:, t]          (h[:, -1] = 0)
    reverse:  g[:, t] = v[:, t] + a[:, t+1] * g[:, t+1]        (g[:, L] = 0)

``reverse`` is the adjoint of ``forward``: if ``h = forward(a, u)`` then
``dL/du = reverse(a, dL/dh)``.
"""

from __future__ import annotations

import numpy as np


def linear_scan(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    h = np.empty_like(u)
    state = np.zeros_like(u[:, 0])
    for t in range(u.shape[1]):
        state = a[:, t] * state + u[:, t]
        h[:, t] = state
    return h


def linear_scan_reverse(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    g = np.empty_like(v)
    L = v.shape[1]
    state = np.zeros_like(v[:, 0])
    for t in range(L - 1, -1, -1):
        if t + 1 < L:
            state = a[:, t + 1] * state + v[:, t]
        else:
            state = v[:, t].copy()
        g[:, t] = state
    return g


def linear_scan_associative(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Same result as :func:`linear_scan` by log-step doubling.

    Composes the affine maps ``h -> a h + u`` pairwise, which is associative:
    ``(a2, u2) o (a1, u1) = (a2 a1, a2 u1 + u2)``. Vectorized over the whole
    sequence; ``ceil(log2 L)`` rounds.
    """
    A = a.copy()
    U = u.copy()
    L = u.shape[1]
    step = 1
    while step < L:
        U[:, step:] = A[:, step:] * U[:, :-step] + U[:, step:]
        A[:, step:] = A[:, step:] * A[:, :-step]
        step *= 2
    return U


def _zoh(delta, A, em1, thresh):
    d = delta[..., None]
    z = d * A
    a_bar = em1 + 1.0
    small = np.abs(z) < thresh
    phi = em1 / A
    dphi_dd = a_bar.copy()
    dphi_da = (z * a_bar - em1) / (A * A)
    if small.any():
        db = np.broadcast_to(d, z.shape)[small]
        phi[small] = db * (1.0 + 0.5 * z[small])
        dphi_dd[small] = 1.0 + z[small]
        dphi_da[small] = 0.5 * db * db
    return a_bar, phi, dphi_dd, dphi_da


def scan_forward(x, delta, A, Bm, Cm, dskip, em1, thresh):
    a_bar, phi, _, _ = _zoh(delta, A, em1, thresh)
    h = linear_scan(a_bar, phi * (Bm[:, :, None, :] * x[..., None]))
    y = np.einsum("bldn,bln->bld", h, Cm) + dskip * x
    return y, h


def scan_backward(x, delta, A, Bm, Cm, dskip, em1, h, gy, thresh):
    a_bar, phi, dphi_dd, dphi_da = _zoh(delta, A, em1, thresh)
    # total gradient reaching each hidden state, accumulated backwards in time
    gh = linear_scan_reverse(a_bar, gy[..., None] * Cm[:, :, None, :])
    gC = np.einsum("bld,bldn->bln", gy, h)
    gD = np.einsum("bld,bld->d", gy, x)
    gh_phi = gh * phi
    gx = np.einsum("bldn,bln->bld", gh_phi, Bm) + dskip * gy
    gB = np.einsum("bldn,bld->bln", gh_phi, x)
    g_phi = gh * (Bm[:, :, None, :] * x[..., None])
    g_z = np.zeros_like(gh)
    g_z[:, 1:] = gh[:, 1:] * h[:, :-1] * a_bar[:, 1:]
    gdelta = np.einsum("bldn,dn->bld", g_z, A) + np.einsum("bldn,bldn->bld", g_phi, dphi_dd)
    gA = np.einsum("bldn,bld->dn", g_z, delta) + np.einsum("bldn,bldn->dn", g_phi, dphi_da)
    return gx, gdelta, gA, gB, gC, gD
