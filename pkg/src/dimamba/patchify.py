"""Patch tokenization of image/video latents and fixed sin-cos positions.

Tokens are ordered frame-major, then row-major within a frame: index
``t * (H/P * W/P) + row * (W/P) + col``. Inside a token the patch is
flattened as ``(pixel row, pixel col, channel)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PatchGrid:
    h_z: int
    w_z: int
    c: int
    p: int
    t_frames: int = 1

    def __post_init__(self):
        for name in ("h_z", "w_z", "c", "p", "t_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.h_z % self.p:
            raise ValueError(f"patch size {self.p} does not divide height h_z={self.h_z}")
        if self.w_z % self.p:
            raise ValueError(f"patch size {self.p} does not divide width w_z={self.w_z}")

    @property
    def rows(self) -> int:
        return self.h_z // self.p

    @property
    def cols(self) -> int:
        return self.w_z // self.p

    @property
    def l_per_frame(self) -> int:
        return self.rows * self.cols

    @property
    def l_total(self) -> int:
        return self.t_frames * self.l_per_frame

    @property
    def token_dim(self) -> int:
        return self.p * self.p * self.c

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.t_frames, self.h_z, self.w_z, self.c)


def patchify(z: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """``[T, H, W, C]`` (or batched ``[B, T, H, W, C]``) -> ``[.., L_total, P*P*C]``."""
    z = np.asarray(z)
    squeeze = z.ndim == 4
    if squeeze:
        z = z[None]
    if z.ndim != 5:
        raise ValueError(f"expected [T, H, W, C] latents, got shape {z.shape}")
    _, T, H, W, C = z.shape
    for axis, got, want in (("frames", T, grid.t_frames), ("height", H, grid.h_z),
                            ("width", W, grid.w_z), ("channels", C, grid.c)):
        if got != want:
            raise ValueError(f"{axis} mismatch: latent has {got}, grid expects {want}")
    p = grid.p
    B = z.shape[0]
    out = (z.reshape(B, T, grid.rows, p, grid.cols, p, C)
            .transpose(0, 1, 2, 4, 3, 5, 6)
            .reshape(B, grid.l_total, grid.token_dim))
    return out[0] if squeeze else out


def depatchify(tokens: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None]
    if tokens.ndim != 3 or tokens.shape[1:] != (grid.l_total, grid.token_dim):
        raise ValueError(
            f"expected tokens of shape [{grid.l_total}, {grid.token_dim}], got {tokens.shape[-2:]}")
    B = tokens.shape[0]
    p = grid.p
    out = (tokens.reshape(B, grid.t_frames, grid.rows, grid.cols, p, p, grid.c)
                 .transpose(0, 1, 2, 4, 3, 5, 6)
                 .reshape(B, *grid.latent_shape))
    return out[0] if squeeze else out


def sincos_1d(dim: int, positions) -> np.ndarray:
    """``[len(positions), dim]``: sines in the first half, cosines in the second.

    Frequencies follow ``10000 ** (-2i / dim)`` for ``i < dim / 2``.
    """
    if dim % 2:
        raise ValueError("embedding dim must be even")
    omega = 10000.0 ** (-2.0 * np.arange(dim // 2, dtype=np.float64) / dim)
    args = np.asarray(positions, dtype=np.float64).reshape(-1)[:, None] * omega[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def pos_embed_table(grid: PatchGrid, d: int) -> np.ndarray:
    """Fixed positions for every token: 2-D spatial sin-cos, plus a 1-D
    temporal sin-cos over the frame index when there is more than one frame."""
    if d % 4:
        raise ValueError("hidden size must be divisible by 4 for 2-D sin-cos positions")
    rows, cols = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    spatial = np.concatenate([sincos_1d(d // 2, rows.reshape(-1)),
                              sincos_1d(d // 2, cols.reshape(-1))], axis=1)
    table = np.tile(spatial, (grid.t_frames, 1))
    if grid.t_frames > 1:
        temporal = sincos_1d(d, np.arange(grid.t_frames))
        table = table + np.repeat(temporal, grid.l_per_frame, axis=0)
    return table


def embed_tokens(patches, proj_w, proj_b, pos, class_tok) -> np.ndarray:
    """Project patches to width D, add positions and prepend the class token.

    ``patches [B, L, P*P*C]``, ``pos [>=L, D]``, ``class_tok [B, D]`` ->
    ``[B, 1 + L, D]`` with the class token at index 0. Unbatched
    ``[L, P*P*C]`` patches with a ``[D]`` class token work the same way.
    """
    patches = np.asarray(patches)
    class_tok = np.asarray(class_tok)
    if patches.ndim == 2:
        return embed_tokens(patches[None], proj_w, proj_b, pos, class_tok.reshape(1, -1))[0]
    L = patches.shape[-2]
    if pos.shape[0] < L:
        raise ValueError(f"position table has {pos.shape[0]} rows, need {L}")
    body = patches @ proj_w + proj_b + pos[:L]
    return np.concatenate([class_tok[:, None, :], body], axis=1)
