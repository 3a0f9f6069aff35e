"""Desk-scale datasets: three procedural generators and a PPM directory loader.

Every dataset yields ``(x, y)`` with ``x`` shaped ``[T, H, W, C]`` (``T = 1``
for still images) and an integer label.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .imageio import read_ppm
from .numerics import Rng

NAMES = ("two_mode_latent", "checker_images", "moving_bar_video")


@dataclass
class Dataset:
    name: str
    kind: str  # "latent", "image" or "video"
    shape: tuple  # (T, H, W, C)
    num_classes: int
    params: dict = field(default_factory=dict)

    def sample(self, rng: Rng) -> tuple[np.ndarray, int]:
        x, y = self.batch(1, rng)
        return x[0], int(y[0])

    def stream(self, rng: Rng) -> Iterator[tuple[np.ndarray, int]]:
        while True:
            yield self.sample(rng)

    def batch(self, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class TwoModeLatent(Dataset):
    """8x8x1 latents from N(+mu, sigma^2 I) for label 0 and N(-mu, sigma^2 I) for label 1."""

    def __init__(self, mu: float = 0.8, sigma: float = 0.1, size: int = 8):
        super().__init__("two_mode_latent", "latent", (1, size, size, 1), 2,
                         {"mu": mu, "sigma": sigma, "size": size})
        self.mu = mu
        self.sigma = sigma

    def modes(self) -> np.ndarray:
        return np.stack([np.full(self.shape, self.mu), np.full(self.shape, -self.mu)])

    def batch(self, n, rng):
        y = rng.integers(0, 2, n)
        sign = np.where(y == 0, 1.0, -1.0).reshape(n, 1, 1, 1, 1)
        x = sign * self.mu + self.sigma * rng.gen.standard_normal((n,) + self.shape)
        return x, y


class CheckerImages(Dataset):
    """32x32 RGB patterns in [-1, 1]: fine checker, coarse checker, horizontal
    stripes, vertical stripes (labels 0..3), random phase and colour pair."""

    def __init__(self, size: int = 32):
        super().__init__("checker_images", "image", (1, size, size, 3), 4, {"size": size})
        self.size = size

    def batch(self, n, rng):
        s = self.size
        y = rng.integers(0, 4, n)
        ii, jj = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        out = np.empty((n, 1, s, s, 3))
        for k in range(n):
            oi, oj = rng.integers(0, 8, 2)
            a = ii + oi
            b = jj + oj
            pattern = [((a // 4) + (b // 4)) % 2, ((a // 8) + (b // 8)) % 2, (a // 4) % 2, (b // 4) % 2][y[k]]
            c0, c1 = rng.uniform(-1.0, 1.0, (2, 3))
            out[k, 0] = np.where(pattern[..., None] == 1, c1, c0)
        return out, y


class MovingBarVideo(Dataset):
    """8-frame 16x16x1 clips of a 2-pixel vertical bar (+1 on -1) moving one
    pixel per frame, right for label 0 and left for label 1, wrapping around."""

    def __init__(self, frames: int = 8, size: int = 16, width: int = 2):
        super().__init__("moving_bar_video", "video", (frames, size, size, 1), 2,
                         {"frames": frames, "size": size, "width": width})
        self.width = width

    def batch(self, n, rng):
        T, H, W, _ = self.shape
        y = rng.integers(0, 2, n)
        start = rng.integers(0, W, n)
        out = np.full((n, T, H, W, 1), -1.0)
        cols = np.arange(W)
        for k in range(n):
            step = 1 if y[k] == 0 else -1
            for t in range(T):
                left = (start[k] + step * t) % W
                on = ((cols - left) % W) < self.width
                out[k, t, :, on, 0] = 1.0
        return out, y


class PpmDirectory(Dataset):
    """``root/<class>/*.ppm`` (or flat ``root/*.ppm`` as a single class), pixels scaled to [-1, 1]."""

    def __init__(self, root: str):
        if not os.path.isdir(root):
            raise FileNotFoundError(f"dataset directory not found: {root}")
        subdirs = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
        groups = [(i, os.path.join(root, d)) for i, d in enumerate(subdirs)] or [(0, root)]
        images, labels = [], []
        for label, folder in groups:
            for fn in sorted(os.listdir(folder)):
                if fn.lower().endswith(".ppm"):
                    images.append(read_ppm(os.path.join(folder, fn)).astype(np.float64) / 127.5 - 1.0)
                    labels.append(label)
        if not images:
            raise FileNotFoundError(f"no .ppm images under {root}")
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise ValueError(f"images under {root} have differing shapes: {sorted(shapes)}")
        h, w, c = images[0].shape
        if h != w:
            raise ValueError("only square images are supported")
        super().__init__("ppm_dir", "image", (1, h, w, c), len(groups), {"path": root})
        self.images = np.stack(images)[:, None]
        self.labels = np.asarray(labels)

    def batch(self, n, rng):
        idx = rng.integers(0, len(self.images), n)
        return self.images[idx].copy(), self.labels[idx].copy()


def make_synthetic_dataset(name: str, params: dict | None = None, rng: Rng | None = None):
    """Build a named generator. ``rng``, if given, returns an infinite
    ``(x, y)`` stream instead of the dataset object."""
    params = dict(params or {})
    if name == "two_mode_latent":
        ds = TwoModeLatent(**params)
    elif name == "checker_images":
        ds = CheckerImages(**params)
    elif name == "moving_bar_video":
        ds = MovingBarVideo(**params)
    else:
        raise ValueError(f"unknown dataset {name!r}; expected one of {NAMES}")
    return ds.stream(rng) if rng is not None else ds
