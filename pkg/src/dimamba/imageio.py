"""Binary PPM (P6, 8-bit) read/write."""

from __future__ import annotations

import numpy as np


def _tokens(data: bytes, count: int):
    out = []
    pos = 0
    while len(out) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        out.append(data[start:pos])
    return out, pos + 1


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    pix = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return pix.reshape(h, w, 3).copy()


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to 8-bit; single-channel input is replicated to RGB."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 1:
        x = np.repeat(x, 3, axis=-1)
    return np.clip(np.round((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_ppm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w, c = img.shape
    if c != 3:
        raise ValueError("PPM needs 3 channels")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def make_grid(images: np.ndarray, ncols: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile ``[N, H, W, C]`` images into one ``[rows*(H+pad)+pad, ...]`` canvas (padding = -1)."""
    n, h, w, c = images.shape
    ncols = ncols or int(np.ceil(np.sqrt(n)))
    nrows = int(np.ceil(n / ncols))
    canvas = np.full((nrows * (h + pad) + pad, ncols * (w + pad) + pad, c), -1.0)
    for k in range(n):
        r, q = divmod(k, ncols)
        canvas[pad + r * (h + pad):pad + r * (h + pad) + h, pad + q * (w + pad):pad + q * (w + pad) + w] = images[k]
    return canvas
