"""Binary PGM/PPM output and image-grid tiling."""

from __future__ import annotations

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def tile_grid(images) -> np.ndarray:
    """``[rows, cols, h, w, c]`` -> ``[rows*h, cols*w, c]`` with no spacing."""
    images = np.asarray(images)
    r, c, h, w, ch = images.shape
    return images.transpose(0, 2, 1, 3, 4).reshape(r * h, c * w, ch)


def write_pnm(path, img: np.ndarray) -> None:
    """Write ``[H, W, 1]`` (P5, grayscale) or ``[H, W, 3]`` (P6, colour) floats in [0, 1], maxval 255."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {c}")
    data = to_uint8(img)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a file written by :func:`write_pnm` back as uint8 ``[H, W, C]``."""
    with open(path, "rb") as f:
        raw = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM {magic!r} maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    return np.frombuffer(raw, dtype=np.uint8, count=h * w * c, offset=pos).reshape(h, w, c)
