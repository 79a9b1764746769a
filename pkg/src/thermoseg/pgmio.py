"""Binary PGM (P5) reading and writing.

16-bit thermal frames use maxval 65535 with big-endian two-byte samples;
8-bit images and masks use maxval 255.
"""

from __future__ import annotations

import numpy as np


def write_pgm(path, pixels: np.ndarray):
    """Write a 2-D uint8 or uint16 array as binary PGM."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {pixels.shape}")
    if pixels.dtype == np.uint8:
        maxval, payload = 255, pixels.tobytes()
    elif pixels.dtype == np.uint16:
        maxval, payload = 65535, pixels.astype(">u2").tobytes()
    else:
        raise ValueError(f"unsupported dtype {pixels.dtype}, expected uint8 or uint16")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(payload)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM; returns uint8 (maxval <= 255) or uint16 pixels."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval <= 0 or maxval > 65535:
        raise ValueError(f"{path}: bad maxval {maxval}")
    dtype = np.uint8 if maxval <= 255 else ">u2"
    count = w * h
    pixels = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    if pixels.size != count:
        raise ValueError(f"{path}: truncated pixel data")
    pixels = pixels.reshape(h, w)
    return pixels.astype(np.uint16) if maxval > 255 else pixels.copy()
