"""Binary portable pixmap I/O: P6 for color [3,H,W], P5 for grayscale [H,W].

Values live in [0,1] in memory and are quantized to 8 bits on disk, so a
round-trip is exact only up to 1/255 per channel.
"""

from __future__ import annotations

import numpy as np


class PNMError(ValueError):
    pass


def _encode(arr):
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def write_image(path, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        magic, raster = b"P5", _encode(arr)
    elif arr.ndim == 3 and arr.shape[0] == 3:
        magic, raster = b"P6", _encode(np.moveaxis(arr, 0, -1))
    else:
        raise PNMError(f"expected [H,W] gray or [3,H,W] color array, got shape {arr.shape}")
    h, w = arr.shape[-2:] if arr.ndim == 2 else (arr.shape[1], arr.shape[2])
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(raster.tobytes())


def _tokens(data, count):
    """First `count` whitespace-separated header tokens, honoring # comments.
    Returns (tokens, offset just past the single whitespace after the last)."""
    toks = []
    i = 0
    n = len(data)
    while len(toks) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
            i += 1
        if i == start:
            raise PNMError("truncated header")
        toks.append(data[start:i])
    if i >= n or not data[i : i + 1].isspace():
        raise PNMError("missing whitespace after maxval")
    return toks, i + 1


def read_image(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 2:
        raise PNMError(f"{path}: not a pnm file")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"{path}: unsupported magic {magic!r} (only binary P5/P6)")
    try:
        (_, w_tok, h_tok, max_tok), off = _tokens(data, 4)
        w, h, maxval = int(w_tok), int(h_tok), int(max_tok)
    except (ValueError, PNMError) as err:
        raise PNMError(f"{path}: malformed header: {err}") from err
    if w < 1 or h < 1:
        raise PNMError(f"{path}: bad dimensions {w}x{h}")
    if not 1 <= maxval <= 255:
        raise PNMError(f"{path}: unsupported maxval {maxval} (expected 1..255)")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    raster = data[off:]
    if len(raster) != need:
        raise PNMError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / maxval
    if magic == b"P5":
        return arr.reshape(h, w)
    return np.moveaxis(arr.reshape(h, w, 3), -1, 0)
