"""Minimal binary PPM (P6) codec.

Only the P6 variant with maxval 255 is supported: that is the interchange
format for image pixels and composite canvases throughout the toolkit.
Pixels are numpy uint8 arrays of shape (height, width, 3), RGB interleaved.
"""

from __future__ import annotations

import numpy as np

from .errors import PixelFormatError


def write_ppm(pixels: np.ndarray, path) -> None:
    """Write an (H, W, 3) uint8 array as a binary P6 file.

    The header is always ``P6\\n<w> <h>\\n255\\n`` so output bytes are a pure
    function of the pixel content.
    """
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PixelFormatError(f"expected (H, W, 3) pixel array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise PixelFormatError("pixel values outside [0, 255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into an (H, W, 3) uint8 array.

    Accepts arbitrary whitespace and ``#`` comments inside the header, per
    the format definition. Raises PixelFormatError for any other magic,
    maxval != 255, or truncated pixel data.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise PixelFormatError(f"{path}: not a binary P6 file")
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comment lines
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PixelFormatError(f"{path}: truncated header")
        token = data[start:pos]
        if not token.isdigit():
            raise PixelFormatError(f"{path}: bad header token {token!r}")
        fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise PixelFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    pos += 1  # single whitespace byte after maxval
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise PixelFormatError(
            f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
