"""Binary PPM (P6, maxval 255) reading and writing."""

from __future__ import annotations

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedError


def quantize(values) -> np.ndarray:
    """Map unit-interval reals to bytes, rounding half up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(rgb) -> bytes:
    """Encode an ``(H, W, 3)`` unit-interval float image as P6 bytes."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {rgb.shape}")
    h, w = rgb.shape[:2]
    data = rgb if rgb.dtype == np.uint8 else quantize(rgb)
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(data).tobytes()


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise TruncatedError("PPM header ended early")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode P6 bytes into an ``(H, W, 3)`` uint8 array."""
    if buf[:2] != b"P6":
        raise BadMagicError("not a binary PPM (expected P6)")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _next_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"bad PPM header field {tok!r}") from None
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if w <= 0 or h <= 0:
        raise FormatError("PPM dimensions must be positive")
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    need = w * h * 3
    raster = buf[pos:pos + need]
    if len(raster) < need:
        raise TruncatedError(f"PPM raster truncated: {len(raster)} of {need} bytes")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_ppm_file(path, rgb) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))
