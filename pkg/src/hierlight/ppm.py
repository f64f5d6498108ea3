"""Binary PPM (P6, maxval 255) reading and writing."""

import numpy as np

from .errors import InputError

__all__ = ["read_ppm", "parse_ppm", "write_ppm", "encode_ppm"]

_WS = b" \t\n\r\x0b\x0c"


def _header_token(data, pos):
    # skip whitespace and '#' comments, then read one token
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch in (b"",) or ch not in _WS + b"#":
            break
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            pos += 1
    start = pos
    while pos < n and data[pos : pos + 1] not in _WS + b"#":
        pos += 1
    if start == pos:
        raise InputError("unexpected end of PPM header", start)
    return data[start:pos], start, pos


def parse_ppm(data):
    """Decode P6 bytes into an (H, W, 3) uint8 array."""
    data = bytes(data)
    if data[:2] != b"P6":
        raise InputError(f"not a binary PPM: magic {data[:2]!r}, expected b'P6'", 0)
    pos = 2
    if pos >= len(data) or data[pos : pos + 1] not in _WS + b"#":
        raise InputError("expected whitespace after magic", pos)
    fields = []
    for what in ("width", "height", "maxval"):
        tok, at, pos = _header_token(data, pos)
        if not tok.isdigit():
            raise InputError(f"{what} is not a decimal integer: {tok[:16]!r}", at)
        value = int(tok)
        if what == "maxval" and value != 255:
            raise InputError(f"maxval must be 255, got {value}", at)
        if value < 1:
            raise InputError(f"{what} must be positive", at)
        fields.append(value)
    if pos >= len(data) or data[pos : pos + 1] not in _WS:
        raise InputError("expected one whitespace byte before pixel data", pos)
    pos += 1
    w, h, _ = fields
    need = w * h * 3
    have = len(data) - pos
    if have < need:
        raise InputError(f"truncated pixel data: need {need} bytes, found {have}", len(data))
    if have > need:
        raise InputError(f"{have - need} trailing bytes after pixel data", pos + need)
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def read_ppm(path):
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


def encode_ppm(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise InputError(f"expected an (H, W, 3) uint8 image, got {image.dtype} {image.shape}")
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def write_ppm(path, image):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))
