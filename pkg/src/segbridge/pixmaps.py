"""Binary portable pixmap IO (P6 color images, P5 gray masks).

Images travel as float arrays in [0, 1] with shape [h, w, 3]; masks as
boolean arrays [h, w]. Writing quantizes to 8 bits, so a float image
that originated from 8-bit values round-trips exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import ParseError


def _read_header(raw: bytes, magic: bytes, path):
    if raw[:2] != magic:
        raise ParseError(f"{path}: expected {magic.decode()} header, got {raw[:2]!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":  # comment runs to end of line
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise ParseError(f"{path}: bad header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    return fields, pos


def write_ppm(path, image: np.ndarray):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ParseError(f"P6 writer expects [h, w, 3], got {image.shape}")
    data = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    (w, h, maxval), pos = _read_header(raw, b"P6", path)
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    body = raw[pos:pos + need]
    if len(body) != need:
        raise ParseError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0


def write_pgm(path, mask: np.ndarray):
    if mask.ndim != 2:
        raise ParseError(f"P5 writer expects [h, w], got {mask.shape}")
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    (w, h, maxval), pos = _read_header(raw, b"P5", path)
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h
    body = raw[pos:pos + need]
    if len(body) != need:
        raise ParseError(f"{path}: expected {need} bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return arr >= 128
