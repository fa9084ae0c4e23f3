"""Binary PPM (P6, 8-bit RGB) and PFM (Pf, grayscale float32) readers and writers."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Base class for malformed image files."""


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class UnsupportedVariantError(ImageFormatError):
    pass


def _read_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens (skipping # comments)."""
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeaderError("header ended early")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the payload
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after header")
    return tokens, pos + 1


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) array in [0, 1] as 8-bit P6."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"write_ppm expects (H, W, 3), got {rgb.shape}")
    data = np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into an (H, W, 3) float32 array in [0, 1]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4", b"P5"):
        raise UnsupportedVariantError(f"unsupported PNM variant {magic.decode()}; only P6 is read")
    if magic != b"P6":
        raise MalformedHeaderError(f"bad PPM magic {magic!r}")
    try:
        tokens, off = _read_tokens(buf[2:], 3)
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise MalformedHeaderError(f"bad PPM header: {e}") from None
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(f"bad PPM size {w}x{h}")
    if maxval != 255:
        raise UnsupportedVariantError(f"PPM maxval {maxval} unsupported; only 8-bit (255)")
    payload = buf[2 + off:]
    need = w * h * 3
    if len(payload) < need:
        raise TruncatedPayloadError(f"PPM payload has {len(payload)} bytes, expected {need}")
    data = np.frombuffer(payload[:need], dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float32) / np.float32(255.0)


def write_pfm(path, depth: np.ndarray) -> None:
    """Write an (H, W) map as little-endian grayscale PFM, bottom row first."""
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValueError(f"write_pfm expects (H, W), got {depth.shape}")
    h, w = depth.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.flipud(depth).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic == b"PF":
        raise UnsupportedVariantError("colour PFM (PF) not supported; expected grayscale Pf")
    if magic != b"Pf":
        raise MalformedHeaderError(f"bad PFM magic {magic!r}")
    try:
        tokens, off = _read_tokens(buf[2:], 3)
        w, h = int(tokens[0]), int(tokens[1])
        scale = float(tokens[2])
    except ValueError as e:
        raise MalformedHeaderError(f"bad PFM header: {e}") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise MalformedHeaderError(f"bad PFM header values {w}x{h} scale {scale}")
    dtype = "<f4" if scale < 0 else ">f4"
    payload = buf[2 + off:]
    need = w * h * 4
    if len(payload) < need:
        raise TruncatedPayloadError(f"PFM payload has {len(payload)} bytes, expected {need}")
    data = np.frombuffer(payload[:need], dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)
