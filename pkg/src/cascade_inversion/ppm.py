"""Binary PPM/PGM image files.

Color images use 8-bit binary PPM (``P6``) with pixel values mapped linearly
between 0..255 and [-1, 1]; binary masks use 8-bit binary PGM (``P5``)
holding only 0 and 255, mapped to {0, 1}. Both directions are strict: bad
magic, malformed headers, short payloads, and trailing bytes all raise
:class:`DataFormatError`.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataFormatError

_WHITESPACE = b" \t\r\n\v\f"


def _parse_header(data: bytes, path: Path, magic: bytes) -> tuple[int, int, int]:
    """Return (width, height, payload offset) after validating the header."""
    if not data.startswith(magic):
        raise DataFormatError(f"{path}: bad magic (expected {magic.decode()})")
    pos = len(magic)
    tokens: list[int] = []
    while len(tokens) < 3:
        if pos >= len(data):
            raise DataFormatError(f"{path}: truncated header")
        byte = data[pos : pos + 1]
        if byte in _WHITESPACE:
            pos += 1
        elif byte == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise DataFormatError(f"{path}: unterminated comment")
            pos = nl + 1
        elif byte.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            tokens.append(int(data[start:pos]))
        else:
            raise DataFormatError(f"{path}: unexpected byte {byte!r} in header")
    if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
        raise DataFormatError(f"{path}: missing whitespace after maxval")
    pos += 1
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise DataFormatError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    return width, height, pos


def _payload(data: bytes, offset: int, expected: int, path: Path) -> np.ndarray:
    body = data[offset:]
    if len(body) < expected:
        raise DataFormatError(f"{path}: truncated payload")
    if len(body) > expected:
        raise DataFormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(body, dtype=np.uint8)


def read_image(path: str | Path) -> np.ndarray:
    """Read a P6 color image into a (H, W, 3) float array in [-1, 1]."""
    path = Path(path)
    data = path.read_bytes()
    width, height, offset = _parse_header(data, path, b"P6")
    raw = _payload(data, offset, width * height * 3, path)
    return raw.reshape(height, width, 3).astype(np.float64) / 127.5 - 1.0


def write_image(tensor: np.ndarray, path: str | Path) -> None:
    """Write a (H, W, 3) image in [-1, 1] as binary PPM (values clamped)."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    quant = np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + quant.tobytes())


def read_mask(path: str | Path) -> np.ndarray:
    """Read a P5 mask into a (H, W) float array with values in {0, 1}."""
    path = Path(path)
    data = path.read_bytes()
    width, height, offset = _parse_header(data, path, b"P5")
    raw = _payload(data, offset, width * height, path)
    if not np.all((raw == 0) | (raw == 255)):
        raise DataFormatError(f"{path}: mask values must be exactly 0 or 255")
    return (raw.reshape(height, width) == 255).astype(np.float64)


def write_mask(mask: np.ndarray, path: str | Path) -> None:
    """Write a (H, W) array of {0, 1} values as binary PGM."""
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) mask, got shape {arr.shape}")
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ValueError("mask values must be exactly 0 or 1")
    quant = (arr * 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + quant.tobytes())
