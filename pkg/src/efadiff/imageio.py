"""Binary PPM (P6) and PGM (P5) readers and writers, maxval 255.

Images are channel-first float arrays in [0, 1]; values are clamped before
quantization. These formats are the package's only image interchange.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ValidationError


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """image: [3, h, w] in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValidationError(f"PPM writer expects [3, h, w], got {image.shape}")
    _, h, w = image.shape
    data = _quantize(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data)


def write_pgm(path, image: np.ndarray) -> None:
    """image: [h, w] in [0, 1]."""
    if image.ndim != 2:
        raise ValidationError(f"PGM writer expects [h, w], got {image.shape}")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + _quantize(image).tobytes())


def _read_header(raw: bytes, magic: bytes) -> tuple[int, int, int]:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != magic:
        raise ValidationError(f"expected {magic.decode()} file, got {fields[0]!r}")
    if fields[3] != b"255":
        raise ValidationError(f"only maxval 255 supported, got {fields[3]!r}")
    return int(fields[1]), int(fields[2]), pos + 1


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, offset = _read_header(raw, b"P6")
    pix = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=offset)
    return pix.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, offset = _read_header(raw, b"P5")
    pix = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=offset)
    return pix.reshape(h, w).astype(np.float64) / 255.0
