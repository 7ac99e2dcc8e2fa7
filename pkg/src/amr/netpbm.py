"""Binary PGM (P5) / PPM (P6) reading and writing, maxval 255.

Used for debug exports and as the codec-free image format of the
derotation CLI. Raw-space pixel values map to bytes as
clamp(round(v * 255)); normalized-space images are first mapped back
through the dataset statistics.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise NetpbmError("unexpected end of header")
    return data[start:pos], pos


def read_image(path) -> np.ndarray:
    """Read a P5/P6 file into a float32 (H, W, C) array in [0, 1]."""
    data = Path(path).read_bytes()
    magic, pos = _next_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r} (want P5 or P6)")
    fields = []
    for _ in range(3):
        tok, pos = _next_token(data, pos)
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise NetpbmError(f"truncated pixel data: {len(raw)} of {need} bytes")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
    return img.astype(np.float32) / np.float32(255.0)


def write_image(path, img: np.ndarray) -> None:
    """Write a raw-space [0, 1] (H, W, C) array as P5 (C=1) or P6 (C=3)."""
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise NetpbmError(f"can only write 1- or 3-channel images, got C={c}")
    magic = b"P5" if c == 1 else b"P6"
    body = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(body.tobytes())


def write_normalized(path, img_norm: np.ndarray, mean: np.ndarray, std: np.ndarray) -> None:
    """Export a normalized-space image: byte = clamp(round((v*std+mean)*255))."""
    raw = img_norm * np.asarray(std) + np.asarray(mean)
    write_image(path, raw)
