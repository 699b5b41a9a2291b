"""Binary PPM (P6, maxval 255) image io: bit-exact and dependency-free."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import IMG_SHAPE


class PpmError(ValueError):
    pass


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3,H,W) float image in [0,1]; pixel = round(value*255)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise PpmError(f"expected (3,H,W), got {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise PpmError("pixel values must be finite and in [0, 1]")
    _, h, w = image.shape
    u8 = np.rint(image * 255.0).astype(np.uint8)
    body = u8.transpose(1, 2, 0).tobytes()  # interleaved RGB, row-major
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + body)


def read_ppm(path) -> np.ndarray:
    """Read a P6 file back to a (3,H,W) float32 image (u8/255)."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P6"):
        raise PpmError(f"{path}: not a binary PPM")
    # Header: magic, width, height, maxval, then a single whitespace byte.
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # the single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise PpmError(f"{path}: unsupported maxval {maxval}")
    body = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    u8 = body.reshape(h, w, 3).transpose(2, 0, 1)
    return (u8.astype(np.float32) / 255.0).astype(np.float32)
