"""Binary PPM (P6, maxval 255) reading and writing; PNG read if Pillow is present."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def to_bytes(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {img.shape}")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    data = to_bytes(img)
    h, w, _ = data.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
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
        raise ImageFormatError("truncated header", start)
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise ImageFormatError("not a binary PPM (missing P6 magic)", 0)
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"bad header field {tok!r}", pos - len(tok))
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}", pos)
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"bad dimensions {w}x{h}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header", pos)
    pos += 1
    need = w * h * 3
    have = len(buf) - pos
    if have < need:
        raise ImageFormatError(f"pixel data truncated: need {need} bytes, have {have}", len(buf))
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def read_image(path) -> np.ndarray:
    """PPM always; PNG when Pillow is installed."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover
            raise ImageFormatError("PNG support needs Pillow", 0) from exc
        import io

        try:
            img = Image.open(io.BytesIO(buf)).convert("RGB")
        except Exception as exc:
            raise ImageFormatError(f"unreadable PNG: {exc}", 0) from exc
        return np.asarray(img, dtype=np.float64) / 255.0
    return decode_ppm(buf)
