"""
Binary netpbm I/O: P6 (RGB images) and P5 (grey images and label masks).

Only maxval 255 is accepted. Parse errors report the byte offset at which
the file stopped making sense.

Usage:
    save_ppm(np.zeros((3, 16, 16)), "a.ppm")     # float in [0, 1] or uint8
    img = load_ppm("a.ppm")                       # uint8, 3×H×W
    save_pgm_labels(mask, "label.pgm")
"""

import os
from typing import Optional, Tuple

import numpy as np

from .exceptions import NetpbmError

WHITESPACE = b" \t\r\n"


class _HeaderReader:
    def __init__(self, buf: bytes, path: Optional[str]):
        self.buf = buf
        self.pos = 0
        self.path = path

    def fail(self, detail: str) -> NetpbmError:
        return NetpbmError(detail, offset=self.pos, path=self.path)

    def skip_space(self) -> None:
        buf = self.buf
        while self.pos < len(buf):
            ch = buf[self.pos:self.pos + 1]
            if ch == b"#":
                end = buf.find(b"\n", self.pos)
                self.pos = len(buf) if end < 0 else end + 1
            elif ch in WHITESPACE:
                self.pos += 1
            else:
                return

    def integer(self, what: str) -> int:
        self.skip_space()
        start = self.pos
        while self.pos < len(self.buf) and self.buf[self.pos:self.pos + 1].isdigit():
            self.pos += 1
        if start == self.pos:
            raise self.fail(f"expected {what}")
        return int(self.buf[start:self.pos])


def parse_netpbm(buf: bytes, path: Optional[str] = None) -> Tuple[str, np.ndarray]:
    """Decode a P5/P6 byte string into (magic, uint8 array H×W or H×W×3)."""
    reader = _HeaderReader(buf, path)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise reader.fail(f"unsupported magic {magic!r}, expected P5 or P6")
    reader.pos = 2
    width = reader.integer("width")
    height = reader.integer("height")
    maxval = reader.integer("maxval")
    if width < 1 or height < 1:
        raise reader.fail(f"invalid size {width}x{height}")
    if maxval != 255:
        raise reader.fail(f"maxval {maxval} not supported (only 255)")
    if reader.pos >= len(buf) or buf[reader.pos:reader.pos + 1] not in WHITESPACE:
        raise reader.fail("expected a single whitespace byte after maxval")
    reader.pos += 1

    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = buf[reader.pos:reader.pos + need]
    if len(payload) < need:
        reader.pos += len(payload)
        raise reader.fail(f"truncated payload: expected {need} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return magic.decode("ascii"), data.reshape(shape).copy()


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise NetpbmError("file not found", offset=0, path=path)


def _write(path: str, header: bytes, payload: bytes) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Float images in [0, 1] are rounded to 0..255; uint8 passes through."""
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_ppm(image: np.ndarray, path: str) -> None:
    """Write a 3×H×W image (float in [0, 1] or uint8) as binary P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise NetpbmError(f"save_ppm expects a 3×H×W image, got {image.shape}", path=path)
    pixels = to_uint8(image).transpose(1, 2, 0)
    h, w = pixels.shape[:2]
    _write(path, f"P6\n{w} {h}\n255\n".encode("ascii"), np.ascontiguousarray(pixels).tobytes())


def load_ppm(path: str) -> np.ndarray:
    """Read a P6 file as a uint8 3×H×W array."""
    magic, data = parse_netpbm(_read(path), path)
    if magic != "P6":
        raise NetpbmError(f"expected P6, found {magic}", offset=0, path=path)
    return data.transpose(2, 0, 1).copy()


def save_pgm(image: np.ndarray, path: str) -> None:
    """Write an H×W uint8 array as binary P5."""
    if image.ndim != 2:
        raise NetpbmError(f"save_pgm expects an H×W array, got {image.shape}", path=path)
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255:
            raise NetpbmError("values outside 0..255 cannot be stored in an 8-bit PGM", path=path)
        image = image.astype(np.uint8)
    h, w = image.shape
    _write(path, f"P5\n{w} {h}\n255\n".encode("ascii"), np.ascontiguousarray(image).tobytes())


def load_pgm(path: str) -> np.ndarray:
    magic, data = parse_netpbm(_read(path), path)
    if magic != "P5":
        raise NetpbmError(f"expected P5, found {magic}", offset=0, path=path)
    return data


def save_pgm_labels(mask: np.ndarray, path: str) -> None:
    """Class ids (0..C-1 and 255 for ignore) stored as raw grey values."""
    save_pgm(np.asarray(mask), path)


def load_pgm_labels(path: str) -> np.ndarray:
    return load_pgm(path).astype(np.int64)
