"""Slide rasters and the binary PPM/PGM codecs they are stored in."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from patchforge.errors import InvalidInputError, MissingInputError


@dataclass
class Slide:
    id: str
    pixels: np.ndarray  # H x W x 3, uint8
    label: int
    path: str = ""
    normal_mask: Optional[np.ndarray] = None  # H x W bool, synthetic corpora only

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def _read_netpbm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    if not path.is_file():
        raise MissingInputError(f"raster not found: {path}")
    buf = path.read_bytes()
    tok, pos = _read_token(buf, 0)
    if tok != magic:
        raise InvalidInputError(f"{path}: expected {magic.decode()} raster, found {tok[:2]!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise InvalidInputError(f"{path}: malformed header")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise InvalidInputError(f"{path}: only 8-bit rasters are supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    count = width * height * channels
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=pos) if len(buf) - pos >= count else None
    if data is None:
        raise InvalidInputError(f"{path}: truncated pixel data")
    shape = (height, width, channels) if channels > 1 else (height, width)
    return data.reshape(shape).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P5", 1)


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise InvalidInputError("PPM needs an H x W x 3 uint8 array")
    h, w, _ = pixels.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes())


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise InvalidInputError("PGM needs an H x W uint8 array")
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes())


def load_raster(path) -> np.ndarray:
    """Load an RGB raster. PPM natively; PNG/other formats go through Pillow."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    if not path.is_file():
        raise MissingInputError(f"raster not found: {path}")
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def load_slide(path, label: int, slide_id: Optional[str] = None, mask_path=None,
               rel_path: str = "") -> Slide:
    path = Path(path)
    mask = None
    if mask_path is not None:
        mask = read_pgm(mask_path) > 127
    return Slide(slide_id or path.stem, load_raster(path), int(label), rel_path or path.name, mask)
