"""Materialise patch records into network-ready NCHW arrays."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from patchforge.data.manifest import Manifest, PatchRecord
from patchforge.data.patches import apply_variant
from patchforge.data.slides import load_raster
from patchforge.errors import InvalidInputError


def normalize(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 H x W x 3 (or N x H x W x 3) -> channels-first floats in [-1, 1]."""
    t = np.dtype(dtype).type
    x = pixels.astype(t) / t(127.5) - t(1.0)
    return np.moveaxis(x, -1, -3)


class PatchSource:
    """Crops patches from slides referenced by a manifest, caching decoded rasters."""

    def __init__(self, manifest: Manifest, dtype=np.float32):
        self.manifest = manifest
        self.dtype = dtype
        self._cache: dict[Path, np.ndarray] = {}

    def raster(self, rec: PatchRecord) -> np.ndarray:
        path = self.manifest.slide_path(rec)
        img = self._cache.get(path)
        if img is None:
            img = load_raster(path)
            self._cache[path] = img
        return img

    def pixels(self, rec: PatchRecord) -> np.ndarray:
        img = self.raster(rec)
        if rec.y + rec.size > img.shape[0] or rec.x + rec.size > img.shape[1]:
            raise InvalidInputError(f"{rec.id}: crop lies outside slide {rec.slide}")
        crop = img[rec.y:rec.y + rec.size, rec.x:rec.x + rec.size]
        return apply_variant(crop, rec.variant)

    def batch(self, records: Sequence[PatchRecord]) -> np.ndarray:
        if not records:
            raise InvalidInputError("empty batch")
        sizes = {r.size for r in records}
        if len(sizes) != 1:
            raise InvalidInputError(f"mixed patch sizes in one batch: {sorted(sizes)}")
        return normalize(np.stack([self.pixels(r) for r in records]), self.dtype)
