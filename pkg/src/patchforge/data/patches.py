"""Patch cropping, rotation/mirror augmentation and RoI binarisation."""
from __future__ import annotations

import warnings
from typing import Optional

import numpy as np

from patchforge.data.manifest import PatchRecord, patch_id
from patchforge.data.slides import Slide
from patchforge.errors import ContractError, InvalidInputError

SCHEMES = {"rot_mirror_8": 8, "rot_4": 4}
VARIANT_NAMES = ("id", "r90", "r180", "r270", "flip", "flip_r90", "flip_r180", "flip_r270")

# Share of a window that must be normal tissue for its ground truth to be "normal",
# and share that must be foreground for RoI-restricted cropping.
MAJORITY = 0.5
MIN_FOREGROUND = 0.5


def crop_stride(patch_size: int, overlap: float) -> int:
    if not 0 <= overlap < 1:
        raise InvalidInputError(f"overlap must lie in [0, 1), got {overlap}")
    stride = patch_size * (1 - overlap)
    if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
        raise InvalidInputError(f"patch {patch_size} with overlap {overlap} gives non-integer stride")
    return int(round(stride))


def grid_positions(length: int, patch_size: int, stride: int) -> list[int]:
    if patch_size > length:
        raise InvalidInputError(f"patch {patch_size} larger than slide extent {length}")
    return list(range(0, length - patch_size + 1, stride))


def grid_count(length: int, patch_size: int, stride: int) -> int:
    return (length - patch_size) // stride + 1


def _truth(slide: Slide, x: int, y: int, size: int, normal_class: int = 0) -> Optional[int]:
    if slide.normal_mask is None:
        return None
    frac = slide.normal_mask[y:y + size, x:x + size].mean()
    return normal_class if frac >= MAJORITY else slide.label


def _record(slide: Slide, x: int, y: int, size: int, index: int) -> PatchRecord:
    return PatchRecord(id=patch_id(index, 1), slide=slide.path, x=x, y=y, size=size,
                       label=slide.label, variant=1, orig_index=index, alive=True,
                       truth=_truth(slide, x, y, size))


def crop_patches(slide: Slide, patch_size: int, overlap: float = 0.5, start_index: int = 0,
                 roi_mask: Optional[np.ndarray] = None,
                 min_foreground: float = MIN_FOREGROUND) -> list[PatchRecord]:
    """Slide a square window over the raster in raster order.

    With ``roi_mask`` only windows whose foreground share is at least
    ``min_foreground`` are kept.
    """
    stride = crop_stride(patch_size, overlap)
    ys = grid_positions(slide.height, patch_size, stride)
    xs = grid_positions(slide.width, patch_size, stride)
    out = []
    idx = start_index
    for y in ys:
        for x in xs:
            if roi_mask is not None and roi_mask[y:y + patch_size, x:x + patch_size].mean() < min_foreground:
                continue
            out.append(_record(slide, x, y, patch_size, idx))
            idx += 1
    return out


def random_crop_patches(slide: Slide, patch_size: int, count: int, seed: int, start_index: int = 0,
                        roi_mask: Optional[np.ndarray] = None,
                        min_foreground: float = MIN_FOREGROUND,
                        max_tries: int = 100) -> list[PatchRecord]:
    """Uniformly sampled origins (seeded); RoI-rejected draws are retried."""
    if patch_size > slide.width or patch_size > slide.height:
        raise InvalidInputError(f"patch {patch_size} larger than slide {slide.width}x{slide.height}")
    rng = np.random.default_rng(seed)
    out = []
    idx = start_index
    tries = 0
    while len(out) < count and tries < count * max_tries:
        tries += 1
        x = int(rng.integers(0, slide.width - patch_size + 1))
        y = int(rng.integers(0, slide.height - patch_size + 1))
        if roi_mask is not None and roi_mask[y:y + patch_size, x:x + patch_size].mean() < min_foreground:
            continue
        out.append(_record(slide, x, y, patch_size, idx))
        idx += 1
    return out


def apply_variant(pixels: np.ndarray, variant: int) -> np.ndarray:
    """Variant 1..8 in the order id, r90, r180, r270, flip, flip.r90, flip.r180, flip.r270.

    Rotations are counter-clockwise quarter turns; ``flip`` reflects rows
    (top becomes bottom) and is applied after the rotation.
    """
    if not 1 <= variant <= 8:
        raise ContractError(f"variant must lie in [1, 8], got {variant}")
    k = (variant - 1) % 4
    out = np.rot90(pixels, k, axes=(0, 1))
    if variant > 4:
        out = out[::-1]
    return np.ascontiguousarray(out)


def augment_patch(pixels: np.ndarray, scheme: str = "rot_mirror_8") -> list[np.ndarray]:
    if scheme not in SCHEMES:
        raise ContractError(f"unknown augmentation scheme {scheme!r}")
    if pixels.ndim < 2 or pixels.shape[0] != pixels.shape[1]:
        raise InvalidInputError(f"augmentation needs a square patch, got {pixels.shape[:2]}")
    return [apply_variant(pixels, j) for j in range(1, SCHEMES[scheme] + 1)]


def augment_records(records: list[PatchRecord], scheme: str = "rot_mirror_8") -> list[PatchRecord]:
    """Expand every un-augmented record into its variants; labels and truth carry over."""
    if scheme not in SCHEMES:
        raise ContractError(f"unknown augmentation scheme {scheme!r}")
    out = []
    for rec in records:
        if rec.variant != 1:
            raise InvalidInputError(f"{rec.id} is already an augmented variant")
        for j in range(1, SCHEMES[scheme] + 1):
            out.append(PatchRecord(id=patch_id(rec.orig_index, j), slide=rec.slide, x=rec.x,
                                   y=rec.y, size=rec.size, label=rec.label, variant=j,
                                   orig_index=rec.orig_index, alive=rec.alive, truth=rec.truth))
    return out


def to_gray(pixels: np.ndarray) -> np.ndarray:
    rgb = pixels.astype(np.float64)
    gray = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


def otsu_threshold(gray: np.ndarray) -> Optional[int]:
    """Threshold t maximising between-class variance of {<= t} vs {> t}; None if degenerate."""
    hist = np.bincount(gray.reshape(-1), minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    m0 = np.cumsum(hist * levels)
    mu_t = m0[-1]
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return None
    between = np.zeros(256)
    between[valid] = (mu_t * w0[valid] - total * m0[valid]) ** 2 / (w0[valid] * w1[valid])
    return int(np.argmax(between))


def binarize_roi(pixels: np.ndarray) -> np.ndarray:
    """Foreground (tissue) mask: pixels on the darker side of the Otsu threshold."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise InvalidInputError("binarize_roi expects an RGB raster")
    gray = to_gray(pixels)
    t = otsu_threshold(gray)
    if t is None:
        warnings.warn("single-intensity slide: using a full-foreground mask", RuntimeWarning,
                      stacklevel=2)
        return np.ones(gray.shape, dtype=bool)
    return gray <= t
