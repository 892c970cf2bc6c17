"""Synthetic slide corpora with planted, exactly known patch mislabels.

Class 0 is "normal". Every other slide is a class-specific grating texture
with seeded elliptical islands of normal texture covering roughly a
fraction ``rho`` of its area. Patches inherit the slide label, while their
ground truth is normal whenever at least half of their pixels fall inside
the islands, so the mislabel set is known exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from patchforge.data.manifest import Manifest, PatchRecord, write_manifest
from patchforge.data.patches import augment_records, crop_patches, random_crop_patches
from patchforge.data.slides import Slide, write_pgm, write_ppm
from patchforge.errors import InvalidInputError

SLIDE_INDEX = "slides.json"
SLIDE_INDEX_SCHEMA = "patchforge-slides/1"


@dataclass
class SynthConfig:
    num_classes: int = 4
    slides_per_class: int = 8
    val_slides_per_class: int = 2
    width: int = 1024
    height: int = 768
    rho: float = 0.25
    seed: int = 0
    patch_size: int = 128
    overlap: float = 0.5
    # None -> full overlapping grid; otherwise seeded random origins per slide
    train_patches_per_slide: Optional[int] = None
    val_patches_per_slide: Optional[int] = None
    augment: Optional[str] = "rot_mirror_8"
    noise: float = 24.0
    ellipse_scale: tuple[float, float] = (0.08, 0.2)

    def class_names(self) -> list[str]:
        return ["normal"] + [f"class{c}" for c in range(1, self.num_classes)]


@dataclass
class SyntheticCorpus:
    root: Path
    slides: list[dict]
    train: Manifest
    val: Manifest
    coverage: dict[str, float] = field(default_factory=dict)


def class_texture_params(c: int, num_classes: int) -> tuple[float, float, np.ndarray]:
    """(grating period in pixels, orientation in radians, mean RGB colour) for class ``c``."""
    period = 5.0 + 4.0 * c
    angle = np.pi / 4 * c / num_classes
    hue = 2 * np.pi * c / num_classes
    color = 140 + 45 * np.array([np.cos(hue), np.cos(hue - 2 * np.pi / 3), np.cos(hue + 2 * np.pi / 3)])
    return period, angle, color


def render_texture(c: int, num_classes: int, height: int, width: int, rng: np.random.Generator,
                   noise: float) -> np.ndarray:
    # orientation is fixed per class, never per slide
    period, theta, color = class_texture_params(c, num_classes)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    img = color[None, None, :] + 45.0 * wave[..., None]
    img = img + rng.normal(0.0, noise, size=(height, width, 3))
    return img


def normal_region_mask(height: int, width: int, rho: float, rng: np.random.Generator,
                       scale: tuple[float, float] = (0.08, 0.2)) -> np.ndarray:
    """Union of random ellipses grown until it covers at least ``rho`` of the slide."""
    if not 0 <= rho < 1:
        raise InvalidInputError(f"rho must lie in [0, 1), got {rho}")
    mask = np.zeros((height, width), dtype=bool)
    if rho == 0:
        return mask
    yy, xx = np.mgrid[0:height, 0:width]
    base = min(height, width)
    while mask.mean() < rho:
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        a = rng.uniform(*scale) * base
        b = rng.uniform(*scale) * base
        phi = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def make_slide(label: int, cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    if label == 0:
        img = render_texture(0, cfg.num_classes, h, w, rng, cfg.noise)
        mask = np.ones((h, w), dtype=bool)
    else:
        img = render_texture(label, cfg.num_classes, h, w, rng, cfg.noise)
        mask = normal_region_mask(h, w, cfg.rho, rng, cfg.ellipse_scale)
        if mask.any():
            normal = render_texture(0, cfg.num_classes, h, w, rng, cfg.noise)
            img[mask] = normal[mask]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def generate_synthetic_corpus(out_dir, cfg: SynthConfig) -> SyntheticCorpus:
    """Write slides, masks, a slide index and train/val manifests under ``out_dir``.

    The validation manifest carries ground-truth labels (as if verified by
    a pathologist); the training manifest carries inherited slide labels
    with the ground truth alongside.
    """
    if cfg.num_classes < 2:
        raise InvalidInputError("need at least two classes")
    if not 0 <= cfg.val_slides_per_class < cfg.slides_per_class:
        raise InvalidInputError("val_slides_per_class must leave at least one training slide")
    root = Path(out_dir)
    (root / "slides").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    seq = np.random.SeedSequence(cfg.seed)
    slide_seeds = seq.spawn(cfg.num_classes * cfg.slides_per_class)

    index = []
    slides: list[tuple[Slide, str]] = []
    coverage = {}
    n = 0
    for c in range(cfg.num_classes):
        for s in range(cfg.slides_per_class):
            rng = np.random.default_rng(slide_seeds[n])
            sid = f"c{c}_s{s:02d}"
            pixels, mask = make_slide(c, cfg, rng)
            rel = f"slides/{sid}.ppm"
            write_ppm(root / rel, pixels)
            write_pgm(root / f"masks/{sid}.pgm", mask.astype(np.uint8) * 255)
            split = "val" if s >= cfg.slides_per_class - cfg.val_slides_per_class else "train"
            index.append({"id": sid, "path": rel, "mask": f"masks/{sid}.pgm", "label": c,
                          "split": split})
            coverage[sid] = float(mask.mean()) if c != 0 else 0.0
            normal = mask if c != 0 else np.ones_like(mask)
            slides.append((Slide(sid, pixels, c, rel, normal), split))
            n += 1

    provenance = {"source": "synthetic", "seed": cfg.seed, "rho": cfg.rho,
                  "patch_size": cfg.patch_size, "overlap": cfg.overlap}
    train_recs: list[PatchRecord] = []
    val_recs: list[PatchRecord] = []
    for k, (slide, split) in enumerate(slides):
        per = cfg.train_patches_per_slide if split == "train" else cfg.val_patches_per_slide
        bucket = train_recs if split == "train" else val_recs
        start = len(train_recs) + len(val_recs)
        if per is None:
            recs = crop_patches(slide, cfg.patch_size, cfg.overlap, start_index=start)
        else:
            recs = random_crop_patches(slide, cfg.patch_size, per, seed=cfg.seed * 100003 + k,
                                       start_index=start)
        bucket.extend(recs)
    for r in val_recs:
        r.label = r.truth
    if cfg.augment:
        train_recs = augment_records(train_recs, cfg.augment)

    names = cfg.class_names()
    train = Manifest(train_recs, names, dict(provenance, split="train"), root)
    val = Manifest(val_recs, names, dict(provenance, split="val"), root)
    write_manifest(train, root / "train.jsonl")
    write_manifest(val, root / "val.jsonl")
    doc = {"schema": SLIDE_INDEX_SCHEMA, "classes": names, "provenance": provenance,
           "slides": index}
    (root / SLIDE_INDEX).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return SyntheticCorpus(root, index, train, val, coverage)


def read_slide_index(path) -> dict:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("schema") != SLIDE_INDEX_SCHEMA:
        raise InvalidInputError(f"{path}: unsupported slide index schema {doc.get('schema')!r}")
    return doc
