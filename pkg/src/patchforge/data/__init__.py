"""Slides, patch manifests, cropping, augmentation and synthetic corpora."""
from patchforge.data.loader import PatchSource, normalize
from patchforge.data.manifest import Manifest, PatchRecord, parse_manifest, read_manifest, write_manifest
from patchforge.data.patches import (apply_variant, augment_patch, augment_records, binarize_roi,
                                     crop_patches, otsu_threshold)
from patchforge.data.slides import Slide, load_slide

__all__ = ["PatchSource", "normalize", "Manifest", "PatchRecord", "parse_manifest", "read_manifest",
           "write_manifest", "apply_variant", "augment_patch", "augment_records", "binarize_roi",
           "crop_patches", "otsu_threshold", "Slide", "load_slide"]
