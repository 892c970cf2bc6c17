"""Patch records and the newline-delimited JSON manifest that stores them.

The first line is a header object::

    {"schema": "patchforge/1", "classes": [...], "provenance": {...}}

followed by one object per patch with exactly the fields id, slide, x, y,
size, label, variant, orig_index, alive, truth. ``slide`` is a path
relative to the directory containing the manifest.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from patchforge.errors import ManifestParseError, MissingInputError

SCHEMA = "patchforge/1"
RECORD_FIELDS = ("id", "slide", "x", "y", "size", "label", "variant", "orig_index", "alive", "truth")


@dataclass
class PatchRecord:
    id: str
    slide: str
    x: int
    y: int
    size: int
    label: int
    variant: int = 1
    orig_index: int = 0
    alive: bool = True
    truth: Optional[int] = None

    @property
    def slide_id(self) -> str:
        return Path(self.slide).stem

    @property
    def mislabeled(self) -> Optional[bool]:
        return None if self.truth is None else self.truth != self.label

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in RECORD_FIELDS}


def patch_id(orig_index: int, variant: int) -> str:
    return f"p{orig_index:07d}v{variant}"


@dataclass
class Manifest:
    records: list[PatchRecord]
    classes: list[str]
    provenance: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def alive(self) -> list[PatchRecord]:
        return [r for r in self.records if r.alive]

    def slide_path(self, rec: PatchRecord) -> Path:
        return self.base_dir / rec.slide

    def copy(self) -> "Manifest":
        return Manifest([replace(r) for r in self.records], list(self.classes),
                        json.loads(json.dumps(self.provenance)), self.base_dir)

    def with_records(self, records: Iterable[PatchRecord]) -> "Manifest":
        return Manifest(list(records), list(self.classes), dict(self.provenance), self.base_dir)

    def validate(self) -> None:
        ids = set()
        for r in self.records:
            if r.id in ids:
                raise ManifestParseError(f"duplicate patch id {r.id!r}")
            ids.add(r.id)
        for s in sorted({r.slide for r in self.records}):
            if not (self.base_dir / s).is_file():
                raise MissingInputError(f"slide file missing: {self.base_dir / s}")


def _header(manifest: Manifest) -> dict:
    return {"schema": SCHEMA, "classes": list(manifest.classes), "provenance": manifest.provenance}


def manifest_text(manifest: Manifest, base_dir: Optional[Path] = None) -> str:
    """Serialise; slide paths are rebased from ``manifest.base_dir`` onto ``base_dir``."""
    lines = [json.dumps(_header(manifest), separators=(",", ":"))]
    rebase = base_dir is not None and Path(base_dir).resolve() != Path(manifest.base_dir).resolve()
    for rec in sorted(manifest.records, key=lambda r: r.id):
        obj = rec.to_json()
        if rebase:
            target = Path(manifest.base_dir).resolve() / rec.slide
            obj["slide"] = Path(os.path.relpath(target, Path(base_dir).resolve())).as_posix()
        lines.append(json.dumps(obj, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_text(manifest, path.parent), encoding="utf-8")


def _int(obj: dict, key: str, lineno: int, nullable: bool = False):
    v = obj[key]
    if v is None and nullable:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        raise ManifestParseError(f"field {key!r} must be an integer", lineno)
    return v


def parse_manifest(text: str, base_dir: Path = Path(".")) -> Manifest:
    lines = text.splitlines()
    if not lines:
        raise ManifestParseError("empty manifest", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"malformed header: {exc.msg}", 1) from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        got = header.get("schema") if isinstance(header, dict) else None
        raise ManifestParseError(f"unsupported schema {got!r} (expected {SCHEMA!r})", 1)
    classes = header.get("classes")
    if not isinstance(classes, list) or not classes:
        raise ManifestParseError("header lacks a class list", 1)
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"malformed record: {exc.msg}", lineno) from None
        if not isinstance(obj, dict) or set(obj) != set(RECORD_FIELDS):
            raise ManifestParseError(f"record fields must be exactly {list(RECORD_FIELDS)}", lineno)
        if not isinstance(obj["alive"], bool):
            raise ManifestParseError("field 'alive' must be a boolean", lineno)
        if not isinstance(obj["id"], str) or not isinstance(obj["slide"], str):
            raise ManifestParseError("fields 'id' and 'slide' must be strings", lineno)
        rec = PatchRecord(
            id=obj["id"], slide=obj["slide"],
            x=_int(obj, "x", lineno), y=_int(obj, "y", lineno), size=_int(obj, "size", lineno),
            label=_int(obj, "label", lineno), variant=_int(obj, "variant", lineno),
            orig_index=_int(obj, "orig_index", lineno), alive=obj["alive"],
            truth=_int(obj, "truth", lineno, nullable=True),
        )
        if not 0 <= rec.label < len(classes):
            raise ManifestParseError(f"label {rec.label} outside [0, {len(classes)})", lineno)
        records.append(rec)
    m = Manifest(records, [str(c) for c in classes], header.get("provenance") or {}, Path(base_dir))
    ids = set()
    for rec in records:
        if rec.id in ids:
            raise ManifestParseError(f"duplicate patch id {rec.id!r}")
        ids.add(rec.id)
    return m


def read_manifest(path, check_slides: bool = False) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"manifest not found: {path}")
    m = parse_manifest(path.read_text(encoding="utf-8"), path.parent)
    if check_slides:
        m.validate()
    return m
