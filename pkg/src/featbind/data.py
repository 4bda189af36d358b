"""Dataset types, manifest I/O and class statistics.

Images are held as float32 arrays of shape (H, W, 3) in [0, 1]; masks as
integer arrays of shape (H, W). Manifests are JSONL files whose paths are
resolved against the manifest's own directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ValidationError

VOC_CLASSES = (
    "background", "aeroplane", "bicycle", "bird", "boat", "bottle", "bus",
    "car", "cat", "chair", "cow", "diningtable", "dog", "horse", "motorbike",
    "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)


@dataclass(frozen=True)
class ClassCatalog:
    names: tuple[str, ...]
    ignore_id: int = 255
    background_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 1:
            raise ValidationError("catalog needs at least one class")
        if 0 <= self.ignore_id < self.num_classes:
            raise ValidationError(
                f"ignore_id {self.ignore_id} collides with class range [0, {self.num_classes})"
            )
        if self.background_id != 0:
            raise ValidationError("background_id must be 0")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def index(self, name_or_id: str | int) -> int:
        """Resolve a class name or numeric string to a class id."""
        if isinstance(name_or_id, int) or str(name_or_id).isdigit():
            cid = int(name_or_id)
            if not 0 <= cid < self.num_classes:
                raise ValidationError(f"class id {cid} out of range")
            return cid
        try:
            return self.names.index(name_or_id)
        except ValueError:
            raise ValidationError(f"unknown class name {name_or_id!r}") from None

    @classmethod
    def voc(cls) -> "ClassCatalog":
        return cls(VOC_CLASSES)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "ignore_id": self.ignore_id,
                "background_id": self.background_id}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        return cls(tuple(d["names"]), int(d.get("ignore_id", 255)),
                   int(d.get("background_id", 0)))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ClassCatalog":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class InstanceMask:
    """Instance ids per pixel (0 = none) plus the id -> class mapping."""

    ids: np.ndarray
    classes: dict[int, int]
    # pairs recorded by a generator, if any; not used for evaluation
    recorded_pairs: frozenset[tuple[int, int]] | None = None

    def instance_ids(self) -> list[int]:
        return sorted(i for i in np.unique(self.ids).tolist() if i != 0)


@dataclass(frozen=True)
class LabeledSample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    instances: InstanceMask | None = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ValidationError(
                f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ"
            )


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    instance_path: str | None = None
    second_mask_path: str | None = None
    delta: float | None = None
    source_ids: tuple[str, ...] | None = None
    strategy_tag: str = "standard"

    def __post_init__(self):
        if (self.delta is None) != (self.second_mask_path is None):
            raise ValidationError(f"{self.id}: delta present iff second_mask_path present")
        if self.delta is not None and not 0.0 < self.delta <= 1.0:
            raise ValidationError(f"{self.id}: delta {self.delta} outside (0, 1]")
        if self.source_ids is not None:
            object.__setattr__(self, "source_ids", tuple(self.source_ids))

    @property
    def is_blended(self) -> bool:
        return self.second_mask_path is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["source_ids"] is not None:
            d["source_ids"] = list(d["source_ids"])
        return d


_ENTRY_KEYS = {f.name for f in fields(ManifestEntry)}


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path = field(default=Path("."))

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "root", Path(self.root))
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ValidationError(f"duplicate manifest id {e.id!r}")
            seen.add(e.id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(tuple(e for e in self.entries if e.id in keep), self.root)

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.id: e for e in self.entries}


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    entries = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            unknown = set(rec) - _ENTRY_KEYS
            if unknown:
                raise ValidationError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            entries.append(ManifestEntry(**rec))
    return DatasetManifest(tuple(entries), path.parent)


def write_manifest(manifest: DatasetManifest | Sequence[ManifestEntry],
                   path: str | os.PathLike) -> Path:
    path = Path(path)
    entries = manifest.entries if isinstance(manifest, DatasetManifest) else manifest
    with path.open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_dict(), separators=(",", ":")) + "\n")
    return path


# --- pixel I/O ---------------------------------------------------------------

def read_image(path: str | os.PathLike) -> np.ndarray:
    """Load an RGB image as float32 (H, W, 3) in [0, 1]. ``.npy`` is read as-is."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"{path}: expected HxWx3 array, got {arr.shape}")
        return np.clip(arr, 0.0, 1.0)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, image.astype(np.float32))
        return
    u8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def read_label_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ValidationError(f"{path}: label PNG must be single-channel, got mode {im.mode}")
        # palette images yield raw indices, which is what we want
        return np.asarray(im).astype(np.int64)


def write_label_png(path: str | os.PathLike, labels: np.ndarray) -> None:
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValidationError(f"{path}: label values must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def validate_mask(mask: np.ndarray, catalog: ClassCatalog, where: str = "mask") -> None:
    values = np.unique(mask)
    bad = [int(v) for v in values
           if not (0 <= v < catalog.num_classes or v == catalog.ignore_id)]
    if bad:
        raise ValidationError(
            f"{where}: invalid class id {bad[0]} (num_classes={catalog.num_classes}, "
            f"ignore_id={catalog.ignore_id})"
        )


def load_mask(path: str | os.PathLike, catalog: ClassCatalog) -> np.ndarray:
    mask = read_label_png(path)
    validate_mask(mask, catalog, str(path))
    return mask


def sidecar_path(instance_path: str | os.PathLike) -> Path:
    return Path(instance_path).with_suffix(".json")


def load_instances(path: str | os.PathLike) -> InstanceMask:
    ids = read_label_png(path)
    meta = json.loads(sidecar_path(path).read_text())
    classes = {int(k): int(v) for k, v in meta["classes"].items()}
    missing = set(np.unique(ids).tolist()) - {0} - set(classes)
    if missing:
        raise ValidationError(f"{path}: instance ids {sorted(missing)} have no class mapping")
    pairs = meta.get("occluding_pairs")
    recorded = frozenset(tuple(sorted(p)) for p in pairs) if pairs is not None else None
    return InstanceMask(ids, classes, recorded)


def write_instances(path: str | os.PathLike, inst: InstanceMask) -> None:
    write_label_png(path, inst.ids)
    meta = {"classes": {str(k): v for k, v in sorted(inst.classes.items())}}
    if inst.recorded_pairs is not None:
        meta["occluding_pairs"] = sorted(list(p) for p in inst.recorded_pairs)
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_sample(entry: ManifestEntry, catalog: ClassCatalog,
                root: str | os.PathLike = ".") -> LabeledSample:
    """Load image, mask and optional instances for one manifest record."""
    root = Path(root)
    image = read_image(root / entry.image_path)
    mask = load_mask(root / entry.mask_path, catalog)
    instances = load_instances(root / entry.instance_path) if entry.instance_path else None
    return LabeledSample(entry.id, image, mask, instances)


# --- statistics ----------------------------------------------------------------

def class_set(mask: np.ndarray, catalog: ClassCatalog) -> frozenset[int]:
    """Foreground classes present in ``mask`` (background and ignore excluded)."""
    values = np.unique(mask).tolist()
    return frozenset(int(v) for v in values
                     if v != catalog.background_id and v != catalog.ignore_id)


def manifest_class_sets(manifest: DatasetManifest, catalog: ClassCatalog) -> dict[str, frozenset[int]]:
    out = {}
    for e in manifest:
        try:
            out[e.id] = class_set(load_mask(manifest.resolve(e.mask_path), catalog), catalog)
        except ValidationError as exc:
            raise ValidationError(f"entry {e.id}: {exc}") from exc
        except OSError as exc:
            raise OSError(f"entry {e.id}: {exc}") from exc
    return out


@dataclass(frozen=True)
class CoOccurrenceMatrix:
    counts: np.ndarray
    names: tuple[str, ...] = ()

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    def to_dict(self) -> dict:
        return {"names": list(self.names), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CoOccurrenceMatrix":
        return cls(np.asarray(d["counts"], dtype=np.int64), tuple(d.get("names", ())))


def cooccurrence_from_sets(sets: Iterable[frozenset[int]], num_classes: int) -> np.ndarray:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for s in sets:
        idx = np.fromiter(sorted(s), dtype=np.int64)
        counts[np.ix_(idx, idx)] += 1
    return counts


def compute_cooccurrence(manifest: DatasetManifest, catalog: ClassCatalog) -> CoOccurrenceMatrix:
    sets = manifest_class_sets(manifest, catalog).values()
    return CoOccurrenceMatrix(cooccurrence_from_sets(sets, catalog.num_classes), catalog.names)


def default_catalog_for(manifest_path: str | os.PathLike) -> ClassCatalog:
    """``catalog.json`` beside the manifest if present, else the VOC catalog."""
    candidate = Path(manifest_path).parent / "catalog.json"
    return ClassCatalog.load(candidate) if candidate.exists() else ClassCatalog.voc()
