"""Synthetic shapes dataset with instance masks and controlled occlusion.

Each foreground class is one shape type drawn in a class colour with
per-instance jitter on a smooth, noisy background. Instances are either
placed apart (their 1-pixel dilations never touch an earlier instance) or,
with probability ``occlusion_rate``, forced to overlap exactly one earlier
instance. The generator records which pairs it made touch; because of the
separation rule that record is exactly the adjacency structure of the
output masks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import (
    ClassCatalog,
    DatasetManifest,
    InstanceMask,
    ManifestEntry,
    write_image,
    write_instances,
    write_label_png,
    write_manifest,
)
from .errors import ValidationError

log = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "cross", "diamond", "ring")

CLASS_COLORS = np.array([
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.90, 0.85, 0.20],
    [0.80, 0.25, 0.80],
    [0.20, 0.80, 0.85],
], dtype=np.float32)

_STRUCT = np.ones((3, 3), dtype=bool)
_MAX_ATTEMPTS = 60


@dataclass(frozen=True)
class ToyConfig:
    n_images: int = 200
    image_size: int = 64
    n_classes: int = 4  # foreground shape classes; background is added on top
    occlusion_rate: float = 0.5
    max_instances_per_image: int = 3
    seed: int = 0
    color_jitter: float = 0.08
    id_prefix: str = "toy"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError("n_classes must be >= 2")
        if self.n_classes > len(SHAPES):
            raise ValidationError(f"at most {len(SHAPES)} shape classes are available")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValidationError("occlusion_rate must lie in [0, 1]")
        if self.max_instances_per_image < 1 or self.n_images < 0:
            raise ValidationError("max_instances_per_image must be >= 1 and n_images >= 0")
        if self.image_size < 16:
            raise ValidationError("image_size must be >= 16")

    def catalog(self) -> ClassCatalog:
        return ClassCatalog(("background",) + SHAPES[: self.n_classes])


def shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        h = 0.8 * r
        return (np.abs(dy) <= h) & (np.abs(dx) <= h)
    if kind == "triangle":
        # apex up, base at cy + r
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if kind == "cross":
        arm = r / 3.0
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.3, 0.6, size=(8, 8, 1)).astype(np.float32)
    tint = rng.uniform(-0.05, 0.05, size=(1, 1, 3)).astype(np.float32)
    smooth = ndimage.zoom(coarse, (size / 8, size / 8, 1), order=1)[:size, :size]
    return smooth + tint


class _Deck:
    """Round-robin class dealer; reshuffled after every full pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng, self.cards = n, rng, []

    def draw(self) -> int:
        if not self.cards:
            self.cards = list(self.rng.permutation(self.n) + 1)
        return int(self.cards.pop())

    def put_back(self, cls: int) -> None:
        # an unplaced class goes back on top so balance and coverage survive drops
        self.cards.append(cls)


def _render_image(cfg: ToyConfig, index: int, deck: _Deck):
    size = cfg.image_size
    rng = np.random.default_rng([cfg.seed, index])
    image = _background(rng, size)
    ids = np.zeros((size, size), dtype=np.int64)
    classes: dict[int, int] = {}
    pairs: set[tuple[int, int]] = set()
    n_inst = int(rng.integers(1, cfg.max_instances_per_image + 1))

    for k in range(n_inst):
        cls = deck.draw()
        kind = SHAPES[cls - 1]
        new_id = len(classes) + 1
        forced = bool(classes) and rng.random() < cfg.occlusion_rate
        placed = None
        for _ in range(_MAX_ATTEMPTS):
            r = rng.uniform(0.12, 0.22) * size
            if forced:
                target = int(rng.choice(sorted(classes)))
                ty, tx = ndimage.center_of_mass(ids == target)
                ang = rng.uniform(0, 2 * np.pi)
                dist = rng.uniform(0.4, 0.9) * r
                cy, cx = ty + dist * np.sin(ang), tx + dist * np.cos(ang)
            else:
                cy, cx = rng.uniform(0, size, size=2)
            m = shape_mask(kind, cy, cx, r, size)
            if m.sum() < 20:
                continue
            grown = ndimage.binary_dilation(m, _STRUCT)
            if forced:
                others = (ids != 0) & (ids != target)
                before = (ids == target).sum()
                after = ((ids == target) & ~m).sum()
                if (m & (ids == target)).any() and not (grown & others).any() \
                        and after >= max(12, 0.3 * before):
                    placed = (m, target)
                    break
            elif not (grown & (ids != 0)).any():
                placed = (m, None)
                break
        if placed is None:
            log.debug("image %d: dropped instance %d after %d attempts", index, k, _MAX_ATTEMPTS)
            deck.put_back(cls)
            continue
        m, target = placed
        ids[m] = new_id
        classes[new_id] = cls
        if target is not None:
            pairs.add((target, new_id))
        color = CLASS_COLORS[cls - 1] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)
        image[m] = color.astype(np.float32)

    image += rng.normal(0.0, 0.03, size=image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0)
    mask = np.zeros_like(ids)
    for iid, cls in classes.items():
        mask[ids == iid] = cls
    return image, mask, InstanceMask(ids, classes, frozenset(pairs))


def generate_toy_dataset(config: ToyConfig, out_dir: str | Path) -> DatasetManifest:
    """Write images, masks, instance masks, ``catalog.json`` and ``manifest.jsonl``."""
    out = Path(out_dir)
    for sub in ("images", "masks", "instances"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    deck = _Deck(config.n_classes, np.random.default_rng([config.seed, 2**31 - 1]))
    entries = []
    for i in range(config.n_images):
        image, mask, inst = _render_image(config, i, deck)
        sid = f"{config.id_prefix}{i:05d}"
        write_image(out / "images" / f"{sid}.png", image)
        write_label_png(out / "masks" / f"{sid}.png", mask)
        write_instances(out / "instances" / f"{sid}.png", inst)
        entries.append(ManifestEntry(
            id=sid, image_path=f"images/{sid}.png", mask_path=f"masks/{sid}.png",
            instance_path=f"instances/{sid}.png",
        ))
    manifest = DatasetManifest(tuple(entries), out)
    write_manifest(manifest, out / "manifest.jsonl")
    config.catalog().save(out / "catalog.json")
    (out / "toy_config.json").write_text(json.dumps(asdict(config), indent=2) + "\n")
    return manifest


def preview(manifest: DatasetManifest, path: str | Path, n: int = 8) -> None:
    """Save a strip of the first ``n`` images for eyeballing."""
    from .data import read_image

    tiles = [read_image(manifest.resolve(e.image_path)) for e in manifest.entries[:n]]
    strip = np.concatenate(tiles, axis=1)
    Image.fromarray((strip * 255).astype(np.uint8)).save(path)
