"""Pair planning and pixel-space mixing for the blended source dataset.

The dominant image keeps its geometry; the phantom is rescaled to cover it
and center-cropped. Blend weights are sampled once per pair when the plan
is made, so the written dataset fully determines training.
"""

from __future__ import annotations

import logging
import shutil
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    ClassCatalog,
    DatasetManifest,
    LabeledSample,
    ManifestEntry,
    load_mask,
    load_sample,
    manifest_class_sets,
    read_image,
    write_image,
    write_label_png,
    write_manifest,
)
from .errors import ValidationError

log = logging.getLogger(__name__)


class Strategy(str, Enum):
    CFB = "cfb"      # categorical clustering
    RFB = "rfb"      # random pairing, several partners per sample
    CAFB = "cafb"    # within-category random pairing
    WRFB = "wrfb"    # random pairing, fixed weight
    MFB = "mfb"      # blend half the set, keep the other half standard
    MIXUP = "mixup"
    CUTMIX = "cutmix"


@dataclass(frozen=True)
class BlendStrategy:
    tag: Strategy = Strategy.CFB
    delta_lo: float = 0.7
    delta_hi: float = 1.0
    fixed_delta: float | None = None
    partners: int = 10
    alpha: float = 1.0
    primary_cluster_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tag", Strategy(self.tag))
        if self.tag is Strategy.WRFB and self.fixed_delta is None:
            object.__setattr__(self, "fixed_delta", 0.6)
        if not 0.0 < self.delta_lo <= self.delta_hi <= 1.0:
            raise ValidationError(f"delta range [{self.delta_lo}, {self.delta_hi}] must satisfy 0 < lo <= hi <= 1")
        if self.fixed_delta is not None and not 0.0 < self.fixed_delta <= 1.0:
            raise ValidationError(f"fixed delta {self.fixed_delta} outside (0, 1]")
        if self.partners < 1:
            raise ValidationError("partner count must be >= 1")
        if self.alpha <= 0:
            raise ValidationError("alpha must be positive")

    def delta_bounds(self) -> tuple[float, float]:
        if self.fixed_delta is not None:
            return self.fixed_delta, self.fixed_delta
        if self.tag in (Strategy.MIXUP, Strategy.CUTMIX):
            return 0.0, 1.0
        return self.delta_lo, self.delta_hi

    def to_dict(self) -> dict:
        return {"tag": self.tag.value, "delta_lo": self.delta_lo, "delta_hi": self.delta_hi,
                "fixed_delta": self.fixed_delta, "partners": self.partners,
                "alpha": self.alpha, "primary_cluster_only": self.primary_cluster_only}


@dataclass(frozen=True)
class Pair:
    dominant: str
    phantom: str | None  # None: emit the dominant unblended
    delta: float


@dataclass(frozen=True)
class PairPlan:
    pairs: tuple[Pair, ...]
    strategy: BlendStrategy
    seed: int

    def __post_init__(self):
        lo, hi = self.strategy.delta_bounds()
        for p in self.pairs:
            if p.dominant == p.phantom:
                raise ValidationError(f"pair pairs {p.dominant!r} with itself")
            if p.phantom is not None and not lo <= p.delta <= hi:
                raise ValidationError(f"delta {p.delta} outside [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class BlendedSample:
    id: str
    image: np.ndarray
    mask1: np.ndarray
    mask2: np.ndarray
    delta: float

    def __post_init__(self):
        if not (self.image.shape[:2] == self.mask1.shape == self.mask2.shape):
            raise ValidationError(f"{self.id}: image and masks must share spatial dims")
        if not 0.0 < self.delta <= 1.0:
            raise ValidationError(f"{self.id}: delta {self.delta} outside (0, 1]")


# --- clustering and planning -------------------------------------------------

def build_category_clusters(class_sets: dict[str, frozenset[int]], catalog: ClassCatalog,
                            primary: dict[str, int] | None = None) -> dict[int, list[str]]:
    """Map each foreground class to the ids containing it, in manifest order.

    With ``primary`` (id -> class), each image joins only that one cluster.
    """
    clusters = {c: [] for c in range(1, catalog.num_classes)}
    for sid, classes in class_sets.items():
        if primary is not None:
            classes = {primary[sid]} if sid in primary else set()
        for c in sorted(classes):
            clusters[c].append(sid)
    return clusters


def primary_classes(manifest: DatasetManifest, catalog: ClassCatalog) -> dict[str, int]:
    """Foreground class covering the most pixels, ties to the lower id."""
    out = {}
    for e in manifest:
        mask = load_mask(manifest.resolve(e.mask_path), catalog)
        counts = np.bincount(mask[mask < catalog.num_classes].ravel(), minlength=catalog.num_classes)
        counts[catalog.background_id] = 0
        if counts.any():
            out[e.id] = int(np.argmax(counts))
    return out


def sample_delta(strategy: BlendStrategy, rng: np.random.Generator) -> float:
    if strategy.fixed_delta is not None:
        return float(strategy.fixed_delta)
    if strategy.tag is Strategy.MIXUP:
        return float(rng.beta(strategy.alpha, strategy.alpha))
    if strategy.tag is Strategy.CUTMIX:
        return float(rng.beta(1.0, 1.0))
    return float(rng.uniform(strategy.delta_lo, strategy.delta_hi))


def _draw_other(rng: np.random.Generator, pool: list[str], exclude: str) -> str | None:
    candidates = [s for s in pool if s != exclude]
    if not candidates:
        return None
    return candidates[int(rng.integers(len(candidates)))]


def plan_pairs(strategy: BlendStrategy, clusters: dict[int, list[str]],
               ids: list[str], seed: int) -> PairPlan:
    """Decide (dominant, phantom, delta) triples for one strategy.

    ``ids`` is the manifest order; ``clusters`` comes from
    :func:`build_category_clusters`.
    """
    rng = np.random.default_rng(seed)
    pairs: list[Pair] = []
    tag = strategy.tag

    if tag is Strategy.CFB:
        nonempty = [c for c in sorted(clusters) if clusters[c]]
        for c in nonempty:
            for sid in clusters[c]:
                for other in nonempty:
                    if other == c:
                        continue
                    partner = _draw_other(rng, clusters[other], sid)
                    if partner is not None:
                        pairs.append(Pair(sid, partner, sample_delta(strategy, rng)))

    elif tag in (Strategy.RFB, Strategy.WRFB):
        n, k = len(ids), strategy.partners
        for i, sid in enumerate(ids):
            if n < 2:
                continue
            # index into ids with position i removed
            for j in rng.choice(n - 1, size=k, replace=k > n - 1):
                j = int(j) + (j >= i)
                pairs.append(Pair(sid, ids[j], sample_delta(strategy, rng)))

    elif tag is Strategy.CAFB:
        for c in sorted(clusters):
            for sid in clusters[c]:
                partner = _draw_other(rng, clusters[c], sid)
                if partner is None:
                    log.warning("cafb: cluster %d has no partner for %s; skipped", c, sid)
                    continue
                pairs.append(Pair(sid, partner, sample_delta(strategy, rng)))

    elif tag is Strategy.MFB:
        order = [ids[int(i)] for i in rng.permutation(len(ids))]
        half = set(order[: len(order) // 2])
        blend_half = [s for s in ids if s in half]
        for sid in ids:
            if sid in half:
                partner = _draw_other(rng, blend_half, sid)
                if partner is not None:
                    pairs.append(Pair(sid, partner, sample_delta(strategy, rng)))
                    continue
            pairs.append(Pair(sid, None, 1.0))

    elif tag in (Strategy.MIXUP, Strategy.CUTMIX):
        for sid in ids:
            partner = _draw_other(rng, ids, sid)
            if partner is not None:
                pairs.append(Pair(sid, partner, sample_delta(strategy, rng)))
    else:  # pragma: no cover
        raise ValidationError(f"unknown strategy {tag}")

    return PairPlan(tuple(pairs), strategy, seed)


# --- pixel mixing --------------------------------------------------------------

def fit_to(array: np.ndarray, hw: tuple[int, int], nearest: bool) -> np.ndarray:
    """Scale ``array`` to cover ``hw`` (aspect kept), then center-crop/pad to it."""
    h, w = hw
    sh, sw = array.shape[:2]
    if (sh, sw) == (h, w):
        return array
    scale = max(h / sh, w / sw)
    nh, nw = max(h, round(sh * scale)), max(w, round(sw * scale))
    if nearest:
        resized = np.asarray(Image.fromarray(array.astype(np.int32)).resize((nw, nh), Image.NEAREST))
        resized = resized.astype(array.dtype)
    else:
        chans = [np.asarray(Image.fromarray(array[..., c].astype(np.float32), mode="F")
                            .resize((nw, nh), Image.BILINEAR)) for c in range(array.shape[2])]
        resized = np.clip(np.stack(chans, axis=-1), 0.0, 1.0).astype(array.dtype)
    top, left = (nh - h) // 2, (nw - w) // 2
    return resized[top:top + h, left:left + w]


def mix_images(dominant: np.ndarray, phantom: np.ndarray, delta: float) -> np.ndarray:
    return delta * dominant + (1.0 - delta) * phantom


def blend_pair(dominant: LabeledSample, phantom: LabeledSample, delta: float,
               sid: str | None = None) -> BlendedSample:
    if not 0.0 < delta <= 1.0:
        raise ValidationError(f"delta {delta} outside (0, 1]")
    hw = dominant.mask.shape
    ph_image = fit_to(phantom.image, hw, nearest=False)
    ph_mask = fit_to(phantom.mask, hw, nearest=True)
    image = np.clip(mix_images(dominant.image, ph_image, delta), 0.0, 1.0).astype(np.float32)
    return BlendedSample(sid or f"{dominant.id}+{phantom.id}", image,
                         dominant.mask.copy(), ph_mask.copy(), float(delta))


def mixup_blend(a: LabeledSample, b: LabeledSample, lam: float | None = None,
                rng: np.random.Generator | None = None, alpha: float = 1.0,
                sid: str | None = None) -> BlendedSample:
    if lam is None:
        lam = float((rng or np.random.default_rng()).beta(alpha, alpha))
    # both masks are kept; a's weight becomes the pair delta
    return blend_pair(a, b, max(lam, np.finfo(np.float32).tiny), sid=sid)


def cutmix_box(hw: tuple[int, int], lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Box (y0, y1, x0, x1) covering about ``1 - lam`` of the image."""
    h, w = hw
    cut = np.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y0, y1 = np.clip(cy - ch // 2, 0, h), np.clip(cy + ch // 2, 0, h)
    x0, x1 = np.clip(cx - cw // 2, 0, w), np.clip(cx + cw // 2, 0, w)
    return int(y0), int(y1), int(x0), int(x1)


def cutmix_blend(a: LabeledSample, b: LabeledSample, rng: np.random.Generator,
                 lam: float | None = None, box: tuple[int, int, int, int] | None = None,
                 ignore_id: int = 255, sid: str | None = None) -> BlendedSample:
    hw = a.mask.shape
    if lam is None:
        lam = float(rng.beta(1.0, 1.0))
    if box is None:
        box = cutmix_box(hw, lam, rng)
    y0, y1, x0, x1 = box
    b_image = fit_to(b.image, hw, nearest=False)
    b_mask = fit_to(b.mask, hw, nearest=True)
    image = a.image.copy()
    mask1 = a.mask.copy()
    image[y0:y1, x0:x1] = b_image[y0:y1, x0:x1]
    mask1[y0:y1, x0:x1] = b_mask[y0:y1, x0:x1]
    kept = 1.0 - (y1 - y0) * (x1 - x0) / float(hw[0] * hw[1])
    delta = min(1.0, max(kept, 1.0 / (hw[0] * hw[1])))
    return BlendedSample(sid or f"{a.id}|{b.id}", image.astype(np.float32), mask1,
                         np.full(hw, ignore_id, dtype=mask1.dtype), delta)


def load_blended_sample(entry: ManifestEntry, catalog: ClassCatalog, root: Path) -> BlendedSample:
    """Read a manifest record as a pair sample; standard records get an all-ignore G2."""
    image = read_image(root / entry.image_path)
    mask1 = load_mask(root / entry.mask_path, catalog)
    if entry.second_mask_path is None:
        mask2 = np.full_like(mask1, catalog.ignore_id)
        delta = 1.0
    else:
        mask2 = load_mask(root / entry.second_mask_path, catalog)
        delta = float(entry.delta)
    return BlendedSample(entry.id, image, mask1, mask2, delta)


# --- dataset generation --------------------------------------------------------

def plan_for_manifest(manifest: DatasetManifest, strategy: BlendStrategy,
                      catalog: ClassCatalog, seed: int) -> PairPlan:
    sets = manifest_class_sets(manifest, catalog)
    primary = primary_classes(manifest, catalog) if strategy.primary_cluster_only else None
    clusters = build_category_clusters(sets, catalog, primary)
    return plan_pairs(strategy, clusters, [e.id for e in manifest], seed)


def generate_blended_dataset(manifest: DatasetManifest, strategy: BlendStrategy, seed: int,
                             out_dir: str | Path, catalog: ClassCatalog,
                             float_npy: bool = False) -> DatasetManifest:
    """Materialise the blended dataset under ``out_dir`` and return its manifest.

    Output is staged in a temporary directory and moved into place only on
    success, so a failure leaves nothing behind.
    """
    out = Path(out_dir)
    plan = plan_for_manifest(manifest, strategy, catalog, seed)
    by_id = manifest.by_id()
    ext = ".npy" if float_npy else ".png"
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        for sub in ("images", "masks", "masks2"):
            (staging / sub).mkdir()
        cache: dict[str, LabeledSample] = {}

        def get(sid: str) -> LabeledSample:
            if sid not in cache:
                cache[sid] = load_sample(by_id[sid], catalog, manifest.root)
            return cache[sid]

        entries = []
        for i, pair in enumerate(plan.pairs):
            eid = f"{strategy.tag.value}{i:06d}"
            dom = get(pair.dominant)
            if pair.phantom is None:
                sample = BlendedSample(eid, dom.image, dom.mask,
                                       np.full_like(dom.mask, catalog.ignore_id), 1.0)
                tag = f"{strategy.tag.value}-standard"
            elif strategy.tag is Strategy.CUTMIX:
                pair_rng = np.random.default_rng([seed, i])
                sample = cutmix_blend(dom, get(pair.phantom), pair_rng, lam=pair.delta,
                                      ignore_id=catalog.ignore_id, sid=eid)
                tag = strategy.tag.value
            else:
                sample = blend_pair(dom, get(pair.phantom), max(pair.delta, 1e-6), sid=eid)
                tag = strategy.tag.value
            write_image(staging / "images" / f"{eid}{ext}", sample.image)
            write_label_png(staging / "masks" / f"{eid}.png", sample.mask1)
            write_label_png(staging / "masks2" / f"{eid}.png", sample.mask2)
            sources = (pair.dominant,) if pair.phantom is None else (pair.dominant, pair.phantom)
            entries.append(ManifestEntry(
                id=eid, image_path=f"images/{eid}{ext}", mask_path=f"masks/{eid}.png",
                second_mask_path=f"masks2/{eid}.png", delta=sample.delta,
                source_ids=sources, strategy_tag=tag,
            ))
        write_manifest(entries, staging / "manifest.jsonl")
        catalog.save(staging / "catalog.json")
        for item in staging.iterdir():
            target = out / item.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            item.rename(target)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return DatasetManifest(tuple(entries), out)
