"""mIoU evaluation, scene-complexity and co-occurrence subsets, perturbation attacks."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .data import (
    ClassCatalog,
    CoOccurrenceMatrix,
    DatasetManifest,
    InstanceMask,
    class_set,
    load_instances,
    load_mask,
    read_image,
)
from .errors import EmptyEvaluationError, ValidationError
from .losses import phantom_activation
from .network import BindingNet

_STRUCT = np.ones((3, 3), dtype=bool)


# --- confusion and IoU -------------------------------------------------------------

def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def update_confusion(cm: np.ndarray, pred: np.ndarray, gt: np.ndarray, ignore_id: int = 255) -> np.ndarray:
    """Add pixel counts ``cm[gt, pred]`` in place, skipping ignored ground truth."""
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    n = cm.shape[0]
    keep = gt != ignore_id
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= n or g.min() < 0 or p.max() >= n or p.min() < 0):
        raise ValidationError("labels outside the confusion matrix range")
    cm += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return cm


def miou(cm: np.ndarray) -> tuple[list[float | None], float]:
    """Per-class IoU (None where the union is empty) and their mean."""
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    present = union > 0
    if not present.any():
        raise EmptyEvaluationError("empty evaluation: no class has a non-empty union")
    iou = np.where(present, tp / np.maximum(union, 1), np.nan)
    per_class = [None if np.isnan(v) else float(v) for v in iou]
    return per_class, float(np.mean(iou[present]))


# --- occlusion ---------------------------------------------------------------------

def detect_occlusions(instances: InstanceMask | None) -> set[tuple[int, int]]:
    """Instance pairs whose masks touch after a one-pixel (8-neighbour) dilation."""
    if instances is None:
        raise ValidationError("subset requires instance annotations")
    ids = instances.ids
    pairs = set()
    for i in instances.instance_ids():
        grown = ndimage.binary_dilation(ids == i, _STRUCT)
        for j in np.unique(ids[grown]).tolist():
            if j != 0 and j != i:
                pairs.add((min(i, j), max(i, j)))
    return pairs


# --- subsets -----------------------------------------------------------------------

class SubsetKind(str, Enum):
    ALL = "all"
    OCC_1 = "occ1"
    OCC_ALL = "occall"
    N_OBJECTS = "nobj"
    N_UNIQUE = "nuniq"
    COOC_THRESHOLD = "cooc"
    EXCLUSIVE = "excl"
    CO_OCCUR_WITH = "with"


@dataclass(frozen=True)
class SubsetSpec:
    kind: SubsetKind = SubsetKind.ALL
    n: int | None = None
    threshold: int | None = None
    cls: int | None = None
    anchor: int | None = None
    any_pair: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", SubsetKind(self.kind))
        k = self.kind
        if k in (SubsetKind.N_OBJECTS, SubsetKind.N_UNIQUE) and (self.n is None or self.n < 1):
            raise ValidationError(f"{k.value} needs a positive count")
        if k is SubsetKind.N_UNIQUE and self.n < 2:
            raise ValidationError("nuniq needs a count of at least 2")
        if k is SubsetKind.COOC_THRESHOLD and (self.threshold is None or self.threshold <= 0):
            raise ValidationError("cooc needs a positive threshold")
        if k in (SubsetKind.EXCLUSIVE, SubsetKind.CO_OCCUR_WITH) and (self.cls is None or self.cls <= 0):
            raise ValidationError(f"{k.value} needs a foreground class")
        if k is SubsetKind.CO_OCCUR_WITH and (self.anchor is None or self.anchor <= 0):
            raise ValidationError("with needs a foreground anchor class")

    @property
    def needs_instances(self) -> bool:
        return self.kind in (SubsetKind.OCC_1, SubsetKind.OCC_ALL, SubsetKind.N_OBJECTS)

    def label(self) -> str:
        k = self.kind
        if k in (SubsetKind.N_OBJECTS, SubsetKind.N_UNIQUE):
            return f"{k.value}={self.n}"
        if k is SubsetKind.COOC_THRESHOLD:
            return f"cooc<{self.threshold}" + ("(any)" if self.any_pair else "")
        if k is SubsetKind.EXCLUSIVE:
            return f"excl={self.cls}"
        if k is SubsetKind.CO_OCCUR_WITH:
            return f"with={self.cls}&{self.anchor}"
        return k.value

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


_SUBSET_RE = re.compile(r"^(all|occ1|occall|nobj=(\d+)|nuniq=(\d+)|cooc<(\d+)|excl=(\w+)|with=(\w+))$")


def parse_subset(text: str, catalog: ClassCatalog, anchor: str | int | None = None,
                 any_pair: bool = False) -> SubsetSpec:
    """Parse the command-line subset syntax (``occ1``, ``nobj=3``, ``cooc<20``, ``excl=cat`` ...)."""
    m = _SUBSET_RE.match(text.strip())
    if not m:
        raise ValidationError(f"cannot parse subset {text!r}")
    head = m.group(1)
    if head in ("all", "occ1", "occall"):
        return SubsetSpec(SubsetKind(head))
    if m.group(2):
        return SubsetSpec(SubsetKind.N_OBJECTS, n=int(m.group(2)))
    if m.group(3):
        return SubsetSpec(SubsetKind.N_UNIQUE, n=int(m.group(3)))
    if m.group(4):
        return SubsetSpec(SubsetKind.COOC_THRESHOLD, threshold=int(m.group(4)), any_pair=any_pair)
    if m.group(5):
        return SubsetSpec(SubsetKind.EXCLUSIVE, cls=catalog.index(m.group(5)))
    if anchor is None:
        if "person" not in catalog.names:
            raise ValidationError("catalog has no 'person' class; pass an explicit anchor")
        anchor = "person"
    return SubsetSpec(SubsetKind.CO_OCCUR_WITH, cls=catalog.index(m.group(6)),
                      anchor=catalog.index(anchor))


def _keeps(spec: SubsetSpec, classes: frozenset[int], inst: InstanceMask | None,
           cooc: CoOccurrenceMatrix | None) -> bool:
    k = spec.kind
    if k is SubsetKind.ALL:
        return True
    if k is SubsetKind.OCC_1:
        return bool(detect_occlusions(inst))
    if k is SubsetKind.OCC_ALL:
        ids = inst.instance_ids() if inst is not None else None
        pairs = detect_occlusions(inst)
        involved = {i for p in pairs for i in p}
        return bool(ids) and set(ids) <= involved
    if k is SubsetKind.N_OBJECTS:
        if inst is None:
            raise ValidationError("subset requires instance annotations")
        return len(inst.instance_ids()) == spec.n
    if k is SubsetKind.N_UNIQUE:
        return len(classes) == spec.n
    if k is SubsetKind.COOC_THRESHOLD:
        if cooc is None:
            raise ValidationError("cooc subsets need a training co-occurrence matrix")
        below = [cooc.counts[a, b] < spec.threshold for a, b in combinations(sorted(classes), 2)]
        return any(below) if spec.any_pair else all(below)
    if k is SubsetKind.EXCLUSIVE:
        return classes == {spec.cls}
    if k is SubsetKind.CO_OCCUR_WITH:
        return spec.cls in classes and spec.anchor in classes
    raise ValidationError(f"unhandled subset kind {k}")  # pragma: no cover


def filter_subset(manifest: DatasetManifest, spec: SubsetSpec, catalog: ClassCatalog,
                  cooc: CoOccurrenceMatrix | None = None) -> DatasetManifest:
    """Entries satisfying ``spec``, in manifest order."""
    keep = []
    for e in manifest:
        classes = class_set(load_mask(manifest.resolve(e.mask_path), catalog), catalog)
        inst = None
        if spec.needs_instances:
            if not e.instance_path:
                raise ValidationError(f"subset requires instance annotations (entry {e.id} has none)")
            inst = load_instances(manifest.resolve(e.instance_path))
        if _keeps(spec, classes, inst, cooc):
            keep.append(e)
    return DatasetManifest(tuple(keep), manifest.root)


# --- perturbations -------------------------------------------------------------------

def load_perturbation(path: str | Path) -> np.ndarray:
    """Read a perturbation as float32 (H, W, 3) in image units.

    ``.npy`` arrays are taken as-is (CHW is transposed); 8-bit PNGs are
    offset-encoded, ``(pixel - 128) / 255``.
    """
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
        if arr.ndim == 4 and arr.shape[0] == 1:
            arr = arr[0]
        if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[2] != 3:
            arr = arr.transpose(1, 2, 0)
    else:
        with Image.open(path) as im:
            arr = (np.asarray(im.convert("RGB"), dtype=np.float32) - 128.0) / 255.0
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"{path}: perturbation must be HxWx3, got {arr.shape}")
    return arr


def fit_perturbation(pert: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Tile along dimensions where ``pert`` is smaller, center-crop where larger."""
    out = pert
    for axis, target in enumerate(hw):
        size = out.shape[axis]
        if size < target:
            reps = [1, 1, 1]
            reps[axis] = -(-target // size)
            out = np.tile(out, reps)
            size = out.shape[axis]
            start = 0
        else:
            start = (size - target) // 2
        out = np.take(out, np.arange(start, start + target), axis=axis)
    return out


def apply_perturbation(image: np.ndarray, perturbation: np.ndarray, max_norm: float | None = None) -> np.ndarray:
    if max_norm is not None:
        norm = float(np.abs(perturbation).max(initial=0.0))
        if norm > max_norm + 1e-7:
            raise ValidationError(f"perturbation L-inf norm {norm:.6f} exceeds max_norm {max_norm:.6f}")
    p = fit_perturbation(perturbation, image.shape[:2])
    return np.clip(image + p, 0.0, 1.0).astype(image.dtype)


def random_sign_perturbation(hw: tuple[int, int], eps: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (eps * rng.choice([-1.0, 1.0], size=(*hw, 3))).astype(np.float32)


# --- model evaluation ----------------------------------------------------------------

class Predictor(Protocol):
    def __call__(self, images: np.ndarray, ids: list[str]) -> np.ndarray: ...


class NetPredictor:
    """Argmax labels from one head of a BindingNet at full input resolution."""

    def __init__(self, model: BindingNet, head: str = "t"):
        if head not in ("t", "p", "fb"):
            raise ValidationError(f"unknown head {head!r}")
        self.model, self.head = model.eval(), head

    @torch.no_grad()
    def logits(self, images: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
        triple = self.model(x, include_fbh=self.head == "fb", upsample=True)
        return triple.maps()[self.head]

    def __call__(self, images: np.ndarray, ids: list[str]) -> np.ndarray:
        return self.logits(images).argmax(1).numpy()


def head_for_stage(stage: int) -> str:
    return "fb" if stage == 1 else "t"


@dataclass
class EvalReport:
    subset: str
    image_count: int
    class_names: list[str]
    per_class_iou: list[float | None]
    miou: float
    per_image_iou: dict[str, float] | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        missing = {"subset", "image_count", "class_names", "per_class_iou", "miou"} - set(d)
        if missing:
            raise ValidationError(f"{path}: report lacks fields {sorted(missing)}")
        return cls(**d)


def _batches(manifest: DatasetManifest, batch_size: int):
    """Consecutive runs of same-sized images, at most ``batch_size`` long."""
    run: list = []
    for e in manifest:
        img = read_image(manifest.resolve(e.image_path))
        if run and (len(run) == batch_size or run[-1][1].shape != img.shape):
            yield run
            run = []
        run.append((e, img))
    if run:
        yield run


def evaluate(predictor: Predictor | BindingNet, manifest: DatasetManifest, catalog: ClassCatalog,
             subset: str = "all", head: str = "t", target: str = "mask",
             perturbation: np.ndarray | None = None, max_norm: float | None = None,
             per_image: bool = False, batch_size: int = 16, meta: dict | None = None) -> EvalReport:
    """Full-resolution inference, argmax, confusion accumulation.

    ``target`` selects the ground truth: ``mask`` or ``second_mask``.
    """
    if len(manifest) == 0:
        raise EmptyEvaluationError(f"subset {subset!r} selected no images")
    if isinstance(predictor, BindingNet):
        predictor = NetPredictor(predictor, head)
    cm = new_confusion(catalog.num_classes)
    per_img = {} if per_image else None
    for run in _batches(manifest, batch_size):
        images = np.stack([img for _, img in run])
        if perturbation is not None:
            images = np.stack([apply_perturbation(im, perturbation, max_norm) for im in images])
        preds = predictor(images, [e.id for e, _ in run])
        for (e, _), pred in zip(run, preds):
            rel = e.mask_path if target == "mask" else e.second_mask_path
            if rel is None:
                raise ValidationError(f"entry {e.id} has no {target}")
            gt = load_mask(manifest.resolve(rel), catalog)
            update_confusion(cm, pred, gt, catalog.ignore_id)
            if per_img is not None:
                one = update_confusion(new_confusion(catalog.num_classes), pred, gt, catalog.ignore_id)
                try:
                    per_img[e.id] = miou(one)[1]
                except EmptyEvaluationError:
                    pass
    per_class, mean = miou(cm)
    return EvalReport(subset, len(manifest), list(catalog.names), per_class, mean, per_img,
                      dict(meta or {}))


@torch.no_grad()
def mean_phantom_activation(model: BindingNet, manifest: DatasetManifest, batch_size: int = 16) -> float:
    """Average over images of the summed rectified phantom logits at input resolution."""
    model.eval()
    total, n = 0.0, 0
    for run in _batches(manifest, batch_size):
        x = torch.from_numpy(np.stack([img for _, img in run])).permute(0, 3, 1, 2)
        triple = model(x, include_fbh=False, upsample=True)
        total += float(phantom_activation(triple.s_p).sum())
        n += len(run)
    return total / max(n, 1)


def constant_predictor(label: int) -> Callable[[np.ndarray, list[str]], np.ndarray]:
    def predict(images: np.ndarray, ids: list[str]) -> np.ndarray:
        return np.full(images.shape[:3], label, dtype=np.int64)
    return predict
