"""Two-stage SGD training with the poly schedule and random cropping."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .blending import BlendedSample, load_blended_sample
from .data import ClassCatalog, DatasetManifest, read_image
from .errors import ConfigurationError, ValidationError
from .losses import loss_stage1, loss_stage2
from .network import BindingNet, NetworkConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

DEFAULT_LR = {1: 2.5e-4, 2: 2.5e-5}


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    base_lr: float | None = None  # None: 2.5e-4 for stage 1, 2.5e-5 for stage 2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    poly_power: float = 0.9
    crop_size: int = 321
    batch_size: int = 8
    seed: int = 0
    ppa_epsilon: float = 1e-12
    workers: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValidationError(f"stage must be 1 or 2, got {self.stage}")
        if self.base_lr is None:
            object.__setattr__(self, "base_lr", DEFAULT_LR[self.stage])
        if self.base_lr <= 0:
            raise ValidationError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.crop_size <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValidationError("crop_size and batch_size must be positive, epochs non-negative")
        if self.ppa_epsilon <= 0:
            raise ValidationError("ppa_epsilon must be positive")

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"{path}: unknown TrainConfig keys {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


def poly_lr(iteration: int, max_iter: int, base_lr: float, power: float = 0.9) -> float:
    if not 0 <= iteration <= max_iter:
        raise ValidationError(f"iteration {iteration} outside [0, {max_iter}]")
    if max_iter == 0:
        return base_lr
    return base_lr * (1.0 - iteration / max_iter) ** power


def random_crop(image: np.ndarray, masks: list[np.ndarray], size: int,
                rng: np.random.Generator, ignore_id: int = 255):
    """Crop the same ``size`` x ``size`` window from image and masks.

    Inputs smaller than ``size`` are padded at the bottom/right first: the
    image with 0, masks with ``ignore_id``.
    """
    h, w = image.shape[:2]
    ph, pw = max(size - h, 0), max(size - w, 0)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        masks = [np.pad(m, ((0, ph), (0, pw)), constant_values=ignore_id) for m in masks]
    h, w = image.shape[:2]
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    window = (slice(y0, y0 + size), slice(x0, x0 + size))
    return image[window], [m[window] for m in masks]


def channel_stats(manifest: DatasetManifest) -> tuple[list[float], list[float]]:
    total = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for e in manifest:
        img = read_image(manifest.resolve(e.image_path)).astype(np.float64)
        total += img.sum((0, 1))
        sq += (img ** 2).sum((0, 1))
        n += img.shape[0] * img.shape[1]
    if n == 0:
        return [0.0] * 3, [1.0] * 3
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean ** 2, 1e-8))
    return mean.tolist(), std.tolist()


@dataclass
class TrainResult:
    model: BindingNet
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def build_model(net_cfg: NetworkConfig, seed: int) -> BindingNet:
    torch.manual_seed(seed)
    return BindingNet(net_cfg)


def _batch(samples: list[BlendedSample], cfg: TrainConfig, rng: np.random.Generator, ignore_id: int):
    images, m1, m2 = [], [], []
    for s in samples:
        img, (a, b) = random_crop(s.image, [s.mask1, s.mask2], cfg.crop_size, rng, ignore_id)
        images.append(img)
        m1.append(a)
        m2.append(b)
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    delta = torch.tensor([s.delta for s in samples], dtype=torch.float32)
    return x, torch.from_numpy(np.stack(m1)), torch.from_numpy(np.stack(m2)), delta


def train_stage(config: TrainConfig, manifest: DatasetManifest, catalog: ClassCatalog,
                out_dir: str | Path | None = None, model: BindingNet | None = None,
                init_checkpoint: str | Path | None = None,
                net_config: NetworkConfig | None = None) -> TrainResult:
    """Run one training stage and return the trained model and per-epoch log.

    Stage 1 reads pair records (standard records act as delta=1 with an
    all-ignore second mask). Stage 2 reads only image and first mask, keeps
    the binding head frozen, and needs weights from a stage-1 checkpoint.
    """
    stage = config.stage
    if init_checkpoint is not None:
        model, info = load_checkpoint(init_checkpoint)
        if stage == 2 and info["stage"] != 1:
            raise ConfigurationError(f"stage 2 must start from a stage-1 checkpoint, got stage {info['stage']}")
    elif stage == 2:
        raise ConfigurationError("stage 2 requires a stage-1 checkpoint (--resume)")
    if model is None:
        model = build_model(net_config or NetworkConfig(num_classes=catalog.num_classes), config.seed)
        mean, std = channel_stats(manifest)
        model.set_normalization(mean, std)
    if model.cfg.num_classes != catalog.num_classes:
        raise ConfigurationError(
            f"model has {model.cfg.num_classes} classes, catalog has {catalog.num_classes}")
    if len(manifest) == 0:
        raise ValidationError("training manifest is empty")

    torch.manual_seed(config.seed)
    for p in model.fbh.parameters():
        p.requires_grad_(stage == 1)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=config.base_lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    n = len(manifest)
    per_epoch = -(-n // config.batch_size)
    max_iter = config.epochs * per_epoch
    ignore = catalog.ignore_id
    entries = manifest.entries
    pool = ThreadPoolExecutor(config.workers) if config.workers > 0 else None

    def load(idx):
        return load_blended_sample(entries[idx], catalog, manifest.root)

    history = []
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = (out_dir / "metrics.jsonl").open("w")
    model.train()
    it = 0
    try:
        for epoch in range(config.epochs):
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(n)
            sums = dict.fromkeys(("l_fb", "l_t", "l_p", "l_ppa", "total"), 0.0)
            epoch_lr = poly_lr(it, max_iter, config.base_lr, config.poly_power)
            for b in range(per_epoch):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                samples = list(pool.map(load, idx)) if pool else [load(i) for i in idx]
                x, g1, g2, delta = _batch(samples, config, rng, ignore)
                lr = poly_lr(it, max_iter, config.base_lr, config.poly_power)
                for group in opt.param_groups:
                    group["lr"] = lr
                if stage == 1:
                    triple = model(x, include_fbh=True, upsample=True)
                    losses = loss_stage1(triple, g1, g2, delta, ignore)
                else:
                    triple = model(x, include_fbh=False, upsample=True)
                    losses = loss_stage2(triple.s_t, triple.s_p, g1, config.ppa_epsilon, ignore)
                opt.zero_grad(set_to_none=True)
                losses.total.backward()
                opt.step()
                it += 1
                for k, v in losses.as_floats().items():
                    sums[k] += v * len(idx)
            record = {"epoch": epoch, "lr": epoch_lr, **{k: v / n for k, v in sums.items()}}
            history.append(record)
            log.info("stage %d epoch %d: %s", stage, epoch, record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
    finally:
        if metrics_fh:
            metrics_fh.close()
        if pool:
            pool.shutdown()
    for p in model.fbh.parameters():
        p.requires_grad_(True)
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(out_dir / "checkpoint.pt", model, stage,
                               {"train_config": config.to_dict()})
    return TrainResult(model, history, ckpt)
