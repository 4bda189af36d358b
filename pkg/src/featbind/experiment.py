"""Desk-scale end-to-end comparison: feature binding vs. a standard-data baseline.

Both arms share architecture, initial weights, stage-2 fine-tuning and the
number of stage-1 optimizer steps; only the stage-1 training data differs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .blending import BlendStrategy, generate_blended_dataset
from .data import ClassCatalog, DatasetManifest
from .evaluation import (
    EvalReport,
    constant_predictor,
    evaluate,
    mean_phantom_activation,
    random_sign_perturbation,
)
from .network import NetworkConfig, load_checkpoint
from .toy import ToyConfig, generate_toy_dataset
from .training import TrainConfig, train_stage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskConfig:
    n_train: int = 200
    n_val: int = 50
    image_size: int = 64
    n_classes: int = 4
    occlusion_rate: float = 0.5
    max_instances: int = 3
    seed: int = 7
    strategy: str = "cfb"
    stage1_epochs: int = 40
    stage2_epochs: int = 10
    stage1_lr: float = 0.01
    stage2_lr: float = 0.001
    stage2_ppa_epsilon: float = 1e-12
    batch_size: int = 8
    encoder_width: int = 16
    branch_hidden: int = 32
    attack_eps: float = 8 / 255
    match_steps: bool = True


def _toy(cfg: DeskConfig, n: int, seed: int, prefix: str, out: Path) -> DatasetManifest:
    return generate_toy_dataset(ToyConfig(
        n_images=n, image_size=cfg.image_size, n_classes=cfg.n_classes,
        occlusion_rate=cfg.occlusion_rate, max_instances_per_image=cfg.max_instances,
        seed=seed, id_prefix=prefix), out)


def _train_cfg(cfg: DeskConfig, stage: int, epochs: int) -> TrainConfig:
    return TrainConfig(stage=stage, base_lr=cfg.stage1_lr if stage == 1 else cfg.stage2_lr,
                       epochs=epochs, crop_size=cfg.image_size, batch_size=cfg.batch_size,
                       seed=cfg.seed,
                       ppa_epsilon=cfg.stage2_ppa_epsilon if stage == 2 else 1e-12)


def run_arm(name: str, cfg: DeskConfig, stage1_data: DatasetManifest, train: DatasetManifest,
            catalog: ClassCatalog, work: Path, stage1_epochs: int) -> dict:
    net = NetworkConfig(num_classes=catalog.num_classes, encoder_width=cfg.encoder_width,
                        branch_hidden=cfg.branch_hidden)
    s1 = train_stage(_train_cfg(cfg, 1, stage1_epochs), stage1_data, catalog,
                     work / name / "stage1", net_config=net)
    s2 = train_stage(_train_cfg(cfg, 2, cfg.stage2_epochs), train, catalog,
                     work / name / "stage2", init_checkpoint=s1.checkpoint)
    return {"stage1": s1, "stage2": s2}


def run_desk_experiment(work_dir: str | Path, cfg: DeskConfig = DeskConfig()) -> dict:
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    train = _toy(cfg, cfg.n_train, cfg.seed, "tr", work / "train")
    val = _toy(cfg, cfg.n_val, cfg.seed + 1000, "va", work / "val")
    catalog = ToyConfig(n_classes=cfg.n_classes).catalog()
    strategy = BlendStrategy(cfg.strategy)
    blended = generate_blended_dataset(train, strategy, cfg.seed, work / "train_blend", catalog)
    val_blend = generate_blended_dataset(val, BlendStrategy("cfb"), cfg.seed + 1000,
                                         work / "val_blend", catalog)

    binding = run_arm("binding", cfg, blended, train, catalog, work, cfg.stage1_epochs)
    steps = cfg.stage1_epochs * math.ceil(len(blended) / cfg.batch_size)
    base_epochs = (max(1, round(steps / math.ceil(len(train) / cfg.batch_size)))
                   if cfg.match_steps else cfg.stage1_epochs)
    baseline = run_arm("baseline", cfg, train, train, catalog, work, base_epochs)

    m1, _ = load_checkpoint(binding["stage1"].checkpoint)
    m2 = binding["stage2"].model
    b2 = baseline["stage2"].model

    results = {"config": asdict(cfg), "n_blended": len(blended), "baseline_stage1_epochs": base_epochs}
    reports: list[EvalReport] = []

    def ev(model, manifest, head="t", target="mask", method="", attack="clean", pert=None):
        r = evaluate(model, manifest, catalog, subset="val", head=head, target=target,
                     perturbation=pert, meta={"method": method, "attack": attack, "head": head})
        reports.append(r)
        return r.miou

    results["binding_val_miou"] = ev(m2, val, method="binding")
    results["baseline_val_miou"] = ev(b2, val, method="baseline")
    results["binding_stage1_fb_val_miou"] = evaluate(m1, val, catalog, head="fb").miou

    # source separation on blended validation pairs, stage-1 weights
    results["sep_dominant_miou"] = evaluate(m1, val_blend, catalog, head="t").miou
    results["sep_phantom_miou"] = evaluate(m1, val_blend, catalog, head="p", target="second_mask").miou
    results["const_bg_dominant_miou"] = evaluate(constant_predictor(0), val_blend, catalog).miou
    results["const_bg_phantom_miou"] = evaluate(constant_predictor(0), val_blend, catalog,
                                                target="second_mask").miou

    results["phantom_before"] = mean_phantom_activation(m1, val)
    results["phantom_after"] = mean_phantom_activation(m2, val)

    pert = random_sign_perturbation((cfg.image_size, cfg.image_size), cfg.attack_eps, cfg.seed)
    np.save(work / "perturbation.npy", pert)
    attack = f"rand{round(cfg.attack_eps * 255)}"
    results["baseline_attacked_miou"] = ev(b2, val, method="baseline", attack=attack, pert=pert)
    results["binding_attacked_miou"] = ev(m2, val, method="binding", attack=attack, pert=pert)
    results["zero_pert_identical"] = bool(np.array_equal(
        _labels(b2, val), _labels(b2, val, np.zeros_like(pert))))

    report_dir = work / "reports"
    report_dir.mkdir(exist_ok=True)
    for i, r in enumerate(reports):
        r.save(report_dir / f"{i:02d}_{r.meta['method']}_{r.meta['attack']}.json")
    results["history"] = {
        arm: {st: res[st].history for st in ("stage1", "stage2")}
        for arm, res in (("binding", binding), ("baseline", baseline))
    }
    (work / "results.json").write_text(json.dumps(results, indent=2) + "\n")
    return results


def _labels(model, manifest, pert=None) -> np.ndarray:
    from .evaluation import NetPredictor, apply_perturbation
    from .data import read_image

    pred = NetPredictor(model, "t")
    out = []
    for e in manifest:
        img = read_image(manifest.resolve(e.image_path))
        if pert is not None:
            img = apply_perturbation(img, pert)
        out.append(pred(img[None], [e.id])[0])
    return np.stack(out)


def quick(cfg: DeskConfig, **kw) -> DeskConfig:
    return replace(cfg, **kw)
