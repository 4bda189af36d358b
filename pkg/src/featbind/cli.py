"""Command-line entry point: ``featbind <command> [flags]``.

Each command resolves its settings as flags > ``--config`` file > defaults,
writes the resolved settings to a run record (``run.json`` in output
directories, ``<stem>.run.json`` beside single-file outputs) and can be
re-run from that file with ``featbind replay run.json``.

Exit codes: 0 success, 1 usage/validation error, 2 runtime error. Errors are
printed as one line, ``ERROR <code>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, ValidationError

log = logging.getLogger("featbind")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


DEFAULTS = {
    "toygen": {"n": 200, "size": 64, "classes": 4, "occlusion_rate": 0.5, "max_instances": 3,
               "color_jitter": 0.08, "prefix": "toy", "seed": 7, "out": None},
    "blend": {"manifest": None, "catalog": None, "strategy": "cfb", "delta_lo": 0.7, "delta_hi": 1.0,
              "fixed_delta": None, "partners": 10, "alpha": 1.0, "primary_cluster_only": False,
              "float_npy": False, "seed": 0, "out": None},
    "cooc": {"manifest": None, "catalog": None, "out": None},
    "train": {"stage": 1, "manifest": None, "catalog": None, "config": None, "net_config": None,
              "resume": None, "out": None, "base_lr": None, "epochs": None, "batch_size": None,
              "crop_size": None, "seed": None, "workers": None},
    "eval": {"ckpt": None, "manifest": None, "catalog": None, "subset": "all", "cooc": None,
             "any_pair": False, "anchor": None, "perturbation": None, "max_norm": None,
             "head": "auto", "target": "mask", "method": "", "attack": None, "per_image": False,
             "csv": None, "out": None},
    "report": {"reports": None, "out": None},
}
REQUIRED = {"toygen": ["out"], "blend": ["manifest", "out"], "cooc": ["manifest", "out"],
            "train": ["manifest", "out"], "eval": ["ckpt", "manifest", "out"],
            "report": ["reports", "out"]}


def _add(p, *flags, dest, help, **kw):
    p.add_argument(*flags, dest=dest, default=argparse.SUPPRESS, help=help, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="featbind", description="Feature-binding segmentation pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def cmd(name, help):
        p = sub.add_parser(name, help=help, description=help)
        if name != "train":
            _add(p, "--config", dest="config_file", help="JSON file of settings (flags override it)")
        return p

    p = cmd("toygen", "generate the synthetic shapes dataset")
    _add(p, "--n", dest="n", type=int, help="number of images [200]")
    _add(p, "--size", dest="size", type=int, help="image side in pixels [64]")
    _add(p, "--classes", dest="classes", type=int, help="foreground shape classes [4]")
    _add(p, "--occlusion-rate", dest="occlusion_rate", type=float, help="forced-overlap probability [0.5]")
    _add(p, "--max-instances", dest="max_instances", type=int, help="instances per image, at most [3]")
    _add(p, "--color-jitter", dest="color_jitter", type=float, help="per-instance colour jitter [0.08]")
    _add(p, "--prefix", dest="prefix", help="sample id prefix [toy]")
    _add(p, "--seed", dest="seed", type=int, help="random seed [7]")
    _add(p, "--out", dest="out", help="output directory (required)")

    p = cmd("blend", "materialise a blended training set")
    _add(p, "--manifest", dest="manifest", help="source manifest.jsonl (required)")
    _add(p, "--catalog", dest="catalog", help="catalog.json [beside the manifest, else VOC]")
    _add(p, "--strategy", dest="strategy", choices=["cfb", "rfb", "cafb", "wrfb", "mfb", "mixup", "cutmix"],
         help="pairing strategy [cfb]")
    _add(p, "--delta-lo", dest="delta_lo", type=float, help="lower blend weight [0.7]")
    _add(p, "--delta-hi", dest="delta_hi", type=float, help="upper blend weight [1.0]")
    _add(p, "--fixed-delta", dest="fixed_delta", type=float, help="fixed blend weight (wrfb default 0.6)")
    _add(p, "--partners", dest="partners", type=int, help="partners per sample for rfb/wrfb [10]")
    _add(p, "--alpha", dest="alpha", type=float, help="Beta(alpha, alpha) for mixup [1.0]")
    _add(p, "--primary-cluster-only", dest="primary_cluster_only", action="store_true",
         help="put each image only in the cluster of its largest class")
    _add(p, "--float-npy", dest="float_npy", action="store_true", help="store blended images as float .npy")
    _add(p, "--seed", dest="seed", type=int, help="random seed [0]")
    _add(p, "--out", dest="out", help="output directory (required)")

    p = cmd("cooc", "class co-occurrence counts of a manifest")
    _add(p, "--manifest", dest="manifest", help="manifest.jsonl (required)")
    _add(p, "--catalog", dest="catalog", help="catalog.json [beside the manifest, else VOC]")
    _add(p, "--out", dest="out", help="output JSON path (required)")

    p = cmd("train", "run training stage 1 or 2")
    _add(p, "--stage", dest="stage", type=int, choices=[1, 2], help="training stage [1]")
    _add(p, "--manifest", dest="manifest", help="training manifest.jsonl (required)")
    _add(p, "--catalog", dest="catalog", help="catalog.json [beside the manifest, else VOC]")
    _add(p, "--config", dest="config", help="TrainConfig JSON (exactly the TrainConfig keys)")
    _add(p, "--net-config", dest="net_config", help="NetworkConfig JSON for a fresh model")
    _add(p, "--resume", dest="resume", help="checkpoint to start from (required for stage 2)")
    _add(p, "--out", dest="out", help="output directory (required)")
    _add(p, "--lr", dest="base_lr", type=float, help="override base learning rate")
    _add(p, "--epochs", dest="epochs", type=int, help="override epochs")
    _add(p, "--batch-size", dest="batch_size", type=int, help="override batch size")
    _add(p, "--crop-size", dest="crop_size", type=int, help="override crop size")
    _add(p, "--seed", dest="seed", type=int, help="override seed")
    _add(p, "--workers", dest="workers", type=int, help="loader threads; 0 is bit-reproducible")

    p = cmd("eval", "evaluate a checkpoint on a (subset of a) manifest")
    _add(p, "--ckpt", dest="ckpt", help="checkpoint (required)")
    _add(p, "--manifest", dest="manifest", help="evaluation manifest.jsonl (required)")
    _add(p, "--catalog", dest="catalog", help="catalog.json [beside the manifest, else VOC]")
    _add(p, "--subset", dest="subset",
         help="all|occ1|occall|nobj=K|nuniq=K|cooc<T|excl=CLS|with=CLS [all]")
    _add(p, "--cooc", dest="cooc", help="training co-occurrence JSON (needed for cooc<T)")
    _add(p, "--any-pair", dest="any_pair", action="store_true",
         help="cooc<T keeps images with any pair below T instead of all pairs")
    _add(p, "--anchor", dest="anchor", help="anchor class for with=CLS [person]")
    _add(p, "--perturbation", dest="perturbation", help="perturbation .npy or offset-encoded .png")
    _add(p, "--max-norm", dest="max_norm", type=float, help="reject perturbations above this L-inf norm")
    _add(p, "--head", dest="head", choices=["auto", "t", "p", "fb"],
         help="prediction head; auto = fb for stage-1, t for stage-2 checkpoints [auto]")
    _add(p, "--target", dest="target", choices=["mask", "second_mask"], help="ground-truth mask [mask]")
    _add(p, "--method", dest="method", help="method label stored in the report")
    _add(p, "--attack", dest="attack", help="attack label stored in the report [clean or file stem]")
    _add(p, "--per-image", dest="per_image", action="store_true", help="include per-image mIoU")
    _add(p, "--csv", dest="csv", help="also write per-class IoU CSV here")
    _add(p, "--out", dest="out", help="report JSON path (required)")

    p = cmd("report", "merge report.json files into CSV tables and a plot")
    _add(p, "--reports", dest="reports", nargs="+", help="report JSON files (required)")
    _add(p, "--out", dest="out", help="output directory (required)")

    p = sub.add_parser("replay", help="re-run a command from its run.json")
    p.add_argument("run_json", help="run.json written by an earlier command")
    p.add_argument("--out", dest="out", default=None, help="redirect the output location")
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "config_file")}
    cfg = dict(DEFAULTS[command])
    file = getattr(ns, "config_file", None)
    if file:
        loaded = json.loads(Path(file).read_text())
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ValidationError(f"{file}: unknown settings {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    return cfg


def _require(command: str, cfg: dict) -> None:
    for key in REQUIRED[command]:
        if cfg.get(key) in (None, ""):
            raise UsageError(f"{command}: --{key.replace('_', '-')} is required")


def _catalog(cfg: dict):
    from .data import ClassCatalog, default_catalog_for

    return ClassCatalog.load(cfg["catalog"]) if cfg.get("catalog") else default_catalog_for(cfg["manifest"])


def run_record_path(command: str, out: str | Path) -> Path:
    """``run.json`` inside output directories; ``<stem>.run.json`` beside single-file outputs."""
    out = Path(out)
    if command in ("cooc", "eval"):
        return out.with_name(out.stem + ".run.json")
    return out / "run.json"


def _write_run(where: Path, command: str, cfg: dict) -> None:
    where.parent.mkdir(parents=True, exist_ok=True)
    where.write_text(json.dumps(
        {"command": command, "version": __version__, "config": cfg}, indent=2, sort_keys=True) + "\n")


def run_command(command: str, cfg: dict) -> dict:
    _require(command, cfg)
    out = Path(cfg["out"])
    record = run_record_path(command, out)
    return {"toygen": _toygen, "blend": _blend, "cooc": _cooc, "train": _train,
            "eval": _eval, "report": _report}[command](cfg, out, record)


def _toygen(cfg, out, record):
    from .toy import ToyConfig, generate_toy_dataset

    tc = ToyConfig(n_images=cfg["n"], image_size=cfg["size"], n_classes=cfg["classes"],
                   occlusion_rate=cfg["occlusion_rate"], max_instances_per_image=cfg["max_instances"],
                   seed=cfg["seed"], color_jitter=cfg["color_jitter"], id_prefix=cfg["prefix"])
    manifest = generate_toy_dataset(tc, out)
    _write_run(record, "toygen", cfg)
    return {"entries": len(manifest), "manifest": str(out / "manifest.jsonl")}


def _blend(cfg, out, record):
    from .blending import BlendStrategy, generate_blended_dataset
    from .data import read_manifest

    strategy = BlendStrategy(cfg["strategy"], cfg["delta_lo"], cfg["delta_hi"], cfg["fixed_delta"],
                             cfg["partners"], cfg["alpha"], cfg["primary_cluster_only"])
    catalog = _catalog(cfg)
    manifest = generate_blended_dataset(read_manifest(cfg["manifest"]), strategy, cfg["seed"],
                                        out, catalog, float_npy=cfg["float_npy"])
    _write_run(record, "blend", cfg)
    return {"entries": len(manifest), "manifest": str(out / "manifest.jsonl")}


def _cooc(cfg, out, record):
    from .data import compute_cooccurrence, read_manifest

    cooc = compute_cooccurrence(read_manifest(cfg["manifest"]), _catalog(cfg))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(cooc.to_dict()) + "\n")
    _write_run(record, "cooc", cfg)
    return {"out": str(out)}


def _train(cfg, out, record):
    from .data import read_manifest
    from .network import NetworkConfig
    from .training import TrainConfig, train_stage

    overrides = {k: cfg[k] for k in ("base_lr", "epochs", "batch_size", "crop_size", "seed", "workers")}
    overrides["stage"] = cfg["stage"]
    if cfg.get("config"):
        tc = TrainConfig.from_json(cfg["config"], **overrides)
    else:
        tc = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    if tc.stage == 2 and not cfg.get("resume"):
        raise ConfigurationError("stage 2 requires a stage-1 checkpoint: pass --resume CKPT")
    catalog = _catalog(cfg)
    net = None
    if cfg.get("net_config"):
        net = NetworkConfig(**json.loads(Path(cfg["net_config"]).read_text()))
        if net.num_classes != catalog.num_classes:
            raise ConfigurationError("net config num_classes disagrees with the catalog")
    else:
        net = NetworkConfig(num_classes=catalog.num_classes)
    _write_run(record, "train", {**cfg, "resolved_train_config": tc.to_dict()})
    result = train_stage(tc, read_manifest(cfg["manifest"]), catalog, out,
                         init_checkpoint=cfg.get("resume"), net_config=net)
    return {"checkpoint": str(result.checkpoint), "epochs": len(result.history)}


def _eval(cfg, out, record):
    from .data import CoOccurrenceMatrix, read_manifest
    from .evaluation import evaluate, filter_subset, head_for_stage, load_perturbation, parse_subset
    from .network import load_checkpoint

    catalog = _catalog(cfg)
    spec = parse_subset(cfg["subset"], catalog, cfg.get("anchor"), cfg["any_pair"])
    cooc = None
    if cfg.get("cooc"):
        cooc = CoOccurrenceMatrix.from_dict(json.loads(Path(cfg["cooc"]).read_text()))
    manifest = filter_subset(read_manifest(cfg["manifest"]), spec, catalog, cooc)
    model, info = load_checkpoint(cfg["ckpt"])
    head = head_for_stage(info["stage"]) if cfg["head"] == "auto" else cfg["head"]
    pert = load_perturbation(cfg["perturbation"]) if cfg.get("perturbation") else None
    attack = cfg.get("attack") or (Path(cfg["perturbation"]).stem if pert is not None else "clean")
    meta = {"checkpoint": str(cfg["ckpt"]), "stage": info["stage"], "head": head,
            "method": cfg.get("method") or "", "attack": attack, "subset_spec": spec.to_dict()}
    report = evaluate(model, manifest, catalog, subset=spec.label(), head=head, target=cfg["target"],
                      perturbation=pert, max_norm=cfg.get("max_norm"), per_image=cfg["per_image"],
                      meta=meta)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    if cfg.get("csv"):
        import csv

        with open(cfg["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "iou"])
            for name, v in zip(catalog.names, report.per_class_iou):
                w.writerow([name, "" if v is None else f"{v:.6f}"])
    _write_run(record, "eval", cfg)
    return {"miou": report.miou, "images": report.image_count}


def _report(cfg, out, record):
    from .evaluation import EvalReport
    from .reporting import build_report

    reports = [EvalReport.load(p) for p in cfg["reports"]]
    paths = build_report(reports, out)
    _write_run(record, "report", cfg)
    return {k: str(v) for k, v in paths.items()}


def replay(run_json: str, out: str | None = None) -> dict:
    rec = json.loads(Path(run_json).read_text())
    cfg = dict(rec["config"])
    cfg.pop("resolved_train_config", None)
    if out is not None:
        cfg["out"] = out
    return run_command(rec["command"], cfg)


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        if ns.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("no command given")
        if ns.command == "replay":
            result = replay(ns.run_json, ns.out)
        else:
            result = run_command(ns.command, resolve(ns.command, ns))
        print(json.dumps(result, default=_jsonable))
        return 0
    except UsageError as exc:
        print(f"ERROR usage: {exc}", file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"ERROR config: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"ERROR validation: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ERROR io: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line report for any runtime failure
        print(f"ERROR runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return str(x)


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
