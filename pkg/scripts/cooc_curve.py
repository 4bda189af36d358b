"""mIoU against a co-occurrence threshold for the models of a finished desk run.

Counts come from the training split; each threshold keeps validation images
whose every class pair co-occurred fewer times than the threshold.

    python3 scripts/cooc_curve.py --work runs/desk --thresholds 50 40 30 20 10
"""

import argparse
from pathlib import Path

from featbind.data import ClassCatalog, compute_cooccurrence, read_manifest
from featbind.evaluation import SubsetKind, SubsetSpec, evaluate, filter_subset
from featbind.network import load_checkpoint
from featbind.reporting import build_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/desk")
    ap.add_argument("--thresholds", type=int, nargs="+", default=[50, 40, 30, 20, 10])
    ap.add_argument("--any-pair", action="store_true", help="keep images with any rare pair")
    args = ap.parse_args()

    work = Path(args.work)
    catalog = ClassCatalog.load(work / "train" / "catalog.json")
    cooc = compute_cooccurrence(read_manifest(work / "train" / "manifest.jsonl"), catalog)
    val = read_manifest(work / "val" / "manifest.jsonl")
    out = work / "cooc"
    out.mkdir(parents=True, exist_ok=True)

    reports = []
    for method in ("baseline", "binding"):
        model, _ = load_checkpoint(work / method / "stage2" / "checkpoint.pt")
        for t in args.thresholds:
            spec = SubsetSpec(SubsetKind.COOC_THRESHOLD, threshold=t, any_pair=args.any_pair)
            sub = filter_subset(val, spec, catalog, cooc)
            r = evaluate(model, sub, catalog, subset=spec.label(), meta={"method": method})
            r.save(out / f"{method}_cooc{t}.json")
            reports.append(r)
            print(f"{method:9s} {spec.label():12s} images={r.image_count:3d} mIoU={r.miou:.4f}")

    build_report(reports, out)


if __name__ == "__main__":
    main()
