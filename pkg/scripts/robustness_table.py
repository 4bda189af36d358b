"""Methods x attacks grid for the two models of a finished desk run.

Each attack is a random-sign perturbation of the given L-inf size (in 1/255
units), saved as .npy next to the reports so the grid can be re-derived
with ``featbind eval --perturbation``.

    python3 scripts/robustness_table.py --work runs/desk --eps 2 4 8 16
"""

import argparse
from pathlib import Path

import numpy as np

from featbind.data import ClassCatalog, read_image, read_manifest
from featbind.evaluation import evaluate, random_sign_perturbation
from featbind.network import load_checkpoint
from featbind.reporting import build_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/desk", help="directory written by desk_experiment.py")
    ap.add_argument("--eps", type=int, nargs="+", default=[2, 4, 8, 16], help="attack sizes x/255")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.work)
    val = read_manifest(work / "val" / "manifest.jsonl")
    catalog = ClassCatalog.load(work / "val" / "catalog.json")
    hw = read_image(val.resolve(val.entries[0].image_path)).shape[:2]
    out = work / "robustness"
    out.mkdir(parents=True, exist_ok=True)

    attacks = {"clean": None}
    for e in args.eps:
        pert = random_sign_perturbation(hw, e / 255, args.seed)
        np.save(out / f"rand{e}.npy", pert)
        attacks[f"rand{e}"] = pert

    reports = []
    for method in ("baseline", "binding"):
        model, _ = load_checkpoint(work / method / "stage2" / "checkpoint.pt")
        for name, pert in attacks.items():
            r = evaluate(model, val, catalog, subset="val", perturbation=pert,
                         meta={"method": method, "attack": name})
            r.save(out / f"{method}_{name}.json")
            reports.append(r)

    paths = build_report(reports, out)
    print(paths["pivot"].read_text())


if __name__ == "__main__":
    main()
