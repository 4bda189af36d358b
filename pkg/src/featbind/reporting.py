"""Merge evaluation reports into tables and plots."""

from __future__ import annotations

import csv
import re
from pathlib import Path

from .errors import ValidationError
from .evaluation import EvalReport

_COOC = re.compile(r"^cooc<(\d+)")


def check_compatible(reports: list[EvalReport]) -> list[str]:
    if not reports:
        raise ValidationError("no reports given")
    names = reports[0].class_names
    for r in reports[1:]:
        if r.class_names != names:
            raise ValidationError(
                f"class set mismatch: {r.subset!r} has {r.class_names}, expected {names}")
    return names


def column_label(r: EvalReport) -> str:
    """Attack name when the report carries one, otherwise the subset."""
    attack = r.meta.get("attack")
    return attack if attack else r.subset


def write_summary_csv(reports: list[EvalReport], path: str | Path) -> Path:
    names = check_compatible(reports)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "subset", "attack", "images", *names, "mIoU"])
        for r in reports:
            ious = ["" if v is None else f"{v:.6f}" for v in r.per_class_iou]
            w.writerow([r.meta.get("method", ""), r.subset, r.meta.get("attack", ""),
                        r.image_count, *ious, f"{r.miou:.6f}"])
    return path


def pivot(reports: list[EvalReport]) -> tuple[list[str], list[str], dict[tuple[str, str], float]]:
    """Methods x columns grid of mIoU (rows and columns in first-seen order)."""
    rows, cols, cells = [], [], {}
    for r in reports:
        m, c = r.meta.get("method", "") or "model", column_label(r)
        if m not in rows:
            rows.append(m)
        if c not in cols:
            cols.append(c)
        cells[m, c] = r.miou
    if "clean" in cols:
        cols.remove("clean")
        cols.insert(0, "clean")
    return rows, cols, cells


def write_pivot_csv(reports: list[EvalReport], path: str | Path) -> Path:
    rows, cols, cells = pivot(reports)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *cols])
        for m in rows:
            w.writerow([m, *("" if (m, c) not in cells else f"{100 * cells[m, c]:.1f}" for c in cols)])
    return path


def cooc_curve(reports: list[EvalReport]) -> dict[str, list[tuple[int, float]]]:
    """Per-method (threshold, mIoU) points, thresholds descending."""
    curves: dict[str, list[tuple[int, float]]] = {}
    for r in reports:
        m = _COOC.match(r.subset)
        if m:
            curves.setdefault(r.meta.get("method", "") or "model", []).append((int(m.group(1)), r.miou))
    return {k: sorted(v, key=lambda p: -p[0]) for k, v in curves.items()}


def plot_reports(reports: list[EvalReport], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    curves = cooc_curve(reports)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if curves:
        for method, pts in curves.items():
            xs = [str(t) for t, _ in pts]
            ax.plot(xs, [100 * v for _, v in pts], marker="o", label=method)
        ax.set_xlabel("Co-occurrence threshold")
        ax.set_ylabel("mIoU (%)")
        ax.legend()
    else:
        rows, cols, cells = pivot(reports)
        width = 0.8 / max(len(rows), 1)
        for i, m in enumerate(rows):
            xs = [j + i * width for j in range(len(cols))]
            ax.bar(xs, [100 * cells.get((m, c), 0.0) for c in cols], width, label=m)
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(cols))], cols, rotation=30)
        ax.set_ylabel("mIoU (%)")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def build_report(reports: list[EvalReport], out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    check_compatible(reports)
    paths = {
        "summary": write_summary_csv(reports, out / "summary.csv"),
        "pivot": write_pivot_csv(reports, out / "pivot.csv"),
    }
    name = "cooc_curve.png" if cooc_curve(reports) else "miou_bars.png"
    paths["plot"] = plot_reports(reports, out / name)
    return paths
