"""Tables and figures for finished experiments.

Everything here reads the long-format results CSV and the per-run summary
JSON written by :func:`transfield.io.write_results`; nothing retrains.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

MISSING = "—"
INIT_ORDER = ["random", "pretrain:t0", "pretrain:joint", "pretrain:path"]


def _init_key(init: str):
    return (INIT_ORDER.index(init) if init in INIT_ORDER else len(INIT_ORDER), init)


def group_runs(summary_runs: list[dict]) -> dict[tuple[str, str, str], list[dict]]:
    """Group summary entries by (model, init, dataset), rows in a stable order."""
    groups = defaultdict(list)
    for r in summary_runs:
        groups[(r["model"], r["init"], r["dataset"])].append(r)
    ordered = sorted(groups, key=lambda k: (k[2], k[0], _init_key(k[1])))
    return {k: sorted(groups[k], key=lambda r: r["seed"]) for k in ordered}


def _mean(values):
    vals = [v for v in values if v is not None and v != "inf"]
    return float(np.mean(vals)) if vals else None


def _cell(value, digits=1):
    if value is None:
        return MISSING
    if isinstance(value, float):
        return f"{value:.{digits}f}" if digits else f"{value:.0f}"
    return str(value)


def threshold_table(summary_runs: list[dict]) -> tuple[list[str], list[list[str]]]:
    """Rows model x init x dataset; mean iterations-to-threshold over seeds that crossed.

    A threshold no seed reached is shown as the missing marker; partial
    success is annotated with the number of seeds that crossed.
    """
    groups = group_runs(summary_runs)
    keys = []
    for runs in groups.values():
        for r in runs:
            keys.extend(k for k in r["crossings"] if k not in keys)
    keys.sort(key=lambda k: (k.split(":")[0], float(k.split(":")[1])))
    header = ["model", "init", "dataset", "seeds"] + keys + ["final psnr", "final grad rmse"]
    rows = []
    for (model, init, dataset), runs in groups.items():
        row = [model, init, dataset, str(len(runs))]
        for k in keys:
            hits = [r["crossings"].get(k) for r in runs]
            hits = [h for h in hits if h is not None]
            if not hits:
                row.append(MISSING)
            elif len(hits) < len(runs):
                row.append(f"{np.mean(hits):.0f} ({len(hits)}/{len(runs)})")
            else:
                row.append(f"{np.mean(hits):.0f}")
        row.append(_cell(_mean(r["final_psnr"] for r in runs), 2))
        row.append(_cell(_mean(r["final_grad_rmse"] for r in runs), 4))
        rows.append(row)
    return header, rows


def markdown_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def write_csv_table(header, rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def psnr_curves(result_rows: list[dict]) -> dict[tuple[str, str, str], tuple[np.ndarray, np.ndarray]]:
    """Seed-averaged PSNR against iteration per (model, init, dataset).

    Runs that stopped early hold their last value, so the mean is taken over
    every seed at every iteration any seed recorded.
    """
    per = defaultdict(lambda: defaultdict(dict))
    for r in result_rows:
        if r["psnr"] is None or math.isinf(r["psnr"]):
            continue
        per[(r["model"], r["init"], r["dataset"])][r["seed"]][r["iteration"]] = r["psnr"]
    curves = {}
    for key in sorted(per, key=lambda k: (k[2], k[0], _init_key(k[1]))):
        seeds = per[key]
        its = sorted({i for s in seeds.values() for i in s})
        mat = np.empty((len(seeds), len(its)))
        for a, trace in enumerate(seeds.values()):
            last = np.nan
            for b, it in enumerate(its):
                last = trace.get(it, last)
                mat[a, b] = last
        curves[key] = (np.array(its), np.nanmean(mat, axis=0))
    return curves


def write_curves_csv(curves, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "init", "dataset", "iteration", "mean_psnr"])
        for (model, init, dataset), (its, vals) in curves.items():
            for it, v in zip(its, vals):
                w.writerow([model, init, dataset, int(it), repr(float(v))])


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_psnr_curves(curves, path, thresholds=()):
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for (model, init, dataset), (its, vals) in curves.items():
        ax.plot(its, vals, label=f"{model} {init} {dataset}", lw=1.2)
    for thr in thresholds:
        ax.axhline(thr, color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("iteration")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_slices(images: dict[str, list[tuple[int, np.ndarray]]], path):
    """Grid of slice images: one row per run label, one column per iteration."""
    plt = _figure()
    labels = sorted(images)
    ncol = max(len(v) for v in images.values())
    fig, axes = plt.subplots(len(labels), ncol, figsize=(2 * ncol, 2 * len(labels)), dpi=100, squeeze=False)
    for a, label in enumerate(labels):
        for b in range(ncol):
            ax = axes[a, b]
            ax.axis("off")
            if b < len(images[label]):
                it, img = images[label][b]
                ax.imshow(img, cmap="gray", vmin=0, vmax=255)
                ax.set_title(f"{label}\niter {it}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def collect_slices(run_dir: Path) -> dict[str, list[tuple[int, np.ndarray]]]:
    from .io import read_pgm

    images = defaultdict(list)
    for p in sorted(Path(run_dir).rglob("slices/iter_*.pgm")):
        label = p.parent.parent.relative_to(run_dir).as_posix()
        images[label].append((int(p.stem.split("_")[1]), read_pgm(p)))
    return {k: sorted(v, key=lambda t: t[0]) for k, v in images.items()}
