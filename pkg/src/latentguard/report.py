"""Figures and the summary table rendered by the ``report`` command."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import metrics  # noqa: E402
from .nets import load_tensors  # noqa: E402

SUMMARY_COLUMNS = ("condition", "defense", "cs_src", "cs_att", "cs_ratio", "psnr", "ssim", "frechet")


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_similarity(rows: list[dict], path: Path) -> Path:
    labels = [f"{r['condition']}\n{r['defense']}" for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 0.7 * len(rows)), 3.5))
    ax.bar(x - 0.2, [r["cs_src"] for r in rows], 0.4, label="CS_SRC")
    ax.bar(x + 0.2, [r["cs_att"] for r in rows], 0.4, label="CS_ATT")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("median identity cosine")
    ax.axhline(0, color="k", lw=0.5)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_training(reports: Path, path: Path) -> Path | None:
    files = sorted(reports.glob("train_*.csv"))
    if not files:
        return None
    fig, axes = plt.subplots(1, len(files), figsize=(3 * len(files), 2.8), squeeze=False)
    for ax, f in zip(axes[0], files):
        rows = _read_csv(f)
        epochs = np.array([int(r["epoch"]) for r in rows])
        loss = np.array([float(r["loss"]) for r in rows])
        if epochs.size:
            uniq = np.unique(epochs)
            ax.plot(uniq, [loss[epochs == e].mean() for e in uniq])
        ax.set_yscale("log")
        ax.set_title(f.stem, fontsize=9)
        ax.set_xlabel("epoch")
    return _save(fig, path)


def plot_attack_traces(trace_dir: Path, path: Path) -> Path | None:
    files = sorted(trace_dir.glob("*.csv"))
    if not files:
        return None
    series = {"L_id": [], "L_dev": [], "lambda": []}
    for f in files:
        rows = _read_csv(f)
        for k in series:
            series[k].append([float(r[k]) for r in rows])
    fig, axes = plt.subplots(1, 3, figsize=(10, 2.8))
    for ax, (k, vals) in zip(axes, series.items()):
        arr = np.array(vals)
        if arr.size == 0:
            continue
        ax.plot(arr.T, color="0.8", lw=0.5)
        ax.plot(np.median(arr, axis=0), color="C0", lw=1.5)
        ax.set_title(k, fontsize=9)
        ax.set_xlabel("iteration")
    return _save(fig, path)


def plot_examples(root: Path, path: Path, n: int = 4) -> Path | None:
    prot_dir, swap_dir = root / "protected" / "images", root / "swapped" / "images"
    if not (prot_dir / "manifest.json").exists() or not (swap_dir / "manifest.json").exists():
        return None
    prot, pmeta = load_tensors(prot_dir)
    swaps, smeta = load_tensors(swap_dir)
    pos = {s: k for k, s in enumerate(pmeta["sources"])}
    pairs = [tuple(p) for p in smeta["pairs"]]
    step = max(1, len(pairs) // n)
    picks = list(range(0, len(pairs), step))[:n]
    cols = [("source", lambda k: prot["clean"][pos[pairs[k][0]]]),
            ("x_adv", lambda k: prot["x_adv"][pos[pairs[k][0]]]),
            ("x_adv_diff", lambda k: prot["x_adv_diff"][pos[pairs[k][0]]]),
            ("swap clean", lambda k: swaps["clean|none"][k]),
            ("swap x_adv", lambda k: swaps["x_adv|none"][k]),
            ("swap x_adv_diff", lambda k: swaps["x_adv_diff|none"][k])]
    fig, axes = plt.subplots(len(picks), len(cols), figsize=(1.4 * len(cols), 1.5 * len(picks)), squeeze=False)
    for i, k in enumerate(picks):
        for j, (name, get) in enumerate(cols):
            ax = axes[i, j]
            ax.imshow(get(k), cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(name, fontsize=7)
    return _save(fig, path)


def summarize(rows: list[dict]) -> list[dict]:
    out = []
    for r in rows:
        ratio = r["cs_att"] / r["cs_src"] if r["cs_src"] != 0 else float("nan")
        out.append({"condition": r["condition"], "defense": r["defense"], "cs_src": r["cs_src"],
                    "cs_att": r["cs_att"], "cs_ratio": float(ratio), "psnr": r["psnr"], "ssim": r["ssim"],
                    "frechet": r["frechet"]})
    return out


def render_all(layout, cfg) -> Path:
    reports = layout.reports
    rows = metrics.read_report(reports / "metrics.csv")
    summary = metrics.write_rows(reports / "summary.csv", summarize(rows), SUMMARY_COLUMNS)
    if not cfg["report.figures"]:
        return summary
    figs = reports / "figures"
    plot_similarity(rows, figs / "identity_similarity.png")
    plot_training(reports, figs / "training_loss.png")
    plot_attack_traces(layout.protected / "traces", figs / "attack_traces.png")
    plot_examples(layout.root, figs / "examples.png")
    if (reports / "transfer.csv").exists():
        trows = metrics.read_report(reports / "transfer.csv")
        for r in trows:
            r["defense"] = r.pop("surrogate")
        plot_similarity(trows, figs / "transfer_similarity.png")
    return summary
