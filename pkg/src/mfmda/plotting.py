"""Static figures for the run report; rendered off-screen with the Agg backend."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# PNG metadata without a version string keeps regenerated files byte-stable
_META = {"Software": None}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_loss_curves(logs, path, title, keys=None):
    """``logs`` maps a label to rows read back from a loss-log CSV."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, rows in logs.items():
        if not rows:
            continue
        cols = keys or [k for k in rows[0] if k not in ("step", "epoch", "gate")]
        x = range(len(rows))
        for k in cols:
            y = [float(r[k]) for r in rows]
            if max(y) <= 0:
                continue  # disabled loss term
            ax.plot(x, y, label=f"{label} {k}" if len(logs) > 1 else k, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_stage2_curves(reports, path, target):
    """Per-epoch Dice of every arm, one line per (arm, split)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    series = {}
    for r in reports:
        key = (r.details["arm"], r.details["split"])
        series.setdefault(key, []).append((int(r.details["epoch"]), r.value))
    for (arm, split), pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", markersize=3,
                linestyle="-" if split != "source" else "--", label=f"{arm} / {split}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("Dice")
    ax.set_title(f"stage 2 on {target}")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_sweep(axis, reports, path):
    """Line plot over k for the k-shot sweep, bars with std for the others."""
    summary = [r for r in reports if r.details.get("kind") == "summary"]
    targets = sorted({r.details["target"] for r in summary})
    if axis == "k_shot":
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        for t in targets:
            rows = sorted((r for r in summary if r.details["target"] == t), key=lambda r: int(r.details["cell"]))
            ks = [int(r.details["cell"]) for r in rows]
            for ax, key, label in ((axes[0], "fid_proxy", "Frechet proxy"), (axes[1], "dice", "target Dice")):
                ax.errorbar(ks, [float(r.details[f"{key}_mean"]) for r in rows],
                            yerr=[float(r.details[f"{key}_std"]) for r in rows],
                            marker="o", capsize=3, label=t)
                ax.set_xlabel("k (few-shot images)")
                ax.set_ylabel(label)
        axes[0].legend(fontsize=7)
    else:
        fig, ax = plt.subplots(figsize=(7, 3.5))
        cells = []
        for r in summary:
            if r.details["cell"] not in cells:
                cells.append(r.details["cell"])
        width = 0.8 / max(1, len(targets))
        for i, t in enumerate(targets):
            by_cell = {r.details["cell"]: r for r in summary if r.details["target"] == t}
            xs = [j + i * width for j in range(len(cells))]
            ax.bar(xs, [float(by_cell[c].details["dice_mean"]) for c in cells], width,
                   yerr=[float(by_cell[c].details["dice_std"]) for c in cells], capsize=3, label=t)
        ax.set_xticks([j + width * (len(targets) - 1) / 2 for j in range(len(cells))])
        ax.set_xticklabels(cells, rotation=20, fontsize=8)
        ax.set_ylabel("target Dice")
        lo = min(float(r.details["dice_mean"]) for r in summary)
        ax.set_ylim(max(0.0, lo - 0.1), 1.0)
        ax.legend(fontsize=7)
    fig.suptitle(f"sweep over {axis} (mean and std over seeds)")
    return _save(fig, path)
