"""Consolidated run report built only from the CSVs under metrics/.

The markdown output depends on nothing but those files except for the
single ``Generated:`` line, so regenerating from unchanged CSVs gives the
same document apart from that timestamp.
"""

import csv
import glob
import os
from datetime import datetime, timezone

from .errors import MissingInput
from .metrics import PROXY_DISCLAIMER, read_reports
from .pipeline import ARMS, RunLayout, read_log
from .plotting import plot_loss_curves, plot_stage2_curves, plot_sweep

SUMMARY_COLUMNS = ["experiment", "target", "label", "metric", "value"]


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def _table(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return lines


def final_epoch_rows(reports):
    last = max(int(r.details["epoch"]) for r in reports)
    return [r for r in reports if int(r.details["epoch"]) == last]


def dice_deltas(stage2):
    """Per target: final target-split Dice of each untagged arm plus deltas.

    ``stage2`` maps CSV stem to its reports. Returns {target: {arm: dice}}.
    """
    out = {}
    for stem, reports in stage2.items():
        for arm in ARMS:
            suffix = f"_{arm}"
            if not stem.endswith(suffix):
                continue
            target = stem[len("stage2_"):-len(suffix)]
            rows = [r for r in final_epoch_rows(reports) if r.details["split"] == target]
            if rows:
                out.setdefault(target, {})[arm] = rows[0].value
    return out


def build_report(root):
    layout = RunLayout(root)
    csvs = sorted(glob.glob(os.path.join(layout.metrics, "*.csv")))
    if not csvs:
        raise MissingInput(f"no metric CSVs under {layout.metrics}; nothing to report")
    os.makedirs(layout.report, exist_ok=True)
    data = {_stem(p): read_reports(p) for p in csvs}
    stage1 = {k: v for k, v in data.items() if k.startswith("stage1_")}
    stage2 = {k: v for k, v in data.items() if k.startswith("stage2_")}
    sweeps = {k: v for k, v in data.items() if k.startswith("sweep_")}
    other = {k: v for k, v in data.items() if k not in stage1 and k not in stage2 and k not in sweeps}
    summary = []
    figures = []

    lines = ["# MFM-DA run report", "",
             f"Generated: {datetime.now(timezone.utc).isoformat(timespec='seconds')}", "",
             f"> {PROXY_DISCLAIMER}", ""]

    for stem, reports in stage1.items():
        lines += [f"## Stage 1: {stem[len('stage1_'):]}", ""]
        rows = [[r.name, f"{r.value:.4f}", r.n_samples, r.seed] for r in reports]
        lines += _table(["metric", "value", "n", "seed"], rows) + [""]
        for r in reports:
            summary.append(["stage1", r.details.get("target", ""), stem, r.name, f"{r.value:.6f}"])

    if stage2:
        lines += ["## Stage 2: final-epoch scores", ""]
        rows = []
        for stem, reports in stage2.items():
            for r in final_epoch_rows(reports):
                d = r.details
                rows.append([stem, d["arm"], d["levels"], d["split"], f"{r.value:.4f}",
                             f"{float(d['jaccard']):.4f}", f"{float(d['dice_cup']):.4f}",
                             f"{float(d['dice_disc']):.4f}"])
                summary.append(["stage2", d["target"], f"{stem}/{d['split']}", "dice", f"{r.value:.6f}"])
        lines += _table(["run", "arm", "levels", "split", "Dice", "JI", "Dice cup", "Dice disc"], rows) + [""]

        deltas = dice_deltas(stage2)
        if deltas:
            lines += ["## Baseline vs ours (target-domain Dice, points)", ""]
            rows = []
            for target, arms in sorted(deltas.items()):
                def pts(a):
                    return f"{100 * arms[a]:.2f}" if a in arms else "-"

                def delta(a):
                    if "ours" in arms and a in arms:
                        return f"{100 * (arms['ours'] - arms[a]):+.2f}"
                    return "-"
                rows.append([target, pts("source-only"), pts("lora-only"), pts("ours"),
                             delta("source-only"), delta("lora-only")])
                for a in ("source-only", "lora-only"):
                    if "ours" in arms and a in arms:
                        summary.append(["delta", target, f"ours-vs-{a}", "dice_points",
                                        f"{100 * (arms['ours'] - arms[a]):.6f}"])
            lines += _table(["target", "source-only", "LoRA-only", "ours", "ours - source-only",
                             "ours - LoRA-only"], rows) + [""]

        by_target = {}
        for stem, reports in stage2.items():
            by_target.setdefault(reports[0].details["target"], []).extend(
                r for r in reports if stem == f"stage2_{r.details['target']}_{r.details['arm']}")
        for target, reports in sorted(by_target.items()):
            if reports:
                figures.append(plot_stage2_curves(reports, os.path.join(layout.report, f"stage2_{target}.png"),
                                                  target))

    for stem, reports in sweeps.items():
        axis = stem[len("sweep_"):]
        primary = reports[0].name.split(":", 1)[1]
        lines += [f"## Sweep over {axis}", ""]
        summ = [r for r in reports if r.details.get("kind") == "summary"]
        keys = sorted({k[:-5] for r in summ for k in r.details if k.endswith("_mean")})
        rows = []
        for r in summ:
            d = r.details
            rows.append([d["target"], d["cell"], r.n_samples] +
                        [f"{float(d[k + '_mean']):.4f} ± {float(d[k + '_std']):.4f}" for k in keys])
            for k in keys:
                summary.append([f"sweep_{axis}", d["target"], d["cell"], f"{k}_mean", d[k + "_mean"]])
                summary.append([f"sweep_{axis}", d["target"], d["cell"], f"{k}_std", d[k + "_std"]])
        lines += [f"Primary metric: {primary}. Mean ± sample std over seeds.", ""]
        lines += _table(["target", "cell", "seeds"] + keys, rows) + [""]
        figures.append(plot_sweep(axis, reports, os.path.join(layout.report, f"sweep_{axis}.png")))

    for stem, reports in other.items():
        lines += [f"## {stem}", ""]
        lines += _table(["metric", "value", "n", "seed"],
                        [[r.name, f"{r.value:.4f}", r.n_samples, r.seed] for r in reports]) + [""]

    for log in sorted(glob.glob(os.path.join(layout.metrics, "logs", "*.csv"))):
        stem = _stem(log)
        rows = read_log(log)
        if not rows or stem.startswith("stage2_"):
            continue
        keys = ["loss"] if "loss" in rows[0] else [k for k in ("total", "diff", "dc", "style") if k in rows[0]]
        figures.append(plot_loss_curves({stem: rows}, os.path.join(layout.report, f"{stem}.png"), stem, keys))

    if figures:
        lines += ["## Figures", ""]
        lines += [f"![{_stem(f)}]({os.path.basename(f)})" for f in figures] + [""]

    path = os.path.join(layout.report, "report.md")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
    with open(os.path.join(layout.report, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(summary)
    return path
