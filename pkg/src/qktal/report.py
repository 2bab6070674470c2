"""Report writers: delimited metric files plus rendered figures.

Evaluation produces a human-readable table, a machine-readable key/value
TSV, and a mAP-versus-tIoU figure; training produces a per-epoch loss TSV
and a loss-curve figure.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import EvalReport  # noqa: E402

LOSS_TERMS = ("video_cls", "query_sim", "mutual", "guide", "coactivity",
              "sparsity", "total")


def format_report_table(report: EvalReport, class_names: list[str]) -> str:
    header = ["class"] + [f"AP@{t:g}" for t in report.thresholds]
    rows = [header]
    for c in report.class_ids:
        rows.append([class_names[c]] + [f"{report.ap[c][t]:.4f}" for t in report.thresholds])
    rows.append(["mAP"] + [f"{report.map_at[t]:.4f}" for t in report.thresholds])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    for name, value in report.bands.items():
        lines.append(f"avg mAP {name}: {value:.4f}")
    return "\n".join(lines) + "\n"


def write_eval_report(report: EvalReport, class_names: list[str], out_dir: str,
                      figures: bool = True) -> dict[str, str]:
    """Write report.txt, report.tsv, and (optionally) map_by_tiou.png into
    out_dir; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    txt = os.path.join(out_dir, "report.txt")
    with open(txt, "w", encoding="utf-8") as fh:
        fh.write(format_report_table(report, class_names))
    paths["table"] = txt
    tsv = os.path.join(out_dir, "report.tsv")
    with open(tsv, "w", encoding="utf-8") as fh:
        for key, value in report.to_pairs(class_names):
            fh.write(f"{key}\t{value:.6f}\n")
    paths["keyvalues"] = tsv
    if figures:
        fig_path = os.path.join(out_dir, "map_by_tiou.png")
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(report.thresholds, [report.map_at[t] for t in report.thresholds],
                marker="o")
        ax.set_xlabel("tIoU threshold")
        ax.set_ylabel("mAP")
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        paths["figure"] = fig_path
    return paths


def write_train_log(log: list[dict], out_dir: str,
                    figures: bool = True) -> dict[str, str]:
    """Write train_log.tsv and (optionally) loss_curve.png into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    tsv = os.path.join(out_dir, "train_log.tsv")
    terms = [t for t in LOSS_TERMS if log and t in log[0]]
    with open(tsv, "w", encoding="utf-8") as fh:
        fh.write("epoch\t" + "\t".join(terms) + "\n")
        for entry in log:
            fh.write(str(entry["epoch"]) + "\t"
                     + "\t".join(f"{entry[t]:.6f}" for t in terms) + "\n")
    paths["log"] = tsv
    if figures and log:
        fig_path = os.path.join(out_dir, "loss_curve.png")
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        epochs = [entry["epoch"] for entry in log]
        for term in terms:
            ax.plot(epochs, [entry[term] for entry in log], label=term,
                    linewidth=2 if term == "total" else 1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7, ncol=2)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        paths["figure"] = fig_path
    return paths
