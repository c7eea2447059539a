"""Report rendering: delimited tables and matplotlib figures.

Every CLI report path writes machine-readable CSV next to the JSON and
renders the matching figure(s) to PNG files in the same directory.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


def eval_report_rows(report: dict) -> list[dict]:
    rows = []
    for k in sorted(report.get("per_k", {}), key=int):
        entry = report["per_k"][k]
        rows.append({"sources": int(k), "emr": entry["emr"],
                     "cosim": entry["cosim"], "n": entry["n"]})
    rows.append({"sources": "overall", "emr": report["overall"]["emr"],
                 "cosim": report["overall"]["cosim"], "n": report["n_samples"]})
    return rows


def render_eval_figure(report: dict, path: str | Path) -> Path:
    """EMR and CoSim against the number of composited sources."""
    per_k = report.get("per_k", {})
    ks = sorted(int(k) for k in per_k)
    emr = [per_k[str(k)]["emr"] for k in ks]
    cosim = [per_k[str(k)]["cosim"] for k in ks]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, values, label in zip(axes, (emr, cosim), ("EMR", "CoSim")):
        ax.plot(ks, values, marker="o")
        ax.set_xlabel("composited sources")
        ax.set_ylabel(label)
        ax.set_xticks(ks)
        ax.set_ylim(0.0, 1.05)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_sweep_figure(rows: list[dict], path: str | Path) -> Path:
    """EMR/CoSim across the attention-weight grid (log x)."""
    lams = [r["lambda_attn"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(lams, [r["emr"] for r in rows], marker="o", label="EMR")
    ax.plot(lams, [r["cosim"] for r in rows], marker="s", label="CoSim")
    positive = [l for l in lams if l > 0]
    if positive and min(positive) < max(positive):
        ax.set_xscale("log")
    ax.set_xlabel("attention loss weight")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_training_curve(history_rows: list[dict], path: str | Path) -> Path:
    steps = [r["step"] for r in history_rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, [r["l_total"] for r in history_rows], label="total")
    ax.plot(steps, [r["l_ldm"] for r in history_rows], label="reconstruction",
            alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
