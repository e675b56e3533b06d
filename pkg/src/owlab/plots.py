"""Figure rendering for experiment reports.

Everything draws from the serialized report dict (not live objects) so
`owlab report` can decorate a JSON file produced earlier, on a machine
without the original run state.
"""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def _runs_by_label(report):
    by_label = {}
    for run in report["runs"]:
        by_label.setdefault(run["label"], []).append(run)
    return by_label


def map_by_task_figure(report):
    """Combined mAP per task, one line per run label (seed mean)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, runs in sorted(_runs_by_label(report).items()):
        curves = np.array([[ev["map50_both"] for ev in r["result"]["evals"]]
                           for r in runs])
        tasks = np.arange(1, curves.shape[1] + 1)
        ax.plot(tasks, curves.mean(axis=0), marker="o", label=label)
    ax.set_xlabel("task")
    ax.set_ylabel("combined mAP@50")
    ax.set_xticks(np.arange(1, 1 + max(
        len(r["result"]["evals"]) for r in report["runs"])))
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def retention_figure(report):
    """Previously-known mAP per task (task >= 2), per label."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, runs in sorted(_runs_by_label(report).items()):
        curves = []
        for r in runs:
            vals = [ev["map50_previously_known"]
                    for ev in r["result"]["evals"][1:]]
            if any(v is None for v in vals):
                continue
            curves.append(vals)
        if not curves:
            continue
        curves = np.array(curves)
        tasks = np.arange(2, curves.shape[1] + 2)
        ax.plot(tasks, curves.mean(axis=0), marker="s", label=label)
    ax.set_xlabel("task")
    ax.set_ylabel("previously-known mAP@50")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def sensitivity_figure(report):
    """Combined mAP against retention weight, one line per interval."""
    cells = report["analysis"]["cells"]
    intervals = sorted({c["interval"] for c in cells})
    fig, ax = plt.subplots(figsize=(6, 4))
    for interval in intervals:
        pts = sorted((c["alpha"], c["combined_map50"])
                     for c in cells if c["interval"] == interval)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=f"interval {interval}")
    ax.set_xlabel("retention weight")
    ax.set_ylabel("combined mAP@50")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def save_report_figures(report, outdir):
    """Render the figures that make sense for this report's mode; returns
    the list of files written."""
    os.makedirs(outdir, exist_ok=True)
    written = []

    def emit(fig, name):
        path = os.path.join(outdir, name)
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    mode = report["config"]["mode"]
    if mode == "sensitivity":
        emit(sensitivity_figure(report), "sensitivity_grid.png")
    else:
        emit(map_by_task_figure(report), "map_by_task.png")
        n_tasks = max(len(r["result"]["evals"]) for r in report["runs"])
        if n_tasks >= 2:
            emit(retention_figure(report), "retention_by_task.png")
    return written
