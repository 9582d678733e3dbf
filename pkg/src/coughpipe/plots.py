"""Figures for a cross-validation report, written as PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalcv.metrics import WHO_SENSITIVITY, WHO_SPECIFICITY  # noqa: E402


def plot_roc(report, path) -> Path:
    """Pooled ROC curve with the triage target marked."""
    roc = report.roc
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(roc["fpr"], roc["tpr"], lw=1.8, label=f"AUC = {report.auc:.3f}")
    ax.plot([0, 1], [0, 1], ls=":", color="grey", lw=1)
    ax.plot([1 - WHO_SPECIFICITY], [WHO_SENSITIVITY], marker="*", ms=11, color="tab:red", ls="none",
            label="triage target")
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"{report.architecture} ({report.task})")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_fold_f1(report, path) -> Path:
    folds = [f["fold"] for f in report.folds]
    f1s = [f["f1"] for f in report.folds]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar([str(i) for i in folds], f1s, color="tab:blue")
    ax.axhline(report.mean_f1, color="black", lw=1, ls="--",
               label=f"mean {report.mean_f1:.3f} (sd {report.sigma_f1:.3f})")
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("outer fold")
    ax.set_ylabel("F1")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_figures(report, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [plot_fold_f1(report, out_dir / "fold_f1.png")]
    if report.roc:
        written.append(plot_roc(report, out_dir / "roc.png"))
    return written
