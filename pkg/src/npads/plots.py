"""ROC figures for evaluation reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import EvalReport  # noqa: E402


def plot_roc(reports: dict[str, EvalReport], path, title: str = "ROC") -> None:
    """Overlay the ROC curves of several conditions, with the pAUC range shaded."""
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    p = None
    for key, rep in reports.items():
        ax.plot(rep.fpr, rep.tpr, drawstyle="default", lw=1.5,
                label=f"{key}  AUC={rep.auc:.3f} pAUC={rep.pauc:.3f}")
        p = rep.p
    if p is not None:
        ax.axvspan(0.0, p, color="0.9", zorder=0)
    ax.plot([0, 1], [0, 1], ls=":", color="0.5", lw=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false-positive rate")
    ax.set_ylabel("true-positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
