"""Report figures. Uses the non-interactive Agg backend so it runs headless."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

COLOURS = {"clean": "#4477aa", "perturbed": "#ee6677", "uap": "#228833"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def entropy_boxplot(report, path) -> Path:
    """One group of boxes per probe: clean, perturbed and the UAP alone."""
    pops = ("clean", "perturbed", "uap")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(report.probes), 3.0))
        width = 0.25
        for j, pop in enumerate(pops):
            data = [report.spectra[pop, p].values for p in report.probes]
            pos = [i + (j - 1) * width for i in range(len(report.probes))]
            bp = ax.boxplot(data, positions=pos, widths=width * 0.9, patch_artist=True, showfliers=False)
            for box in bp["boxes"]:
                box.set_facecolor(COLOURS[pop])
                box.set_alpha(0.7)
            ax.plot([], [], "s", color=COLOURS[pop], label=pop)
        ax.set_xticks(range(len(report.probes)))
        ax.set_xticklabels(report.probes, rotation=20)
        ax.set_ylabel("layer entropy (nats)")
        ax.legend(frameon=False, loc="best")
        return _save(fig, path)


def epsilon_sweep_plot(eps_values, curves: dict, path) -> Path:
    """``curves`` maps a label (e.g. ``undefended``) to SR values, one per budget."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        ticks = [e * 255 for e in eps_values]
        for label, values in curves.items():
            ax.plot(ticks, values, marker="o", label=label)
        ax.set_xlabel("epsilon (x/255)")
        ax.set_ylabel("success rate")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(frameon=False)
        return _save(fig, path)


def training_curve(log_rows, path) -> Path:
    """Combined, clean and low-entropy loss plus generated-sample entropy per step."""
    steps = range(len(log_rows))
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(6.4, 2.6))
        for key in ("loss", "clean_loss", "low_entropy_loss"):
            ax1.plot(steps, [r[key] for r in log_rows], label=key.replace("_", " "))
        ax1.set_xlabel("step")
        ax1.set_ylabel("cross-entropy")
        ax1.legend(frameon=False)
        ax2.plot(steps, [r["generated_entropy"] for r in log_rows], color="k")
        ax2.set_xlabel("step")
        ax2.set_ylabel("generated-sample entropy")
        return _save(fig, path)
