"""Report figures, rendered headless to PNG next to the CSV/JSON they plot."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
    "svg.hashsalt": "duo",
}
PALETTE = ["#1b6ca8", "#d1495b", "#66a182", "#edae49", "#6b4e71"]


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps PNG bytes reproducible
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _f(rows, key):
    return np.array([float(r[key]) for r in rows])


def pareto_plot(rows: list[dict], path) -> Path:
    """DSR against preservation, one marker per sweep point, front highlighted."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.4))
        dsr, pres = _f(rows, "dsr"), _f(rows, "preservation")
        front = np.array([bool(int(r["pareto"])) for r in rows])
        order = np.argsort(dsr[front])
        ax.plot(dsr[front][order], pres[front][order], "-", color=PALETTE[0], lw=1, alpha=0.6)
        ax.scatter(dsr[~front], pres[~front], color="0.6", s=22, label="dominated")
        ax.scatter(dsr[front], pres[front], color=PALETTE[0], s=28, label="Pareto front")
        for r, x, y in zip(rows, dsr, pres):
            ax.annotate(f"{float(r['label']):g}", (x, y), textcoords="offset points", xytext=(4, 3), fontsize=7)
        ax.set_xlabel("defense success rate")
        ax.set_ylabel("prior preservation")
        ax.set_xlim(-0.02, 1.02)
        ax.legend(loc="lower left")
        return _save(fig, path)


def sweep_metrics_plot(rows: list[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        labels = _f(rows, "label")
        order = np.argsort(labels)
        for k, (key, name) in enumerate((("dsr", "DSR"), ("preservation", "preservation"))):
            ax.plot(labels[order], _f(rows, key)[order], "o-", color=PALETTE[k], label=name, ms=4)
        ax.set_xscale("log")
        ax.set_xlabel("beta (ladder label)")
        ax.set_ylim(-0.02, 1.02)
        ax.legend()
        return _save(fig, path)


def samples_plot(samples: dict[str, np.ndarray], path, r_band=(2.0, 3.0)) -> Path:
    """Scatter of ``samples_<who>_<concept>`` sets, base left and victim right."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 3.4), sharex=True, sharey=True)
        theta = np.linspace(0, 2 * np.pi, 200)
        for ax, who in zip(axes, ("base", "victim")):
            for r in r_band:
                ax.plot(r * np.cos(theta), r * np.sin(theta), color="0.5", lw=0.6, ls="--")
            sets = sorted(k for k in samples if k.startswith(f"samples_{who}_"))
            for k, key in enumerate(sets):
                x = samples[key]
                ax.scatter(x[:, 0], x[:, 1], s=3, alpha=0.5, color=PALETTE[k % len(PALETTE)],
                           label=key.split("_", 2)[2])
            ax.set_title(who)
            ax.set_aspect("equal")
        axes[0].legend(loc="upper right", markerscale=3)
        return _save(fig, path)


def trainlog_plot(rows: list[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        step = _f(rows, "step")
        a.plot(step, _f(rows, "loss"), color=PALETTE[0], lw=0.6)
        a.set_xlabel("step")
        a.set_ylabel("loss")
        b.plot(step, _f(rows, "delta_plus"), color=PALETTE[2], lw=0.6, label="winner")
        b.plot(step, _f(rows, "delta_minus"), color=PALETTE[1], lw=0.6, label="loser")
        b.set_xlabel("step")
        b.set_ylabel("trainee - reference error")
        b.legend()
        return _save(fig, path)
