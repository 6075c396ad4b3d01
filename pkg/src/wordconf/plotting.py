"""PNG figures for reliability diagrams, ROC curves and routing sweeps."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import Calibration  # noqa: E402
from .selection import SweepPoint  # noqa: E402

_STYLE = {
    "figure.figsize": (4.8, 4.0),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}
# no timestamps or version strings, so reruns give identical files
_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)
    return path


def reliability_diagram(curves: Mapping[str, Calibration], path: str | Path,
                        title: str = "") -> Path:
    """Accuracy against mean confidence per bin, one line per system."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot([0, 1], [0, 1], color="0.6", ls="--", lw=1, label="ideal")
        for name, cal in curves.items():
            pts = [(b.mean_conf, b.accuracy) for b in cal.bins if b.count]
            xs, ys = zip(*pts) if pts else ((), ())
            ax.plot(xs, ys, marker="o", ms=3, label=f"{name} (ECE {cal.ece:.3f})")
        ax.set(xlim=(0, 1), ylim=(0, 1), xlabel="confidence", ylabel="accuracy", title=title)
        ax.legend(frameon=False, loc="upper left")
        return _save(fig, path)


def roc_plot(curves: Mapping[str, tuple[Sequence[float], Sequence[float]]],
             path: str | Path, title: str = "") -> Path:
    """``curves`` maps a name to ``(fpr, tpr)``."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot([0, 1], [0, 1], color="0.6", ls="--", lw=1)
        for name, (fpr, tpr) in curves.items():
            ax.plot(fpr, tpr, lw=1.2, label=name)
        ax.set(xlim=(0, 1), ylim=(0, 1), xlabel="false positive rate",
               ylabel="true positive rate", title=title)
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def selection_plot(sweeps: Mapping[str, Sequence[SweepPoint]], path: str | Path,
                   chosen: float | None = None) -> Path:
    """WER and on-device fraction against the routing threshold."""
    with plt.rc_context(_STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(4.8, 5.2))
        for name, pts in sweeps.items():
            t = [p.threshold for p in pts]
            top.plot(t, [100 * p.wer for p in pts], label=name)
            bottom.plot(t, [p.fraction_on_device for p in pts], label=name)
        if chosen is not None:
            for ax in (top, bottom):
                ax.axvline(chosen, color="0.4", ls=":", lw=1)
        top.set_ylabel("WER (%)")
        top.legend(frameon=False)
        bottom.set(xlabel="confidence threshold", ylabel="fraction on device", ylim=(0, 1.02))
        return _save(fig, path)
