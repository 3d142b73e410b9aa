"""Report figures, rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import TimingRow  # noqa: E402


def reliability_histogram(reliability: np.ndarray, threshold: float, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(reliability, bins=100, range=(0.5, 1.0), log=True, color="steelblue")
    ax.axvline(threshold, color="crimson", ls="--", label=f"threshold {threshold:g}")
    frac = float(np.mean(reliability > threshold))
    ax.set_title(f"Cell reliability (min over env grid), {frac:.2%} above threshold")
    ax.set_xlabel("reliability")
    ax.set_ylabel("cells")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def confidence_distributions(genuine: Sequence[float], impostor: Sequence[float], threshold: float,
                             path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bins = np.linspace(0.0, 1.0, 101)
    ax.hist(impostor, bins=bins, alpha=0.6, label="impostor / noise", color="gray")
    ax.hist(genuine, bins=bins, alpha=0.6, label="enrolled", color="seagreen")
    ax.axvline(threshold, color="crimson", ls="--", label=f"t = {threshold:.3f}")
    ax.set_xlabel("confidence S")
    ax.set_ylabel("images")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def timing_bars(rows: Sequence[TimingRow], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [r.primitive for r in rows]
    ax.bar(names, [r.mean_s * 1e3 for r in rows], color="slateblue")
    ax.set_ylabel("mean wall time per call (ms)")
    ax.set_title("Measured primitive cost (simulator, this machine)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
