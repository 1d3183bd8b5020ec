"""Report figures. Rendered off-screen and saved without timestamps so reruns are byte-identical."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 3.6),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "svg.hashsalt": "canfed",
}
MODE_COLORS = {"centralized": "#33658a", "federated": "#f26419"}


def _save(fig, path: Path) -> None:
    from .experiment import atomic_write

    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    atomic_write(Path(path), buf.getvalue())


def detection_figure(rows: Sequence[Mapping], path: Path) -> None:
    """Grouped bars: detection rate (solid) and false-positive rate (hatched) per ID and mode."""
    ids = sorted({r["id"] for r in rows})
    modes = [m for m in MODE_COLORS if any(r["mode"] == m for r in rows)]
    width = 0.8 / max(1, 2 * len(modes))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for j, mode in enumerate(modes):
            by_id = {r["id"]: r for r in rows if r["mode"] == mode}
            for k, metric in enumerate(("dr", "fpr")):
                xs = [i + (2 * j + k) * width - 0.4 + width / 2 for i in range(len(ids))]
                ys = [by_id.get(i, {}).get(metric) or 0.0 for i in ids]
                ax.bar(xs, ys, width, color=MODE_COLORS[mode], hatch="//" if metric == "fpr" else None,
                       alpha=0.55 if metric == "fpr" else 1.0, label=f"{mode} {metric.upper()}")
        ax.set_xticks(range(len(ids)), ids)
        ax.set_xlabel("CAN ID")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("rate")
        ax.legend(ncol=2, fontsize=8)
        _save(fig, path)


def loss_figure(losses: Mapping[tuple[int, str], Sequence[float]], path: Path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (can_id, mode), series in sorted(losses.items()):
            ax.plot(range(1, len(series) + 1), series, color=MODE_COLORS.get(mode),
                    ls="-" if mode == "federated" else "--", lw=1, label=f"{can_id:03X} {mode}")
        ax.set_yscale("log")
        ax.set_xlabel("round")
        ax.set_ylabel("validation loss")
        ax.legend(ncol=2, fontsize=7)
        _save(fig, path)


def overhead_figure(rows: Sequence[Mapping], path: Path) -> None:
    ids = [r["id"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = range(len(ids))
        ax.bar([x - 0.2 for x in xs], [r["dl_mib"] for r in rows], 0.4, label="download", color="#33658a")
        ax.bar([x + 0.2 for x in xs], [r["ul_mib"] for r in rows], 0.4, label="upload", color="#86bbd8")
        ax.set_xticks(list(xs), ids)
        ax.set_xlabel("CAN ID")
        ax.set_ylabel("MiB")
        ax.legend()
        _save(fig, path)
