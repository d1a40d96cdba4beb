"""Matplotlib figures written next to the CSV reports.

Rendering uses the Agg backend and fixed SVG ids/hash salt so the same data
always produces the same file.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .qq import QQCurve  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.hashsalt": "wxvae",
    "svg.fonttype": "none",
}

IDENTITY_GID = "identity-line"


def _save(fig, path) -> Path:
    path = Path(path)
    fmt = path.suffix.lstrip(".") or "svg"
    fig.savefig(path, format=fmt, metadata={"Date": None} if fmt == "svg" else None)
    plt.close(fig)
    return path


def render_qq(curves: Sequence[QQCurve], path, title: str | None = None, styles: Sequence[dict] | None = None) -> Path:
    """Quantile pairs of each curve plus the ``y = x`` reference line."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        hi = max(float(max(c.q_a.max(), c.q_b.max())) for c in curves)
        hi = hi if hi > 0 else 1.0
        ref = ax.plot([0, hi], [0, hi], color="red", lw=1.0, label="y = x")[0]
        ref.set_gid(IDENTITY_GID)
        for i, c in enumerate(curves):
            kw = dict(styles[i]) if styles else {}
            kw.setdefault("marker", "o" if len(curves) == 1 else None)
            kw.setdefault("ms", 2.5)
            kw.setdefault("lw", 0 if len(curves) == 1 else 1.2)
            line = ax.plot(c.q_a, c.q_b, label=c.label_b, **kw)[0]
            line.set_gid(f"qq-{i}")
        ax.set_xlim(0, hi)
        ax.set_ylim(0, hi)
        ax.set_aspect("equal")
        ax.set_xlabel(f"{curves[0].label_a} quantile (mm/day)")
        ax.set_ylabel("compared quantile (mm/day)")
        if title:
            ax.set_title(title)
        if len(curves) > 1:
            ax.legend(loc="upper left", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def render_sample_grid(rows: Sequence[tuple[str, np.ndarray]], path, days: Sequence[int] = (0, 4, 8, 12)) -> Path:
    """Grid of daily fields: one row per labelled cube, one column per day."""
    vmax = max(float(cube.max()) for _, cube in rows) or 1.0
    days = [d for d in days if d < rows[0][1].shape[0]]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(rows), len(days), figsize=(1.3 * len(days) + 0.6, 1.3 * len(rows)), squeeze=False)
        for r, (label, cube) in enumerate(rows):
            for c, d in enumerate(days):
                ax = axes[r][c]
                im = ax.imshow(cube[d], vmin=0, vmax=vmax, cmap="Blues", interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(f"day {d}")
                if c == 0:
                    ax.set_ylabel(label)
        fig.colorbar(im, ax=axes, shrink=0.8, label="mm/day")
        return _save(fig, path)
