"""SVG heatmaps of space-time fields (time horizontal, state vertical)."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed salt and no timestamp so identical data renders to identical bytes
matplotlib.rcParams["svg.hashsalt"] = "boltzsparse"


def heatmap_svg(times, centers, field, title: str, label: str,
                symmetric: bool = False) -> bytes:
    """Render ``field`` (n_times, n_bins) normalized by its global max |value|.

    ``symmetric`` uses a diverging map on [-1, 1] for signed fields.
    """
    times = np.asarray(times, float)
    centers = np.asarray(centers, float)
    z = np.asarray(field, float).T
    scale = np.max(np.abs(z)) if z.size else 0.0
    if scale > 0:
        z = z / scale
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    if symmetric:
        mesh = ax.pcolormesh(times, centers, z, shading="nearest", cmap="RdBu_r",
                             vmin=-1.0, vmax=1.0)
    else:
        mesh = ax.pcolormesh(times, centers, z, shading="nearest", cmap="viridis",
                             vmin=0.0, vmax=1.0)
    ax.set_xlabel("t")
    ax.set_ylabel("x")
    ax.set_title(title)
    fig.colorbar(mesh, ax=ax, label=label)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()
