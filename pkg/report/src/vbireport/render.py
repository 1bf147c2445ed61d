"""Grouped-bar rendering of a speedup table.

The image is a convenience; the CSV emitted next to it is the artifact
tests pin down, since byte-stable images depend on the plotting
toolchain.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .normalize import SpeedupTable, table_to_csv


def render(table: SpeedupTable, image_path: str, data_path: str | None = None,
           title: str = "speedup over baseline") -> None:
    if not table.rows:
        raise ValueError("empty speedup table")
    if data_path:
        with open(data_path, "w") as fh:
            fh.write(table_to_csv(table))

    labels = [label for label, _, _ in table.rows]
    n_groups = len(labels)
    n_bars = len(table.scenarios)
    width = 0.8 / max(1, n_bars)

    fig, ax = plt.subplots(figsize=(max(6, 0.9 * n_groups * n_bars / 2), 4))
    for i, scenario in enumerate(table.scenarios):
        xs = [g + i * width for g in range(n_groups)]
        ys = [row[2][i] for row in table.rows]
        ax.bar(xs, ys, width=width, label=scenario)
    ax.axhline(1.0, color="black", linewidth=0.8)
    ax.set_xticks([g + 0.4 - width / 2 for g in range(n_groups)])
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("speedup")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(image_path, dpi=120)
    plt.close(fig)
