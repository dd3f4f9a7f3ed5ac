"""CSV writing with round-trip float formatting, plus self-contained SVG line plots."""

from __future__ import annotations

import csv
import io
import os

import numpy as np


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return "" if value is None else str(value)


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def append_csv_row(path, row: dict):
    """Append one row; writes the header when the file is new.  Caller holds the lock."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        if new:
            w.writerow(list(row))
        w.writerow([fmt(v) for v in row.values()])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def line_plot_svg(path, panels):
    """Write an SVG with one subplot per panel.

    ``panels`` is a list of dicts with ``title``, ``xlabel``, ``ylabel``,
    ``logx``/``logy`` flags and ``series``: {label: (x, y, err)}.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "ocmdiff"
    matplotlib.rcParams["svg.fonttype"] = "path"
    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 3.6), squeeze=False)
    for ax, panel in zip(axes[0], panels):
        for label, (x, y, err) in panel["series"].items():
            ax.errorbar(x, y, yerr=err, marker="o", markersize=3, capsize=2, label=label)
        if panel.get("logx"):
            ax.set_xscale("log")
        if panel.get("logy"):
            ax.set_yscale("log")
        ax.set_title(panel["title"], fontsize=9)
        ax.set_xlabel(panel.get("xlabel", ""))
        ax.set_ylabel(panel.get("ylabel", ""))
        ax.legend(fontsize=6)
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
