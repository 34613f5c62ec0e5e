"""Footprint comparisons and figure rendering for report paths.

Every CLI command that writes a delimited report can also render a small
matplotlib figure next to it (training curves, prediction overlays, the
footprint bar chart).  Figures are conveniences; the TSVs stay the source
of truth.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import ConfigError

BYTES_PER_VALUE = 4   # footprints assume 32-bit float storage


@dataclasses.dataclass
class FootprintRow:
    method: str
    cells: str            # human-readable size formula
    entries: int
    bytes: int

    @property
    def human(self) -> str:
        return format_bytes(self.bytes)


def format_bytes(n: int) -> str:
    value = float(n)
    for unit in ("B", "KB", "MB", "GB", "TB", "PB"):
        if value < 1000.0 or unit == "PB":
            return f"{value:.3g} {unit}"
        value /= 1000.0
    return f"{n} B"


def footprint_table(n_terms: int, n_periods: int, dim: int,
                    bins: Optional[int] = None,
                    accepted: Optional[int] = None,
                    classes: Optional[int] = None) -> list[FootprintRow]:
    """Raw-byte memory requirement of each way to cache search features.

    The embedding forms need one value per period per component at 32-bit
    floats; one-hot needs a value per period per unique term, which is what
    makes it impractical at log scale.
    """
    if n_terms <= 0 or n_periods <= 0 or dim <= 0:
        raise ConfigError("term count, period count, and dimension must be "
                          "positive")
    rows = [
        FootprintRow("one-hot", "periods x terms", n_periods * n_terms,
                     n_periods * n_terms * BYTES_PER_VALUE),
        FootprintRow("embedding-sum", "periods x dim", n_periods * dim,
                     n_periods * dim * BYTES_PER_VALUE),
    ]
    if accepted is not None:
        if accepted <= 0:
            raise ConfigError("accepted term count must be positive")
        rows.insert(1, FootprintRow("filtered-one-hot", "periods x accepted",
                                    n_periods * accepted,
                                    n_periods * accepted * BYTES_PER_VALUE))
    if classes is not None:
        if classes <= 0:
            raise ConfigError("class count must be positive")
        rows.insert(-1, FootprintRow("classification", "periods x classes",
                                     n_periods * classes,
                                     n_periods * classes * BYTES_PER_VALUE))
    if bins is not None:
        if bins < 2:
            raise ConfigError("need at least 2 bins")
        rows.append(FootprintRow("embedding-marginal", "periods x bins x dim",
                                 n_periods * bins * dim,
                                 n_periods * bins * dim * BYTES_PER_VALUE))
    return rows


def write_footprint(path: str, rows: Sequence[FootprintRow]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("method\tcells\tentries\tbytes\thuman\n")
        for row in rows:
            handle.write(f"{row.method}\t{row.cells}\t{row.entries}\t"
                         f"{row.bytes}\t{row.human}\n")


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def render_footprint_figure(rows: Sequence[FootprintRow], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    methods = [r.method for r in rows]
    ax.barh(methods, [r.bytes for r in rows], color="#4878cf")
    ax.set_xscale("log")
    ax.set_xlabel("bytes (32-bit values, log scale)")
    ax.set_title("Cached feature footprint by method")
    for i, row in enumerate(rows):
        ax.annotate(f" {row.human}", (row.bytes, i), va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_history_figure(history, path: str) -> None:
    """Training and validation loss over steps, learning rate beneath."""
    steps = [row.step for row in history]
    fig, (ax_loss, ax_lr) = plt.subplots(
        2, 1, figsize=(6.4, 4.8), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]})
    ax_loss.plot(steps, [row.train_loss for row in history], label="train")
    ax_loss.plot(steps, [row.val_loss for row in history], label="validation")
    ax_loss.set_yscale("log")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(frameon=False)
    ax_lr.plot(steps, [row.lr for row in history], color="gray")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_series_figure(actual: Mapping, predicted: Mapping, path: str,
                         level: str = "rollup", max_panels: int = 12) -> None:
    """Actual vs predicted series; one panel per region at region level."""
    if level == "rollup":
        groups = {"total": sorted(actual)}
        key_of = {"total": lambda k: k}
    else:
        regions = sorted({k[1] for k in actual})[:max_panels]
        groups = {r: sorted(k for k in actual if k[1] == r) for r in regions}
    n = max(1, len(groups))
    cols = min(3, n)
    rows_n = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows_n, cols, figsize=(4.2 * cols, 2.6 * rows_n),
                             squeeze=False, sharex=True)
    for ax in axes.reshape(-1)[n:]:
        ax.set_visible(False)
    for ax, (label, keys) in zip(axes.reshape(-1), sorted(groups.items())):
        dates = [k if isinstance(k, dt.date) else k[0] for k in keys]
        ax.plot(dates, [actual[k] for k in keys], label="actual", lw=1.2)
        ax.plot(dates, [predicted[k] for k in keys], label="predicted",
                lw=1.2, ls="--")
        ax.set_title(label, fontsize=9)
        ax.tick_params(labelsize=7)
    axes[0, 0].legend(frameon=False, fontsize=8)
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_targets_figure(series: Mapping, path: str,
                          title: str = "generated targets, all regions") -> None:
    """Single-series preview of per-period target totals."""
    days = sorted(series)
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    ax.plot(days, [series[d] for d in days], lw=1.2, color="#4878cf")
    ax.set_title(title, fontsize=10)
    ax.tick_params(labelsize=7)
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_grid_figure(results, path: str) -> None:
    """Mean validation loss per grid point, ranked."""
    labels = [", ".join(f"{k}={v}" for k, v in r.point.items())
              for r in results]
    means = [r.mean("val_loss") for r in results]
    stds = [r.std("val_loss") for r in results]
    fig, ax = plt.subplots(figsize=(6.4, 0.5 + 0.45 * len(results)))
    ax.barh(range(len(results)), means, xerr=stds, color="#6acc65")
    ax.set_yticks(range(len(results)))
    ax.set_yticklabels(labels, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("mean validation loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
