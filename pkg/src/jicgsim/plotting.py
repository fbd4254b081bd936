"""Matplotlib figures for maps, traces, spot sizes and layouts.

Everything renders with the Agg backend and strips PNG metadata, so the same
inputs produce the same bytes.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .beam import OBJECTIVES  # noqa: E402
from .campaign import PPM_COLORS, SensitivityMap  # noqa: E402
from .circuit import Trace  # noqa: E402
from .layout import D_DR, NMOS, CellLayout, Rect  # noqa: E402

_SAVE = {"dpi": 110, "metadata": {"Software": None}}
_CLASSES = list(PPM_COLORS)


def _save(fig, path) -> None:
    fig.savefig(path, format="png", **_SAVE)
    plt.close(fig)


def plot_sensitivity_map(smap: SensitivityMap, path, gate_regions: dict[str, Rect] | None = None,
                         title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(10, 3.6))
    if smap.empty:
        ax.text(0.5, 0.5, "empty map", ha="center", va="center", transform=ax.transAxes)
    else:
        codes = np.vectorize(_CLASSES.index, otypes=[int])(smap.classes)
        cmap = ListedColormap([np.array(c) / 255 for c in PPM_COLORS.values()])
        h = smap.step / 2
        ax.imshow(codes, origin="lower", cmap=cmap, vmin=-0.5, vmax=len(_CLASSES) - 0.5,
                  extent=(smap.xs[0] - h, smap.xs[-1] + h, smap.ys[0] - h, smap.ys[-1] + h),
                  interpolation="nearest", aspect="equal")
        present = [c for c in _CLASSES if c in smap.counts()]
        handles = [Rectangle((0, 0), 1, 1, fc=np.array(PPM_COLORS[c]) / 255, ec="0.3")
                   for c in present]
        ax.legend(handles, present, loc="upper right", fontsize=7, framealpha=0.9)
    for label, r in (gate_regions or {}).items():
        ax.add_patch(Rectangle((r.x0, r.y0), r.width, r.height, fill=False, ec="0.2", lw=0.8,
                               ls="--"))
        ax.text(r.center[0], r.y1 + 0.3, label, ha="center", va="bottom", fontsize=7)
    md = smap.metadata
    ax.set_title(title or f"{md.get('objective', '?')}x, power {md.get('power', '?')}, "
                 f"input '{md.get('input_bit', '?')}'", fontsize=9)
    ax.set_xlabel("x, um")
    ax.set_ylabel("y, um")
    _save(fig, path)


def plot_trace(trace: Trace, path, title: str | None = None) -> None:
    """Oscilloscope-style stack of laser, clock, data input and register output."""
    t = np.asarray(trace.time_ns) / 1000.0
    channels = [("laser", trace.laser), ("clk", trace.clk), ("d_in", trace.d_in),
                ("q_out", trace.q_out)]
    fig, axes = plt.subplots(len(channels), 1, sharex=True, figsize=(8, 4.8))
    for ax, (name, values) in zip(axes, channels):
        ax.step(t, values, where="post", lw=1.0)
        ax.set_ylabel(name, rotation=0, ha="right", va="center", fontsize=8)
        ax.set_yticks([])
        top = max(max(values, default=0), 1) if name != "laser" else max(max(values, default=0), 1e-9)
        ax.set_ylim(-0.15 * top, 1.2 * top)
    axes[-1].set_xlabel("time, us")
    if title:
        axes[0].set_title(title, fontsize=9)
    _save(fig, path)


def plot_spot_sizes(path) -> None:
    """Datasheet vs measured 80 %-energy spot diameters against the pair spacing."""
    mags = sorted(OBJECTIVES, reverse=True)
    x = np.arange(len(mags))
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.bar(x - 0.2, [OBJECTIVES[m].d80_datasheet for m in mags], 0.4, label="datasheet")
    ax.bar(x + 0.2, [OBJECTIVES[m].d80_measured for m in mags], 0.4, label="measured")
    ax.axhline(D_DR, color="k", ls="--", lw=0.8, label=f"pair spacing {D_DR:g} um")
    ax.set_xticks(x, [f"{m}x" for m in mags])
    ax.set_ylabel("d80, um")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_layout(layout: CellLayout, path, title: str | None = None) -> None:
    b = layout.bounds
    fig, ax = plt.subplots(figsize=(min(14, 2 + b.width / 8), min(10, 1.5 + b.height / 8)))
    for s in layout.sites:
        r = s.gate_region
        ax.add_patch(Rectangle((r.x0, r.y0), r.width, r.height, lw=0,
                               fc="tab:blue" if s.channel == NMOS else "tab:orange"))
    for f in layout.fillers:
        ax.add_patch(Rectangle((f.x0, f.y0), f.width, f.height, fc="0.5", alpha=0.5, lw=0))
    for p in layout.children:
        r = p.bounds
        ax.add_patch(Rectangle((r.x0, r.y0), r.width, r.height, fill=False, ec="0.6", lw=0.5))
    ax.set_xlim(b.x0 - 1, b.x1 + 1)
    ax.set_ylim(b.y0 - 1, b.y1 + 1)
    ax.set_aspect("equal")
    ax.set_xlabel("x, um")
    ax.set_ylabel("y, um")
    ax.set_title(title or f"{layout.cell}: {len(layout.sites)} sites", fontsize=9)
    _save(fig, path)
