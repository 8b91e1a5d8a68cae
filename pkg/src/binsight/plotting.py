"""Matplotlib figures for the CLI report paths (rendered off-screen to PNG)."""

from __future__ import annotations

import os
from typing import Dict, List, Optional

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from . import imaging
from .attention import AnnotatedReport
from .binary import PeLayout
from .stats import EntropyProfile, Histogram256, PaddingRegion

SECTION_COLORS = ("tab:orange", "tab:purple", "tab:brown", "tab:pink", "tab:olive", "tab:cyan")


def _save(fig: Figure, path) -> str:
    path = os.fspath(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100)
    return path


def explanation_figure(gray: imaging.GrayImage, report: AnnotatedReport, path, title: str = "") -> str:
    """Grayscale image beside the heatmap overlay, with section and padding rows marked."""
    fig = Figure(figsize=(9, 6))
    left, right = fig.subplots(1, 2)
    left.imshow(gray.pixels, cmap="gray", vmin=0, vmax=255, aspect="auto", interpolation="nearest")
    left.set_title("bytes")
    right.imshow(imaging.overlay(gray, report.heatmap.intensities), aspect="auto", interpolation="nearest")
    right.set_title("attention")
    for i, sec in enumerate(report.sections):
        color = SECTION_COLORS[i % len(SECTION_COLORS)]
        for ax in (left, right):
            ax.axhspan(sec.rows[0] - 0.5, sec.rows[1] - 0.5, xmin=0.0, xmax=0.02, color=color)
        right.text(gray.width * 1.02, (sec.rows[0] + sec.rows[1]) / 2, f"{sec.name} {sec.mean_intensity:.2f}",
                   fontsize=7, va="center", color=color, clip_on=False)
    if report.padding_rows is not None:
        lo, hi = report.padding_rows
        right.axhspan(lo - 0.5, hi - 0.5, fill=False, hatch="//", edgecolor="white", linewidth=0)
        right.text(gray.width * 1.02, (lo + hi) / 2, f"padding {report.padding_mean_intensity:.2f}",
                   fontsize=7, va="center", clip_on=False)
    for ax in (left, right):
        ax.set_xticks([])
        ax.set_ylabel("row")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout(rect=(0, 0, 0.9, 1))
    return _save(fig, path)


def stats_figure(hist: Histogram256, profile: EntropyProfile, layout: Optional[PeLayout],
                 padding: Optional[PaddingRegion], path, title: str = "") -> str:
    """Byte histogram (log scale) and windowed entropy along the file."""
    fig = Figure(figsize=(9, 5))
    top, bottom = fig.subplots(2, 1)
    top.bar(np.arange(256), np.maximum(hist.counts, 0), width=1.0, color="tab:blue")
    top.set_yscale("symlog")
    top.set_xlim(-0.5, 255.5)
    top.set_xlabel("byte value")
    top.set_ylabel("count")
    offsets = np.arange(len(profile.values)) * profile.stride
    bottom.plot(offsets, profile.values, linewidth=0.8, color="black")
    if layout is not None:
        for i, sec in enumerate(layout.sorted_sections()):
            if sec.raw_size:
                bottom.axvspan(sec.raw_offset, sec.raw_end, alpha=0.15,
                               color=SECTION_COLORS[i % len(SECTION_COLORS)], label=sec.name)
    if padding is not None:
        bottom.axvspan(padding.start_offset, padding.start_offset + padding.length, alpha=0.3,
                       color="gray", hatch="//", label="padding")
    bottom.set_ylim(0, 8)
    bottom.set_xlabel("file offset")
    bottom.set_ylabel(f"entropy ({profile.window_size}-byte window)")
    if bottom.get_legend_handles_labels()[0]:
        bottom.legend(fontsize=7, loc="lower right")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def loss_figure(losses: Dict[str, List[float]], path) -> str:
    """Per-epoch training loss for each trained block."""
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    for name, values in losses.items():
        ax.plot(np.arange(1, len(values) + 1), values, marker="o", markersize=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
