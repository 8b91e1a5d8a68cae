"""GradCAM++ heatmaps and their projection back onto the file image."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .binary import PeLayout, byte_range_rows, section_pixel_ranges
from .errors import GeometryMismatch, NoConvLayer
from .nn import CnnModel, forward, logit_grad_wrt_features
from .stats import PaddingRegion

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Heatmap:
    width: int
    height: int
    intensities: np.ndarray  # (height, width), values in [0, 1]


@dataclass
class SectionHeat:
    name: str
    rows: Tuple[int, int]
    mean_intensity: float


@dataclass
class AnnotatedReport:
    heatmap: Heatmap
    sections: List[SectionHeat]
    padding: Optional[PaddingRegion]
    padding_rows: Optional[Tuple[int, int]]
    padding_mean_intensity: Optional[float]
    scores: dict
    top_rows: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        padding = None
        if self.padding is not None:
            padding = dict(self.padding.to_dict(), rows=list(self.padding_rows),
                           mean_intensity=self.padding_mean_intensity)
        return {
            "format_version": FORMAT_VERSION,
            "width": self.heatmap.width,
            "height": self.heatmap.height,
            "scores": self.scores,
            "sections": [
                {"name": s.name, "rows": list(s.rows), "mean_intensity": s.mean_intensity}
                for s in self.sections
            ],
            "padding": padding,
            "top_rows": list(self.top_rows),
        }


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation weights with half-pixel centers and edge clamping."""
    m = np.zeros((dst, src))
    pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0.0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    t = pos - lo
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - t)
    np.add.at(m, (rows, hi), t)
    return m


def bilinear_resize(values: np.ndarray, height: int, width: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return bilinear_matrix(values.shape[0], height) @ values @ bilinear_matrix(values.shape[1], width).T


def gradcam_pp_weights(activations: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Per-channel GradCAM++ weights from ``(h, w, K)`` maps and gradients.

    alpha = g^2 / (2 g^2 + sum(A) g^3) is evaluated only where g > 0, which
    is the only place relu(g) lets it contribute; that also enforces 0/0 := 0.
    """
    a_sum = activations.sum(axis=(0, 1), keepdims=True)
    g2 = grads * grads
    positive = grads > 0
    denom = np.where(positive, 2.0 * g2 + a_sum * g2 * grads, 1.0)
    alpha = np.where(positive, g2 / denom, 0.0)
    return (alpha * np.maximum(grads, 0.0)).sum(axis=(0, 1))


def _normalize(cam: np.ndarray) -> np.ndarray:
    cam = np.maximum(cam, 0.0)
    top = cam.max()
    if not np.isfinite(top) or top <= 0:
        return np.zeros_like(cam)
    return np.clip(cam / top, 0.0, 1.0)


def gradcam_pp(model: CnnModel, inputs: np.ndarray, head: int = 0, side: int = 64) -> Heatmap:
    """GradCAM++ over the last conv block for the pre-sigmoid logit of ``head``.

    The 8x8 map is upsampled bilinearly to ``side`` x ``side`` and scaled so
    that its maximum is 1 (an all-zero map stays zero).
    """
    if not any(k.startswith("conv") for k in model.params):
        raise NoConvLayer("model has no convolutional layer")
    if not 0 <= head < model.config.heads:
        raise ValueError(f"head {head} out of range for a {model.config.heads}-head model")
    _, cache = forward(model, inputs)
    acts = cache.last_conv[0]
    grads = logit_grad_wrt_features(model, acts[None], head)[0]
    weights = gradcam_pp_weights(acts, grads)
    cam = np.maximum(acts @ weights, 0.0)
    cam = _normalize(bilinear_resize(_normalize(cam), side, side))
    return Heatmap(side, side, cam)


def upsample_to_file_geometry(heatmap: Heatmap, width: int, height: int) -> Heatmap:
    return Heatmap(width, height, np.clip(bilinear_resize(heatmap.intensities, height, width), 0.0, 1.0))


def mean_over_rows(heatmap: Heatmap, first: int, last: int) -> float:
    if last <= first:
        return 0.0
    return float(heatmap.intensities[first:last].mean())


def row_mass_fraction(intensities: np.ndarray, rows: Sequence[int]) -> float:
    """Share of total heatmap mass lying on the given rows."""
    total = float(np.sum(intensities))
    if total <= 0:
        return 0.0
    return float(np.sum(intensities[list(rows)])) / total


def annotate(
    heatmap: Heatmap,
    layout: Optional[PeLayout],
    padding: Optional[PaddingRegion],
    scores: dict,
    file_len: int,
    top_k: Optional[int] = None,
) -> AnnotatedReport:
    """Attach per-section and padding mean intensities to a file-geometry heatmap."""
    w, h = heatmap.width, heatmap.height
    if heatmap.intensities.shape != (h, w) or w * h < file_len:
        raise GeometryMismatch(f"heatmap {w}x{h} does not match a {file_len}-byte file image")
    sections = []
    if layout is not None:
        for name, first, last in section_pixel_ranges(layout, w, h, file_len):
            sections.append(SectionHeat(name, (first, last), mean_over_rows(heatmap, first, last)))
    pad_rows = pad_mean = None
    if padding is not None:
        pad_rows = byte_range_rows(padding.start_offset, padding.start_offset + padding.length, w, h)
        pad_mean = mean_over_rows(heatmap, *pad_rows)
    row_means = heatmap.intensities.mean(axis=1)
    k = top_k if top_k is not None else max(1, h // 10)
    top = [int(r) for r in np.argsort(-row_means, kind="stable")[:k]]
    return AnnotatedReport(heatmap, sections, padding, pad_rows, pad_mean, dict(scores), top)
