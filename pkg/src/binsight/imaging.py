"""Binary-to-image transforms, model-input resampling and Netpbm export."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from .binary import RawBinary
from .stats import DEFAULT_WINDOW, centered_entropy

MODEL_SIDE = 64

KIB = 1024
# (exclusive upper bound on file size, width)
WIDTH_SCHEDULE = (
    (10 * KIB, 32),
    (30 * KIB, 64),
    (60 * KIB, 128),
    (100 * KIB, 256),
    (200 * KIB, 384),
    (500 * KIB, 512),
    (1024 * KIB, 768),
)
MAX_WIDTH = 1024


@dataclass(frozen=True)
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8
    pad_len: int = 0

    @property
    def file_len(self) -> int:
        return self.width * self.height - self.pad_len

    @property
    def channels(self) -> int:
        return 1

    def flat_bytes(self) -> bytes:
        """The original file bytes (padding stripped)."""
        return self.pixels.reshape(-1)[: self.file_len].tobytes()


@dataclass(frozen=True)
class RgbImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8
    pad_len: int = 0

    @property
    def file_len(self) -> int:
        return self.width * self.height - self.pad_len

    @property
    def channels(self) -> int:
        return 3


Image = Union[GrayImage, RgbImage]


def image_width_for(file_len: int) -> int:
    if file_len < 1:
        raise ValueError("file_len must be >= 1")
    for bound, width in WIDTH_SCHEDULE:
        if file_len < bound:
            return width
    return MAX_WIDTH


def _geometry(n: int):
    width = image_width_for(n)
    height = -(-n // width)
    return width, height, width * height - n


def to_grayscale(binary: RawBinary) -> GrayImage:
    arr = np.frombuffer(binary.data, dtype=np.uint8)
    width, height, pad = _geometry(len(arr))
    flat = np.zeros(width * height, dtype=np.uint8)
    flat[: len(arr)] = arr
    pixels = flat.reshape(height, width)
    pixels.setflags(write=False)
    return GrayImage(width, height, pixels, pad)


def entropy_channel(entropy_bits: np.ndarray) -> np.ndarray:
    """Scale entropies in [0, 8] bits to 8-bit intensities, rounding half up."""
    return np.floor(255.0 * np.asarray(entropy_bits) / 8.0 + 0.5).astype(np.uint8)


def to_hit_rgb(binary: RawBinary, window: int = DEFAULT_WINDOW) -> RgbImage:
    """HIT-style RGB image: bytes in green, local entropy in red and blue.

    Local entropy is taken over the ``window`` bytes centered on each offset,
    clamped so the window stays inside the file. Pad pixels are black.
    """
    gray = to_grayscale(binary)
    n = len(binary.data)
    ent = np.zeros(gray.width * gray.height, dtype=np.uint8)
    ent[:n] = entropy_channel(centered_entropy(binary.data, window))
    ent = ent.reshape(gray.height, gray.width)
    pixels = np.stack([ent, gray.pixels, ent], axis=-1)
    pixels.setflags(write=False)
    return RgbImage(gray.width, gray.height, pixels, gray.pad_len)


@lru_cache(maxsize=512)
def box_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) matrix averaging source cells over each output cell's span.

    Output cell ``i`` covers the source interval ``[i*src/dst, (i+1)*src/dst)``.
    Overlaps are computed in integer units of ``1/dst`` so the partition is exact.
    """
    w = np.zeros((dst, src), dtype=np.float64)
    for i in range(dst):
        lo, hi = i * src, (i + 1) * src
        for r in range(lo // dst, min(-(-hi // dst), src)):
            overlap = min(hi, (r + 1) * dst) - max(lo, r * dst)
            if overlap > 0:
                w[i, r] = overlap / src
    w.setflags(write=False)
    return w


def resample(img: Image, side: int = MODEL_SIDE) -> np.ndarray:
    """Area-average ``img`` to ``side`` x ``side`` and scale to [0, 1].

    Returns a float64 array shaped ``(channels, side, side)``.
    """
    rows = box_weights(img.height, side)
    cols = box_weights(img.width, side)
    px = np.asarray(img.pixels, dtype=np.float64)
    if px.ndim == 2:
        px = px[..., None]
    out = np.einsum("ih,hwc,jw->cij", rows, px, cols, optimize=True) / 255.0
    return np.clip(out, 0.0, 1.0)


def encode_netpbm(img) -> bytes:
    """Binary PGM (P5) for 2-D pixel arrays, PPM (P6) for 3-channel ones."""
    px = img.pixels if hasattr(img, "pixels") else img
    px = np.ascontiguousarray(px, dtype=np.uint8)
    if px.ndim == 2:
        magic = b"P5"
    elif px.ndim == 3 and px.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode pixel array of shape {px.shape}")
    height, width = px.shape[:2]
    return magic + f"\n{width} {height}\n255\n".encode("ascii") + px.tobytes()


def export_image(img, path) -> str:
    path = os.fspath(path)
    with open(path, "wb") as fh:
        fh.write(encode_netpbm(img))
    return path


def read_netpbm(path) -> np.ndarray:
    """Read a P5/P6 file written by :func:`export_image`."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, dims, maxval, body = data.split(b"\n", 3)
    width, height = (int(x) for x in dims.split())
    if int(maxval) != 255:
        raise ValueError("only maxval 255 is supported")
    if magic == b"P5":
        return np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    if magic == b"P6":
        return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    raise ValueError(f"unsupported netpbm magic {magic!r}")


# cold -> warm: blue, cyan, green, yellow, red
RAMP_STOPS = np.array(
    [[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]], dtype=np.float64
)


def colorize(intensities: np.ndarray) -> np.ndarray:
    """Map intensities in [0, 1] through the 5-stop ramp to uint8 RGB."""
    x = np.clip(np.asarray(intensities, dtype=np.float64), 0.0, 1.0) * (len(RAMP_STOPS) - 1)
    lo = np.minimum(np.floor(x).astype(int), len(RAMP_STOPS) - 2)
    t = (x - lo)[..., None]
    rgb = RAMP_STOPS[lo] * (1.0 - t) + RAMP_STOPS[lo + 1] * t
    return np.floor(rgb + 0.5).astype(np.uint8)


def overlay(gray: GrayImage, intensities: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the colorized heatmap over the grayscale image; returns (h, w, 3) uint8."""
    base = np.repeat(np.asarray(gray.pixels, dtype=np.float64)[..., None], 3, axis=-1)
    heat = colorize(intensities).astype(np.float64)
    return np.floor((1.0 - alpha) * base + alpha * heat + 0.5).astype(np.uint8)
