"""Rasters and their file formats.

A raster is a dense H x W x C float64 array with channel-last layout.  The
same container carries images (values in [0, 1]), masks (0/1 or soft [0, 1])
and depth maps (meters, strictly positive).  File formats:

- PNG for images and masks.  A mask is decoded as "any nonzero luminance".
- PFM (portable float map, little-endian) for depth.  Rows are stored
  bottom-to-top as the format prescribes; this module presents them top-down.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Raster:
    """H x W x C float64 grid with light validation helpers."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[0] < 1 or d.shape[1] < 1 or d.shape[2] < 1:
            raise ValueError(f"raster must be (H, W, C) with positive dims, got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def validate_image(self) -> "Raster":
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")
        if self.data.min() < -1e-9 or self.data.max() > 1 + 1e-9:
            raise ValueError("image values must lie in [0, 1]")
        return self

    def validate_mask(self) -> "Raster":
        if self.channels != 1:
            raise ValueError("mask must be single-channel")
        if self.data.min() < -1e-9 or self.data.max() > 1 + 1e-9:
            raise ValueError("mask values must lie in [0, 1]")
        return self

    def validate_depth(self) -> "Raster":
        if self.channels != 1:
            raise ValueError("depth must be single-channel")
        if not np.all(np.isfinite(self.data)) or self.data.min() <= 0:
            raise ValueError("depth must be finite and strictly positive")
        return self


# --- PNG ---------------------------------------------------------------


def load_image(path: PathLike) -> np.ndarray:
    """Read a PNG (or any PIL-readable file) as (H, W, C) float64 in [0, 1]."""
    img = Image.open(path)
    if img.mode in ("L", "I;16", "I"):
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        return arr[:, :, None]
    arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_image(path: PathLike, image: np.ndarray) -> None:
    """Write (H, W, C) floats in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    arr = np.clip(arr, 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.shape[2] == 1:
        Image.fromarray(u8[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(u8, mode="RGB").save(path)


def load_mask(path: PathLike) -> np.ndarray:
    """Read a mask PNG: any pixel with nonzero luminance becomes 1.0."""
    img = Image.open(path).convert("L")
    arr = np.asarray(img, dtype=np.float64)
    return (arr > 0).astype(np.float64)


# --- PFM ---------------------------------------------------------------


def load_pfm(path: PathLike) -> np.ndarray:
    """Read a PFM depth map as (H, W) float64, top row first."""
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file: header {header!r}")
        dims = f.readline().decode("ascii")
        m = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ValueError(f"malformed PFM dimensions line: {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().decode("ascii").strip())
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(f.read(w * h * channels * 4), dtype=endian + "f4")
        if data.size != w * h * channels:
            raise ValueError("truncated PFM payload")
    arr = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    # PFM stores the bottom row first.
    arr = np.flipud(arr).astype(np.float64)
    if channels == 3:
        arr = arr.mean(axis=2)
    return np.ascontiguousarray(arr)


def save_pfm(path: PathLike, depth: np.ndarray) -> None:
    """Write (H, W) floats as a little-endian grayscale PFM."""
    arr = np.asarray(depth, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError("PFM writer expects a single-channel map")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())


# --- Resampling --------------------------------------------------------


def area_downsample(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average (box filter) resample of (H, W[, C]) to (h, w[, C]).

    Exact block means when the target evenly divides the source; otherwise
    falls back to PIL's BOX filter.
    """
    if h < 1 or w < 1:
        raise ValueError("target size must be positive")
    squeeze = arr.ndim == 2
    a = arr[:, :, None] if squeeze else arr
    H, W, C = a.shape
    if H % h == 0 and W % w == 0:
        out = a.reshape(h, H // h, w, W // w, C).mean(axis=(1, 3))
    else:
        planes = []
        for c in range(C):
            im = Image.fromarray(a[:, :, c].astype(np.float32), mode="F")
            planes.append(np.asarray(im.resize((w, h), Image.BOX), dtype=np.float64))
        out = np.stack(planes, axis=2)
    return out[:, :, 0] if squeeze else out


def nearest_upsample(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor resample of (H, W[, C]) to (h, w[, C])."""
    if h < 1 or w < 1:
        raise ValueError("target size must be positive")
    H, W = arr.shape[:2]
    if h % H == 0 and w % W == 0:
        out = np.repeat(np.repeat(arr, h // H, axis=0), w // W, axis=1)
    else:
        ys = np.minimum((np.arange(h) * H) // h, H - 1)
        xs = np.minimum((np.arange(w) * W) // w, W - 1)
        out = arr[np.ix_(ys, xs)]
    return out
