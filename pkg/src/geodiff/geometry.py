"""Per-pixel edit fields and forward splatting.

An edit field maps every source pixel of an H x W grid to a target
coordinate (x, y) in the same pixel units, plus a validity flag.  2D
transforms (translate/scale) produce the field directly; 3D transforms
back-project each pixel through the camera intrinsics at its depth, apply a
rigid or scaling motion in camera space, and re-project.

Conventions used throughout:

- a pixel u = (x, y) has x = column, y = row, integer centers 0..W-1/0..H-1;
- homogeneous pixel vectors are [x, y, 1];
- splatting rounds target coordinates half-up and resolves collisions by
  nearest transformed depth (when the field carries depth) or by row-major
  last-writer order, which keeps results reproducible bit for bit.

All functions are pure: they never mutate their inputs and hold no state,
so they are safe to call concurrently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as _field
from typing import Optional

import numpy as np

TRANSFORM_KINDS = ("identity", "translate2d", "scale2d", "rigid3d", "scale3d", "remove")
_2D_KINDS = ("translate2d", "scale2d")
_3D_KINDS = ("rigid3d", "scale3d")

DEFAULT_CONSTANT_DEPTH = 0.5


class GeometryError(ValueError):
    """Raised for invalid transforms, shapes, or degenerate inputs."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @classmethod
    def default_for(cls, h: int, w: int) -> "CameraIntrinsics":
        """fx = fy = max(H, W) with the principal point at the grid center."""
        f = float(max(h, w))
        return cls(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)


def rotation_from_axis_angle(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation for a (possibly unnormalized) axis, angle in degrees."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0:
        raise GeometryError("rotation axis must be nonzero")
    a = a / n
    th = math.radians(angle_deg)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]], dtype=np.float64)
    return np.eye(3) + math.sin(th) * K + (1 - math.cos(th)) * (K @ K)


@dataclass(frozen=True)
class EditTransform:
    """A user edit: 2D translate/scale, camera-space rigid or scale, or removal.

    3D motions act on camera-space points; an optional pivot recenters them
    (rotate/scale about a world point instead of the camera origin).
    ``depth_source`` is either ``"file"`` or ``"constant:<meters>"``.
    """

    kind: str
    offset: tuple = (0.0, 0.0)            # translate2d, pixels
    scale2d: tuple = (1.0, 1.0)           # scale2d factors
    pivot2d: tuple = (0.0, 0.0)           # scale2d pivot, pixels
    rotation: tuple = ((1, 0, 0), (0, 1, 0), (0, 0, 1))  # rigid3d
    translation: tuple = (0.0, 0.0, 0.0)  # rigid3d, meters
    scale3d: tuple = (1.0, 1.0, 1.0)      # scale3d factors
    pivot3d: Optional[tuple] = None       # rigid3d/scale3d pivot, meters
    depth_source: str = f"constant:{DEFAULT_CONSTANT_DEPTH}"

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise GeometryError(f"unknown transform kind {self.kind!r}")
        if self.kind == "scale2d" and any(s <= 0 for s in self.scale2d):
            raise GeometryError("2D scale factors must be positive")
        if self.kind == "scale3d" and any(s <= 0 for s in self.scale3d):
            raise GeometryError("3D scale factors must be positive")
        if self.kind == "rigid3d":
            R = np.asarray(self.rotation, dtype=np.float64)
            if R.shape != (3, 3):
                raise GeometryError("rotation must be 3x3")
            if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
                raise GeometryError("rotation must be orthonormal with det +1")
        if not (
            self.depth_source == "file" or self.depth_source.startswith("constant:")
        ):
            raise GeometryError(f"bad depth_source {self.depth_source!r}")

    @property
    def is_2d(self) -> bool:
        return self.kind in _2D_KINDS

    @property
    def is_3d(self) -> bool:
        return self.kind in _3D_KINDS

    def constant_depth(self) -> Optional[float]:
        if self.depth_source.startswith("constant:"):
            d = float(self.depth_source.split(":", 1)[1])
            if d <= 0:
                raise GeometryError("constant depth must be positive")
            return d
        return None

    def affine3d(self) -> np.ndarray:
        """Camera-space motion as a 4x4 matrix (3D kinds only)."""
        if not self.is_3d:
            raise GeometryError(f"{self.kind} has no 3D affine form")
        A = np.eye(4, dtype=np.float64)
        if self.kind == "rigid3d":
            A[:3, :3] = np.asarray(self.rotation, dtype=np.float64)
            A[:3, 3] = np.asarray(self.translation, dtype=np.float64)
        else:
            A[:3, :3] = np.diag(np.asarray(self.scale3d, dtype=np.float64))
        if self.pivot3d is not None:
            c = np.asarray(self.pivot3d, dtype=np.float64)
            A[:3, 3] += c - A[:3, :3] @ c
        return A

    # JSON wire format: {"kind": ..., "params": {...}, "depth_source": ...}

    def to_json(self) -> dict:
        params: dict = {}
        if self.kind == "translate2d":
            params["offset"] = list(self.offset)
        elif self.kind == "scale2d":
            params["scale"] = list(self.scale2d)
            params["pivot"] = list(self.pivot2d)
        elif self.kind == "rigid3d":
            params["rotation"] = [list(r) for r in np.asarray(self.rotation).tolist()]
            params["translation"] = list(self.translation)
            if self.pivot3d is not None:
                params["pivot"] = list(self.pivot3d)
        elif self.kind == "scale3d":
            params["scale"] = list(self.scale3d)
            if self.pivot3d is not None:
                params["pivot"] = list(self.pivot3d)
        return {"kind": self.kind, "params": params, "depth_source": self.depth_source}

    @classmethod
    def from_json(cls, obj) -> "EditTransform":
        if isinstance(obj, str):
            obj = json.loads(obj)
        kind = obj.get("kind")
        params = obj.get("params", {}) or {}
        depth_source = obj.get("depth_source", f"constant:{DEFAULT_CONSTANT_DEPTH}")
        kwargs: dict = {"kind": kind, "depth_source": depth_source}
        if kind == "translate2d":
            kwargs["offset"] = tuple(params.get("offset", (0.0, 0.0)))
        elif kind == "scale2d":
            kwargs["scale2d"] = tuple(params.get("scale", (1.0, 1.0)))
            kwargs["pivot2d"] = tuple(params.get("pivot", (0.0, 0.0)))
        elif kind == "rigid3d":
            if "rotation" in params:
                kwargs["rotation"] = tuple(tuple(r) for r in params["rotation"])
            elif "axis" in params:
                R = rotation_from_axis_angle(params["axis"], params.get("angle_deg", 0.0))
                kwargs["rotation"] = tuple(tuple(r) for r in R.tolist())
            kwargs["translation"] = tuple(params.get("translation", (0.0, 0.0, 0.0)))
            if params.get("pivot") is not None:
                kwargs["pivot3d"] = tuple(params["pivot"])
        elif kind == "scale3d":
            kwargs["scale3d"] = tuple(params.get("scale", (1.0, 1.0, 1.0)))
            if params.get("pivot") is not None:
                kwargs["pivot3d"] = tuple(params["pivot"])
        return cls(**kwargs)


@dataclass
class EditField:
    """Per-pixel target coordinates plus validity (and depth for z-buffering).

    target[y, x] = (tx, ty) in pixel units; valid pixels satisfy
    0 <= tx < W and 0 <= ty < H and survive z-buffer occlusion when depth
    is present.
    """

    target: np.ndarray                 # (H, W, 2) float64, (x, y)
    valid: np.ndarray                  # (H, W) bool
    depth: Optional[np.ndarray] = None  # (H, W) transformed depth, float64

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.target.ndim != 3 or self.target.shape[2] != 2:
            raise GeometryError("field target must be (H, W, 2)")
        if self.valid.shape != self.target.shape[:2]:
            raise GeometryError("field valid mask shape mismatch")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != self.target.shape[:2]:
                raise GeometryError("field depth shape mismatch")

    @property
    def height(self) -> int:
        return self.target.shape[0]

    @property
    def width(self) -> int:
        return self.target.shape[1]

    def is_identity(self, tol: float = 0.0) -> bool:
        gx, gy = _pixel_grid(self.height, self.width)
        return (
            bool(self.valid.all())
            and np.allclose(self.target[:, :, 0], gx, atol=tol)
            and np.allclose(self.target[:, :, 1], gy, atol=tol)
        )


def _pixel_grid(h: int, w: int):
    gy, gx = np.mgrid[0:h, 0:w]
    return gx.astype(np.float64), gy.astype(np.float64)


def _round_half_up(a: np.ndarray) -> np.ndarray:
    return np.floor(a + 0.5).astype(np.int64)


def identity_field(h: int, w: int) -> EditField:
    gx, gy = _pixel_grid(h, w)
    return EditField(target=np.stack([gx, gy], axis=2), valid=np.ones((h, w), bool))


def removal_field(h: int, w: int) -> EditField:
    """A field with no destination: nothing splats anywhere."""
    gx, gy = _pixel_grid(h, w)
    return EditField(target=np.stack([gx, gy], axis=2), valid=np.zeros((h, w), bool))


def build_field_2d(transform: EditTransform, h: int, w: int) -> EditField:
    """Field for a 2D translate or scale; targets outside the grid are invalid."""
    if not transform.is_2d:
        raise GeometryError(f"build_field_2d got non-2D kind {transform.kind!r}")
    gx, gy = _pixel_grid(h, w)
    if transform.kind == "translate2d":
        tx = gx + transform.offset[0]
        ty = gy + transform.offset[1]
    else:
        sx, sy = transform.scale2d
        px, py = transform.pivot2d
        tx = px + sx * (gx - px)
        ty = py + sy * (gy - py)
    valid = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    return EditField(target=np.stack([tx, ty], axis=2), valid=valid)


def build_field_3d(
    transform: EditTransform,
    depth: np.ndarray,
    intrinsics: CameraIntrinsics,
) -> EditField:
    """Back-project each pixel at its depth, move it in camera space, re-project.

    Pixels that land behind the camera or outside the grid are invalid, and
    of several pixels contending for one target cell only the nearest one
    (smallest transformed depth) stays valid.
    """
    if not transform.is_3d:
        raise GeometryError(f"build_field_3d got non-3D kind {transform.kind!r}")
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 3:
        d = d[:, :, 0]
    if not np.all(np.isfinite(d)) or d.min() <= 0:
        raise GeometryError("depth must be finite and strictly positive")
    h, w = d.shape
    gx, gy = _pixel_grid(h, w)

    # rays = P^-1 [x, y, 1]; points = depth * rays
    X = d * (gx - intrinsics.cx) / intrinsics.fx
    Y = d * (gy - intrinsics.cy) / intrinsics.fy
    Z = d

    A = transform.affine3d()
    pts = np.stack([X, Y, Z], axis=2)
    moved = pts @ A[:3, :3].T + A[:3, 3]
    Zm = moved[:, :, 2]
    front = Zm > 1e-9

    tx = np.zeros((h, w))
    ty = np.zeros((h, w))
    np.divide(intrinsics.fx * moved[:, :, 0], Zm, out=tx, where=front)
    np.divide(intrinsics.fy * moved[:, :, 1], Zm, out=ty, where=front)
    tx = np.where(front, tx + intrinsics.cx, -1.0)
    ty = np.where(front, ty + intrinsics.cy, -1.0)

    valid = front & (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    field = EditField(target=np.stack([tx, ty], axis=2), valid=valid, depth=Zm)
    _apply_zbuffer_occlusion(field)
    return field


def _apply_zbuffer_occlusion(field: EditField) -> None:
    """Keep only the nearest source per rounded target cell valid (in place)."""
    if field.depth is None:
        return
    h, w = field.valid.shape
    tx = _round_half_up(field.target[:, :, 0])
    ty = _round_half_up(field.target[:, :, 1])
    ok = field.valid & (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    src = np.nonzero(ok.ravel())[0]
    if src.size == 0:
        return
    dest = ty.ravel()[src] * w + tx.ravel()[src]
    dz = field.depth.ravel()[src]
    # Descending depth, stable in row-major order: the final write per cell is
    # the nearest source, with later row-major sources winning depth ties.
    order = np.lexsort((np.arange(src.size), -dz))
    winner = np.full(h * w, -1, dtype=np.int64)
    winner[dest[order]] = src[order]
    keep = winner[winner >= 0]
    new_valid = np.zeros(h * w, dtype=bool)
    new_valid[keep] = True
    # Out-of-rounded-bounds sources keep their validity; splat drops them.
    field.valid = (new_valid.reshape(h, w)) | (field.valid & ~ok)


def build_field(
    transform: EditTransform,
    h: int,
    w: int,
    depth: Optional[np.ndarray] = None,
    intrinsics: Optional[CameraIntrinsics] = None,
) -> EditField:
    """Dispatch on transform kind; resolves constant-depth and default intrinsics."""
    if transform.kind == "identity":
        return identity_field(h, w)
    if transform.kind == "remove":
        return removal_field(h, w)
    if transform.is_2d:
        return build_field_2d(transform, h, w)
    if depth is None:
        const = transform.constant_depth()
        if const is None:
            raise GeometryError("3D transform requires a depth map or constant depth")
        depth = np.full((h, w), const, dtype=np.float64)
    if intrinsics is None:
        intrinsics = CameraIntrinsics.default_for(h, w)
    return build_field_3d(transform, depth, intrinsics)


# --- Splatting ----------------------------------------------------------


def _splat_core(values: np.ndarray, field: EditField, source_mask: Optional[np.ndarray] = None):
    """Forward-splat (H, W, K) values; returns (out, covered).

    Collisions: nearest depth when the field has one, else last writer in
    row-major order.  Uncovered destinations are zero.
    """
    h, w = field.valid.shape
    if values.shape[:2] != (h, w):
        raise GeometryError(
            f"signal {values.shape[:2]} does not match field {(h, w)}"
        )
    k = values.shape[2]
    tx = _round_half_up(field.target[:, :, 0])
    ty = _round_half_up(field.target[:, :, 1])
    ok = field.valid & (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    if source_mask is not None:
        ok = ok & source_mask
    out = np.zeros((h * w, k), dtype=values.dtype)
    covered = np.zeros(h * w, dtype=bool)
    src = np.nonzero(ok.ravel())[0]
    if src.size:
        dest = ty.ravel()[src] * w + tx.ravel()[src]
        if field.depth is not None:
            dz = field.depth.ravel()[src]
            order = np.lexsort((np.arange(src.size), -dz))
        else:
            order = np.arange(src.size)
        out[dest[order]] = values.reshape(-1, k)[src[order]]
        covered[dest] = True
    return out.reshape(h, w, k), covered.reshape(h, w)


def _splat_bilinear(values: np.ndarray, field: EditField,
                    source_mask: Optional[np.ndarray] = None):
    """Weight-accumulating bilinear splat: each source spreads over the four
    neighboring cells of its target; collisions average by weight.  Softer
    than nearest (no exact-copy identity), offered behind a flag for signals
    where aliasing matters more than exactness."""
    h, w = field.valid.shape
    k = values.shape[2]
    ok = field.valid.copy()
    if source_mask is not None:
        ok &= source_mask
    accum = np.zeros((h * w, k))
    wsum = np.zeros(h * w)
    src = np.nonzero(ok.ravel())[0]
    if src.size:
        tx = field.target[:, :, 0].ravel()[src]
        ty = field.target[:, :, 1].ravel()[src]
        x0 = np.floor(tx).astype(np.int64)
        y0 = np.floor(ty).astype(np.int64)
        fx, fy = tx - x0, ty - y0
        vals = values.reshape(-1, k)[src]
        for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                            (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
            xs, ys = x0 + dx, y0 + dy
            inb = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h) & (wgt > 0)
            dest = ys[inb] * w + xs[inb]
            np.add.at(accum, dest, wgt[inb, None] * vals[inb])
            np.add.at(wsum, dest, wgt[inb])
    covered = wsum > 1e-12
    out = np.zeros((h * w, k))
    out[covered] = accum[covered] / wsum[covered, None]
    return out.reshape(h, w, k), covered.reshape(h, w)


def splat(signal: np.ndarray, field: EditField, method: str = "nearest") -> np.ndarray:
    """Forward-warp a signal through the field; uncovered pixels are zero.

    ``method="nearest"`` (default) rounds targets to cells and resolves
    collisions deterministically; ``"bilinear"`` spreads each source over
    its four neighbors and averages collisions by weight.
    """
    sig = np.asarray(signal, dtype=np.float64)
    squeeze = sig.ndim == 2
    if squeeze:
        sig = sig[:, :, None]
    if method == "nearest":
        out, _ = _splat_core(sig, field)
    elif method == "bilinear":
        out, _ = _splat_bilinear(sig, field)
    else:
        raise GeometryError(f"unknown splat method {method!r}")
    return out[:, :, 0] if squeeze else out


def splat_with_coverage(signal: np.ndarray, field: EditField, source_mask=None):
    """Like :func:`splat` but also returns the covered-destination mask."""
    sig = np.asarray(signal, dtype=np.float64)
    squeeze = sig.ndim == 2
    if squeeze:
        sig = sig[:, :, None]
    if source_mask is not None:
        source_mask = np.asarray(source_mask, dtype=np.float64)
        if source_mask.ndim == 3:
            source_mask = source_mask[:, :, 0]
        source_mask = source_mask >= 0.5
    out, covered = _splat_core(sig, field, source_mask)
    return (out[:, :, 0] if squeeze else out), covered


def _shift_reduce(m: np.ndarray, pad_value: float, op) -> np.ndarray:
    """3x3 neighborhood reduce (max or min) with constant padding."""
    h, w = m.shape
    padded = np.full((h + 2, w + 2), pad_value, dtype=m.dtype)
    padded[1:-1, 1:-1] = m
    out = m.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out = op(out, padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w])
    return out


def _close3(m: np.ndarray) -> np.ndarray:
    """One pass of 3x3 morphological closing (dilate then erode)."""
    dil = _shift_reduce(m, 0.0, np.maximum)
    return _shift_reduce(dil, 1.0, np.minimum)


def transform_mask(mask: np.ndarray, field: EditField):
    """Splat a mask through the field.

    Returns (hard, soft): ``hard`` thresholded at 0.5, ``soft`` the raw splat
    values clipped to [0, 1].  Pixels no source reaches but that closing
    would fill (splat sparsity holes) are filled; pixels that did receive a
    source are never altered, so an identity field returns the mask
    unchanged.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, :, 0]
    raw, covered = _splat_core(m[:, :, None], field)
    raw = np.clip(raw[:, :, 0], 0.0, 1.0)
    soft = np.where(covered, raw, _close3(raw))
    hard = (soft >= 0.5).astype(np.float64)
    return hard, np.clip(soft, 0.0, 1.0)


@dataclass(frozen=True)
class MaskSet:
    """The mask algebra of one edit at one resolution."""

    m_obj: np.ndarray      # original object mask
    m_obj_t: np.ndarray    # transformed object mask (binary)
    m_obj_t_soft: np.ndarray
    m_disocc: np.ndarray   # vacated object pixels: m_obj AND NOT m_obj_t
    m_ne: np.ndarray       # non-editable: NOT (m_obj OR m_obj_t)
    m_bg: np.ndarray       # background: NOT m_obj


def mask_algebra(m_obj: np.ndarray, field: EditField) -> MaskSet:
    m = np.asarray(m_obj, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, :, 0]
    if m.shape != field.valid.shape:
        raise GeometryError("mask and field shapes differ")
    hard, soft = transform_mask(m, field)
    m_bin = (m >= 0.5).astype(np.float64)
    m_disocc = m_bin * (1.0 - hard)
    m_ne = (1.0 - np.maximum(m_bin, hard))
    m_bg = 1.0 - m_bin
    return MaskSet(m_obj=m_bin, m_obj_t=hard, m_obj_t_soft=soft,
                   m_disocc=m_disocc, m_ne=m_ne, m_bg=m_bg)


# --- Resampling to attention resolutions --------------------------------


def resample_field(field: EditField, h: int, w: int) -> EditField:
    """Rescale a field to a new grid: subsample sources, scale coordinates."""
    if h < 1 or w < 1:
        raise GeometryError("target size must be positive")
    H, W = field.valid.shape
    ys = (np.arange(h) * H) // h
    xs = (np.arange(w) * W) // w
    sub = field.target[np.ix_(ys, xs)].copy()
    sub[:, :, 0] *= w / W
    sub[:, :, 1] *= h / H
    valid = field.valid[np.ix_(ys, xs)].copy()
    depth = field.depth[np.ix_(ys, xs)].copy() if field.depth is not None else None
    out = EditField(target=sub, valid=valid, depth=depth)
    _apply_zbuffer_occlusion(out)
    return out


def resample_mask(mask: np.ndarray, h: int, w: int, soft: bool = False) -> np.ndarray:
    """Area-average a mask to (h, w); threshold at 0.5 unless ``soft``."""
    from .raster import area_downsample, nearest_upsample

    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, :, 0]
    H, W = m.shape
    if h <= H and w <= W:
        out = area_downsample(m, h, w)
    else:
        out = nearest_upsample(m, h, w)
    if soft:
        return np.clip(out, 0.0, 1.0)
    return (out >= 0.5).astype(np.float64)
