"""Boxes, anchor grids, overlaps, and the anchor-offset regression parameterization.

Boxes are carried internally in center/size form ``(cx, cy, w, h)``; corner
form appears only at I/O boundaries (the ``x0,y0,w,h`` text format and the
corner helpers). Array-based functions accept ``(..., 4)`` float arrays in
center/size layout and broadcast like numpy ufuncs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

__all__ = [
    "BBox",
    "RegressionDelta",
    "AnchorConfig",
    "AnchorSet",
    "iou",
    "make_anchors",
    "centered_origin",
    "encode_regression",
    "decode_regression",
    "load_boxes",
    "save_boxes",
]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, center/size form, in pixels. Sides must be positive."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive: {vals}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @classmethod
    def from_xywh(cls, x0: float, y0: float, w: float, h: float) -> "BBox":
        """From top-left corner plus size (the on-disk text convention)."""
        return cls(x0 + w / 2.0, y0 + h / 2.0, w, h)

    def to_corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class RegressionDelta:
    """Anchor-relative box offsets: dx/dy in anchor widths/heights, dw/dh log-scale."""

    dx: float
    dy: float
    dw: float
    dh: float

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


def _as_boxes(b) -> np.ndarray:
    if isinstance(b, BBox):
        return b.to_array()
    arr = np.asarray(b, dtype=np.float64)
    if arr.shape[-1] != 4:
        raise ValueError(f"expected (..., 4) boxes, got shape {arr.shape}")
    return arr


def iou(a, b):
    """Intersection over union of two boxes.

    Accepts BBox instances or ``(..., 4)`` center/size arrays (broadcasting).
    Returns a float for scalar inputs, an array otherwise.
    """
    scalar = isinstance(a, BBox) and isinstance(b, BBox)
    a = _as_boxes(a)
    b = _as_boxes(b)
    ax0, ay0 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax1, ay1 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx0, by0 = b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2
    bx1, by1 = b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2

    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0.0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0.0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    out = inter / union
    return float(out) if scalar else out


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor shapes per response cell: one base scale, several aspect ratios.

    Aspect ratio r produces a box of width scale/sqrt(r) and height
    scale*sqrt(r), so every anchor has area scale**2.
    """

    ratios: tuple[float, ...] = (0.33, 0.5, 1.0, 2.0, 3.0)
    scale: float = 32.0
    stride: int = 4

    def __post_init__(self):
        if len(self.ratios) < 1:
            raise ConfigError("anchor config needs at least one aspect ratio")
        if any(not (r > 0 and math.isfinite(r)) for r in self.ratios):
            raise ConfigError(f"aspect ratios must be positive: {self.ratios}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ConfigError(f"anchor scale must be positive: {self.scale}")
        if not (isinstance(self.stride, int) and self.stride > 0):
            raise ConfigError(f"anchor stride must be a positive integer: {self.stride}")

    @property
    def k(self) -> int:
        """Anchors per response cell (single scale, so k = number of ratios)."""
        return len(self.ratios)


@dataclass(frozen=True)
class AnchorSet:
    """Anchor boxes laid over an (H, W) response grid, k anchors per cell.

    ``boxes[i, j, a]`` is the center/size box of anchor ``a`` at grid cell
    ``(i, j)``; cell centers sit at ``origin + stride * (j, i)``.
    """

    boxes: np.ndarray  # (H, W, k, 4) center/size
    origin: tuple[float, float]
    stride: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.boxes.shape[0], self.boxes.shape[1]

    @property
    def k(self) -> int:
        return self.boxes.shape[2]

    @property
    def flat(self) -> np.ndarray:
        """Row-major (cell-then-anchor) view of shape (H*W*k, 4)."""
        return self.boxes.reshape(-1, 4)

    def box_at(self, i: int, j: int, a: int) -> BBox:
        cx, cy, w, h = self.boxes[i, j, a]
        return BBox(cx, cy, w, h)


def make_anchors(cfg: AnchorConfig, grid: tuple[int, int], origin_offset=(0.0, 0.0)) -> AnchorSet:
    """Lay cfg's anchor shapes over an ``(H, W)`` response grid.

    ``origin_offset`` maps grid cell (0, 0) to image coordinates: a scalar is
    used for both axes, a pair is taken as ``(ox, oy)``.
    """
    h, w = grid
    if h < 1 or w < 1:
        raise ConfigError(f"grid must be at least 1x1, got {grid}")
    if np.isscalar(origin_offset):
        origin = (float(origin_offset), float(origin_offset))
    else:
        ox, oy = origin_offset
        origin = (float(ox), float(oy))

    ratios = np.asarray(cfg.ratios, dtype=np.float64)
    ws = cfg.scale / np.sqrt(ratios)
    hs = cfg.scale * np.sqrt(ratios)

    xs = origin[0] + cfg.stride * np.arange(w, dtype=np.float64)
    ys = origin[1] + cfg.stride * np.arange(h, dtype=np.float64)

    boxes = np.empty((h, w, cfg.k, 4), dtype=np.float64)
    boxes[..., 0] = xs[None, :, None]
    boxes[..., 1] = ys[:, None, None]
    boxes[..., 2] = ws[None, None, :]
    boxes[..., 3] = hs[None, None, :]
    return AnchorSet(boxes=boxes, origin=origin, stride=cfg.stride)


def centered_origin(patch_px: int, grid: tuple[int, int], stride: int) -> tuple[float, float]:
    """Origin that centers an (H, W) response grid on a square patch."""
    h, w = grid
    c = (patch_px - 1) / 2.0
    return (c - stride * (w - 1) / 2.0, c - stride * (h - 1) / 2.0)


def encode_regression(anchor, gt):
    """Offsets that map ``anchor`` onto ``gt``.

    dx = (gt.cx - a.cx) / a.w, dy = (gt.cy - a.cy) / a.h,
    dw = ln(gt.w / a.w),       dh = ln(gt.h / a.h).
    BBox inputs give a RegressionDelta; array inputs give an (..., 4) array.
    """
    scalar = isinstance(anchor, BBox) and isinstance(gt, BBox)
    a = _as_boxes(anchor)
    g = _as_boxes(gt)
    out = np.empty(np.broadcast_shapes(a.shape, g.shape), dtype=np.float64)
    out[..., 0] = (g[..., 0] - a[..., 0]) / a[..., 2]
    out[..., 1] = (g[..., 1] - a[..., 1]) / a[..., 3]
    out[..., 2] = np.log(g[..., 2] / a[..., 2])
    out[..., 3] = np.log(g[..., 3] / a[..., 3])
    if scalar:
        return RegressionDelta(*out.tolist())
    return out


def decode_regression(anchor, delta):
    """Exact algebraic inverse of :func:`encode_regression`.

    Raises NumericError when exp(dw) / exp(dh) overflows the float range.
    """
    scalar = isinstance(anchor, BBox) and isinstance(delta, RegressionDelta)
    a = _as_boxes(anchor)
    if isinstance(delta, RegressionDelta):
        d = delta.to_array()
    else:
        d = np.asarray(delta, dtype=np.float64)
        if d.shape[-1] != 4:
            raise ValueError(f"expected (..., 4) deltas, got shape {d.shape}")
    out = np.empty(np.broadcast_shapes(a.shape, d.shape), dtype=np.float64)
    out[..., 0] = a[..., 0] + d[..., 0] * a[..., 2]
    out[..., 1] = a[..., 1] + d[..., 1] * a[..., 3]
    with np.errstate(over="ignore"):
        out[..., 2] = a[..., 2] * np.exp(d[..., 2])
        out[..., 3] = a[..., 3] * np.exp(d[..., 3])
    if not np.isfinite(out[..., 2:]).all():
        raise NumericError("decoded box size overflowed the float range")
    if scalar:
        return BBox(*out.tolist())
    return out


def save_boxes(path, boxes) -> None:
    """Write boxes one per line as ``x0,y0,w,h`` (top-left corner form)."""
    lines = []
    for b in boxes:
        x0, y0, w, h = b.to_xywh() if isinstance(b, BBox) else BBox(*np.asarray(b, dtype=float)).to_xywh()
        lines.append(f"{x0:.4f},{y0:.4f},{w:.4f},{h:.4f}")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_boxes(path) -> list[BBox]:
    """Read a ``x0,y0,w,h`` per-line box file; frame order equals line order."""
    boxes = []
    with open(path, "r", encoding="ascii") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: expected 4 comma-separated values")
            x0, y0, w, h = (float(p) for p in parts)
            boxes.append(BBox.from_xywh(x0, y0, w, h))
    return boxes
