"""Inference: initialize on frame one, then per-frame penalized selection.

The template is cropped with the standard context rule (side
``sqrt((w + c)(h + c))`` with ``c = context_fraction * (w + h)``), embedded
once, and cached; it is never updated during a run. Each step crops the
search region around the previous center, scores all anchors, reweights by
the scale/ratio-change penalty and the cosine window, decodes the best
anchor, and smooths the size update.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import cv2
import numpy as np
import torch

from .errors import ConfigError, UsageError
from .geometry import AnchorSet, BBox, decode_regression
from .model import SiamModel
from .rpn_head import fuse, positive_scores

__all__ = ["TrackerConfig", "TrackerState", "Tracker", "init", "track_step", "crop_and_resize", "context_side"]


@dataclass(frozen=True)
class TrackerConfig:
    template_size: int = 127
    search_size: int = 255
    context_fraction: float = 0.5
    window_influence: float = 0.4
    penalty_k: float = 0.04
    size_lr: float = 0.3

    def __post_init__(self):
        if self.search_size <= self.template_size:
            raise ConfigError("search_size must exceed template_size")
        if self.template_size % 2 == 0 or self.search_size % 2 == 0:
            raise ConfigError("patch sizes must be odd so grids center cleanly")
        if not 0 <= self.window_influence <= 1:
            raise ConfigError(f"window_influence must be in [0, 1], got {self.window_influence}")
        if self.penalty_k < 0:
            raise ConfigError(f"penalty_k must be >= 0, got {self.penalty_k}")
        if not 0 < self.size_lr <= 1:
            raise ConfigError(f"size_lr must be in (0, 1], got {self.size_lr}")
        for name in ("context_fraction", "window_influence", "penalty_k", "size_lr"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")

    @classmethod
    def desk(cls, **overrides) -> "TrackerConfig":
        """Desk-scale patches; size smoothing recalibrated for the small grid."""
        overrides.setdefault("size_lr", 0.15)
        return cls(template_size=63, search_size=127, **overrides)


def context_side(w: float, h: float, context_fraction: float) -> float:
    """Square crop side for a box with context: sqrt((w + c)(h + c)), c = cf*(w+h)."""
    c = context_fraction * (w + h)
    return math.sqrt((w + c) * (h + c))


def crop_and_resize(frame: np.ndarray, center: tuple[float, float], side: int, out_size: int):
    """Integer-window square crop with per-channel mean fill, bilinear resize.

    The window of ``side`` pixels starts at ``round(center - side/2)``. When
    the window lies fully inside the frame and ``side == out_size`` the crop
    is returned as-is (bitwise identity with the frame content).
    """
    if side <= 0:
        raise UsageError(f"crop side must be positive, got {side}")
    side = int(side)
    h, w = frame.shape[:2]
    x0 = int(math.floor(center[0] - side / 2.0 + 0.5))
    y0 = int(math.floor(center[1] - side / 2.0 + 0.5))
    x1, y1 = x0 + side, y0 + side

    if frame.ndim == 2:
        mean = frame.mean(dtype=np.float64)
        patch = np.full((side, side), mean, dtype=frame.dtype)
    else:
        mean = frame.mean(axis=(0, 1), dtype=np.float64)
        patch = np.empty((side, side, frame.shape[2]), dtype=frame.dtype)
        patch[:] = mean.astype(frame.dtype)

    sx0, sy0 = max(0, x0), max(0, y0)
    sx1, sy1 = min(w, x1), min(h, y1)
    if sx1 > sx0 and sy1 > sy0:
        patch[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = frame[sy0:sy1, sx0:sx1]
    if side == out_size:
        return patch
    return cv2.resize(patch, (out_size, out_size), interpolation=cv2.INTER_LINEAR)


@dataclass
class TrackerState:
    """Mutable per-target tracking state; template features are never updated."""

    template_feats: dict[int, torch.Tensor]
    box: BBox
    window: np.ndarray
    anchors: AnchorSet
    cfg: TrackerConfig
    frame_count: int = 0


def _cosine_window(size: int) -> np.ndarray:
    han = np.hanning(size)
    return np.outer(han, han)


def init(frame: np.ndarray, box: BBox, model: SiamModel, cfg: TrackerConfig) -> TrackerState:
    """Build tracking state from the first frame and its target box."""
    if box.w < 2 or box.h < 2:
        raise UsageError(f"degenerate init box: {box}")
    if not (0 <= box.cx < frame.shape[1] and 0 <= box.cy < frame.shape[0]):
        raise UsageError(f"init box center {box.cx, box.cy} outside the frame")
    model.eval()
    s_z = max(2, int(round(context_side(box.w, box.h, cfg.context_fraction))))
    z_patch = crop_and_resize(frame, (box.cx, box.cy), s_z, cfg.template_size)
    with torch.no_grad():
        zf = model.template(model.to_input_batch([z_patch]))
    m = model.response_size(cfg.search_size)
    return TrackerState(
        template_feats=zf,
        box=box,
        window=_cosine_window(m),
        anchors=model.anchors_for(cfg.search_size),
        cfg=cfg,
    )


def _change(r: np.ndarray) -> np.ndarray:
    return np.maximum(r, 1.0 / r)


def _padded_scale(w, h):
    pad = (w + h) * 0.5
    return np.sqrt((w + pad) * (h + pad))


def track_step(state: TrackerState, frame: np.ndarray, model: SiamModel) -> tuple[BBox, float]:
    """Track one frame: returns the new box estimate and its raw score."""
    cfg = state.cfg
    box = state.box
    s_z = context_side(box.w, box.h, cfg.context_fraction)
    s_x = max(2, int(round(s_z * cfg.search_size / cfg.template_size)))
    scale = cfg.search_size / s_x

    x_patch = crop_and_resize(frame, (box.cx, box.cy), s_x, cfg.search_size)
    with torch.no_grad():
        xf = model.extract(model.to_input_batch([x_patch]))
        pairs = model.responses(state.template_feats, xf)
        alpha, beta = model.fusion_vectors()
        fused = fuse(pairs, (list(alpha), list(beta)))

    scores = positive_scores(fused)                      # (H, W, k)
    reg = fused.reg[0] if fused.reg.dim() == 4 else fused.reg
    k = fused.num_anchors
    h, w = fused.spatial
    deltas = reg.detach().numpy().astype(np.float64)
    deltas = deltas.reshape(k, 4, h, w).transpose(2, 3, 0, 1)  # (H, W, k, 4)
    boxes = decode_regression(state.anchors.boxes, deltas)     # search-patch coords

    # penalty for scale/ratio change relative to the current (patch-scaled) size
    prev_w, prev_h = box.w * scale, box.h * scale
    r_c = _change((prev_w / prev_h) / (boxes[..., 2] / boxes[..., 3]))
    s_c = _change(_padded_scale(boxes[..., 2], boxes[..., 3]) / _padded_scale(prev_w, prev_h))
    penalty = np.exp(-(r_c * s_c - 1.0) * cfg.penalty_k)

    pscore = penalty * scores
    pscore = pscore * (1 - cfg.window_influence) + state.window[..., None] * cfg.window_influence

    flat = int(np.argmax(pscore))
    i, j, a = np.unravel_index(flat, pscore.shape)
    chosen = boxes[i, j, a]
    raw_score = float(scores[i, j, a])

    patch_c = (cfg.search_size - 1) / 2.0
    cx = box.cx + (chosen[0] - patch_c) / scale
    cy = box.cy + (chosen[1] - patch_c) / scale
    new_w = chosen[2] / scale
    new_h = chosen[3] / scale

    lr = cfg.size_lr
    width = box.w * (1 - lr) + new_w * lr
    height = box.h * (1 - lr) + new_h * lr

    fh, fw = frame.shape[:2]
    cx = min(max(cx, 0.0), fw - 1.0)
    cy = min(max(cy, 0.0), fh - 1.0)
    width = min(max(width, 2.0), float(fw))
    height = min(max(height, 2.0), float(fh))

    state.box = BBox(cx, cy, width, height)
    state.frame_count += 1
    return state.box, raw_score


class Tracker:
    """Convenience wrapper bundling a model, a config, and one target's state."""

    def __init__(self, model: SiamModel, cfg: TrackerConfig):
        self.model = model
        self.cfg = cfg
        self.state: TrackerState | None = None

    def init(self, frame: np.ndarray, box: BBox) -> BBox:
        self.state = init(frame, box, self.model, self.cfg)
        return box

    def step(self, frame: np.ndarray) -> tuple[BBox, float]:
        if self.state is None:
            raise UsageError("tracker not initialized; call init() first")
        return track_step(self.state, frame, self.model)

    def fork(self) -> "Tracker":
        """Deep-copy the state (for determinism tests); the model stays shared."""
        t = Tracker(self.model, self.cfg)
        t.state = copy.deepcopy(self.state)
        return t
