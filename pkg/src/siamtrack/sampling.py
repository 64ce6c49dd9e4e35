"""Spatial-aware pair sampling, anchor label assignment, and synthetic data.

The pair sampler implements the uniform-shift placement that training relies
on: the template patch is always target-centered, while the target's center
inside the search patch is drawn uniformly from
``[-shift_range, +shift_range]^2`` (in search-patch pixels). Training crops
use an exact subpixel affine warp so the stated placement holds to float
precision; the tracker's integer-window crop lives in :mod:`siamtrack.tracker`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import ConfigError, DatasetError, UsageError
from .geometry import AnchorSet, BBox, encode_regression, iou, save_boxes

__all__ = [
    "SynthSpec",
    "TrainSample",
    "LabelAssignment",
    "synth_sequence",
    "sample_pair",
    "assign_labels",
    "PairSampler",
    "write_sequence",
    "make_dataset",
]


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic sequence recipe: textured target on a noisy canvas.

    The target performs a Gaussian random walk (per-axis step ``walk_sigma``)
    with an optional constant drift ``velocity``; distractors are independently
    moving textured rectangles rendered under the target.
    """

    canvas: int = 160
    object_min: float = 22.0
    object_max: float = 44.0
    aspect_min: float = 0.65
    aspect_max: float = 1.55
    walk_sigma: float = 2.0
    velocity: tuple[float, float] = (0.0, 0.0)
    distractors: int = 2
    twin_distractors: bool = False  # distractors reuse the target's texture and size
    noise: float = 0.06
    texture_cells: int = 5
    blur_sigma: float = 0.0  # optical blur of rendered frames, pixels

    def __post_init__(self):
        if self.canvas < 32:
            raise ConfigError(f"canvas too small: {self.canvas}")
        if not (0 < self.object_min <= self.object_max):
            raise ConfigError(f"bad object size range ({self.object_min}, {self.object_max})")
        if self.object_max * math.sqrt(self.aspect_max) >= self.canvas - 4:
            raise ConfigError("objects do not fit the canvas")
        if not (0 < self.aspect_min <= self.aspect_max):
            raise ConfigError(f"bad aspect range ({self.aspect_min}, {self.aspect_max})")
        if self.walk_sigma < 0 or self.noise < 0 or self.distractors < 0:
            raise ConfigError("walk_sigma, noise, and distractors must be non-negative")
        if self.texture_cells < 2:
            raise ConfigError("texture_cells must be >= 2")
        if self.blur_sigma < 0:
            raise ConfigError("blur_sigma must be >= 0")


@dataclass(frozen=True)
class TrainSample:
    """One training pair: template patch, search patch, target box in search coords."""

    z: np.ndarray
    x: np.ndarray
    gt: BBox
    shift_applied: tuple[float, float]


@dataclass
class LabelAssignment:
    """Per-anchor classes, regression targets, and the loss sampling mask.

    ``classes``: (H, W, k) int8 with 1 = positive, 0 = negative, -1 = ignore.
    ``mask``: anchors selected for the classification loss (positives capped,
    negatives subsampled). ``deltas``: (H, W, k, 4) regression targets, valid
    where ``classes == 1``. ``no_positive`` flags samples kept for
    negatives-only training.
    """

    classes: np.ndarray
    mask: np.ndarray
    deltas: np.ndarray
    no_positive: bool


class _Blob:
    """A textured rectangle with integer raster size and float center."""

    def __init__(self, rng: np.random.Generator, spec: SynthSpec, like: "_Blob | None" = None):
        if like is not None:
            # a twin: same texture and raster size, independent motion
            self.w, self.h, self.tile = like.w, like.h, like.tile
        else:
            size = rng.uniform(spec.object_min, spec.object_max)
            aspect = rng.uniform(spec.aspect_min, spec.aspect_max)
            self.w = max(4, int(round(size / math.sqrt(aspect))))
            self.h = max(4, int(round(size * math.sqrt(aspect))))
            cells = spec.texture_cells
            self.tile = rng.uniform(0.0, 1.0, size=(cells, cells)).astype(np.float32)
        self.texture = cv2.resize(self.tile, (self.w, self.h), interpolation=cv2.INTER_NEAREST)
        lo = 2.0 + self.w / 2.0, 2.0 + self.h / 2.0
        hi = spec.canvas - 2.0 - self.w / 2.0, spec.canvas - 2.0 - self.h / 2.0
        self.cx = rng.uniform(lo[0], hi[0])
        self.cy = rng.uniform(lo[1], hi[1])
        self._bounds = (lo, hi)

    def step(self, rng: np.random.Generator, spec: SynthSpec):
        (lx, ly), (hx, hy) = self._bounds
        self.cx = min(max(self.cx + spec.velocity[0] + rng.normal(0.0, spec.walk_sigma), lx), hx)
        self.cy = min(max(self.cy + spec.velocity[1] + rng.normal(0.0, spec.walk_sigma), ly), hy)

    def box(self) -> BBox:
        return BBox(self.cx, self.cy, float(self.w), float(self.h))

    def paint(self, canvas: np.ndarray):
        x0 = int(round(self.cx - self.w / 2.0))
        y0 = int(round(self.cy - self.h / 2.0))
        x1, y1 = x0 + self.w, y0 + self.h
        sx0, sy0 = max(0, -x0), max(0, -y0)
        x0, y0 = max(0, x0), max(0, y0)
        x1, y1 = min(canvas.shape[1], x1), min(canvas.shape[0], y1)
        if x1 > x0 and y1 > y0:
            canvas[y0:y1, x0:x1] = self.texture[sy0:sy0 + (y1 - y0), sx0:sx0 + (x1 - x0)]


def synth_sequence(spec: SynthSpec, length: int, rng_seed: int) -> tuple[np.ndarray, list[BBox]]:
    """Generate ``length`` frames plus per-frame ground truth, deterministic under seed.

    Returns (frames, boxes) with frames a (T, H, W) uint8 array.
    """
    if length < 1:
        raise UsageError(f"length must be >= 1, got {length}")
    rng = np.random.default_rng(rng_seed)
    target = _Blob(rng, spec)
    distractors = []
    for _ in range(spec.distractors):
        like = target if spec.twin_distractors else None
        for _attempt in range(50):
            d = _Blob(rng, spec, like=like)
            if iou(d.box(), target.box()) == 0.0:
                break
        distractors.append(d)

    frames = np.empty((length, spec.canvas, spec.canvas), dtype=np.uint8)
    boxes = []
    for t in range(length):
        if t > 0:
            target.step(rng, spec)
            for d in distractors:
                d.step(rng, spec)
        canvas = 0.5 + spec.noise * rng.standard_normal((spec.canvas, spec.canvas)).astype(np.float32)
        for d in distractors:
            d.paint(canvas)
        target.paint(canvas)
        if spec.blur_sigma > 0:
            canvas = cv2.GaussianBlur(canvas, (0, 0), spec.blur_sigma)
        frames[t] = np.clip(canvas * 255.0, 0, 255).astype(np.uint8)
        boxes.append(target.box())
    return frames, boxes


def _warp_crop(frame: np.ndarray, center: tuple[float, float], side: float, out_size: int) -> np.ndarray:
    """Exact subpixel square crop + bilinear resize, mean fill outside the frame."""
    scale = out_size / side
    x0 = center[0] - side / 2.0
    y0 = center[1] - side / 2.0
    m = np.array([
        [scale, 0.0, (0.5 - x0) * scale - 0.5],
        [0.0, scale, (0.5 - y0) * scale - 0.5],
    ], dtype=np.float64)
    fill = float(frame.mean()) if frame.ndim == 2 else tuple(float(v) for v in frame.mean(axis=(0, 1)))
    return cv2.warpAffine(
        frame, m, (out_size, out_size),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=fill,
    )


def _context_side(w: float, h: float, context_fraction: float) -> float:
    c = context_fraction * (w + h)
    return math.sqrt((w + c) * (h + c))


def _patch_extent_fraction(aspect: float, context_fraction: float) -> float:
    """Taller-side extent of an aspect-``a`` box as a fraction of its context crop."""
    sa = math.sqrt(aspect)
    c = context_fraction * (sa + 1.0 / sa)
    return sa / math.sqrt((sa + c) * (1.0 / sa + c))


def sample_pair(
    source,
    shift_range: float,
    scale_jitter: float,
    rng: np.random.Generator,
    *,
    template_size: int = 63,
    search_size: int = 127,
    context_fraction: float = 0.5,
    frame_gap: int = 1,
) -> TrainSample:
    """Draw one training pair with uniform target placement in the search patch.

    ``source`` is either a SynthSpec (a fresh two-frame micro-sequence is
    generated) or an existing ``(frames, boxes)`` sequence (two nearby frames
    are picked). The template is cropped target-centered with the usual
    context rule; the search crop is positioned so that the target center
    lands at ``patch_center + offset`` with offset uniform over
    ``[-shift_range, shift_range]^2`` exactly, via subpixel warping.
    """
    if shift_range < 0:
        raise ConfigError(f"shift_range must be >= 0, got {shift_range}")
    if not 0 <= scale_jitter < 1:
        raise ConfigError(f"scale_jitter must be in [0, 1), got {scale_jitter}")
    if shift_range + 2 > (search_size - 1) / 2.0:
        raise ConfigError(
            f"shift_range {shift_range} too large for a {search_size}px search patch"
        )

    if isinstance(source, SynthSpec):
        frames, boxes = synth_sequence(source, 2, int(rng.integers(0, 2 ** 62)))
        fz, bz, fx, bx = frames[0], boxes[0], frames[1], boxes[1]
    else:
        frames, boxes = source
        t = int(rng.integers(0, len(frames)))
        t2 = min(t + int(rng.integers(0, frame_gap + 1)), len(frames) - 1)
        fz, bz, fx, bx = frames[t], boxes[t], frames[t2], boxes[t2]

    s_z = _context_side(bz.w, bz.h, context_fraction)
    z = _warp_crop(fz, (bz.cx, bz.cy), s_z, template_size)

    offset = rng.uniform(-shift_range, shift_range, size=2) if shift_range > 0 else np.zeros(2)
    jitter = math.exp(rng.uniform(math.log(1 - scale_jitter), math.log(1 + scale_jitter))) \
        if scale_jitter > 0 else 1.0
    s_zx = _context_side(bx.w, bx.h, context_fraction)
    s_x = s_zx * (search_size / template_size) * jitter
    scale = search_size / s_x
    crop_center = (bx.cx - offset[0] / scale, bx.cy - offset[1] / scale)
    x = _warp_crop(fx, crop_center, s_x, search_size)

    patch_c = (search_size - 1) / 2.0
    gt = BBox(patch_c + offset[0], patch_c + offset[1], bx.w * scale, bx.h * scale)
    x0, y0, x1, y1 = gt.to_corners()
    if x0 < 0 or y0 < 0 or x1 > search_size - 1 or y1 > search_size - 1:
        raise ConfigError(
            f"sampled target {gt} does not fit the {search_size}px search patch; "
            "reduce shift_range or the object size range"
        )
    return TrainSample(z=z, x=x, gt=gt, shift_applied=(float(offset[0]), float(offset[1])))


def assign_labels(
    anchors: AnchorSet,
    gt: BBox,
    pos_thr: float = 0.6,
    neg_thr: float = 0.3,
    *,
    max_pos: int = 16,
    neg_ratio: int = 3,
    rng: np.random.Generator | None = None,
) -> LabelAssignment:
    """Classify anchors against ``gt`` by IoU and build the loss sampling mask.

    Positives (IoU >= pos_thr) are capped at ``max_pos``; negatives
    (IoU <= neg_thr) are subsampled to ``neg_ratio`` per kept positive
    (``neg_ratio * max_pos`` when there is no positive anchor). Anchors in
    between are ignored. Deterministic given the rng state.
    """
    if not pos_thr > neg_thr:
        raise ConfigError(f"pos_thr must exceed neg_thr, got {pos_thr} <= {neg_thr}")
    rng = rng or np.random.default_rng(0)
    h, w = anchors.grid
    k = anchors.k
    overlaps = iou(anchors.flat, gt.to_array())
    classes = np.full(h * w * k, -1, dtype=np.int8)
    classes[overlaps <= neg_thr] = 0
    classes[overlaps >= pos_thr] = 1

    pos_idx = np.flatnonzero(classes == 1)
    neg_idx = np.flatnonzero(classes == 0)
    no_positive = len(pos_idx) == 0
    if len(pos_idx) > max_pos:
        pos_keep = rng.permutation(pos_idx)[:max_pos]
    else:
        pos_keep = pos_idx
    n_neg = neg_ratio * (len(pos_keep) if len(pos_keep) else max_pos)
    if len(neg_idx) > n_neg:
        neg_keep = rng.permutation(neg_idx)[:n_neg]
    else:
        neg_keep = neg_idx

    mask = np.zeros(h * w * k, dtype=bool)
    mask[pos_keep] = True
    mask[neg_keep] = True

    deltas = np.zeros((h * w * k, 4), dtype=np.float64)
    if len(pos_idx):
        deltas[pos_idx] = encode_regression(anchors.flat[pos_idx], gt.to_array())

    return LabelAssignment(
        classes=classes.reshape(h, w, k),
        mask=mask.reshape(h, w, k),
        deltas=deltas.reshape(h, w, k, 4),
        no_positive=no_positive,
    )


class PairSampler:
    """Deterministic stream of TrainSamples drawn from a SynthSpec."""

    def __init__(
        self,
        spec: SynthSpec,
        *,
        shift_range: float,
        scale_jitter: float = 0.05,
        template_size: int = 63,
        search_size: int = 127,
        context_fraction: float = 0.5,
        seed: int = 0,
    ):
        self.spec = spec
        self.shift_range = shift_range
        self.scale_jitter = scale_jitter
        self.template_size = template_size
        self.search_size = search_size
        self.context_fraction = context_fraction
        self.rng = np.random.default_rng(seed)
        # worst-case resized target half-extent over the spec's aspect range;
        # beyond this the in-patch ground-truth contract cannot hold
        frac = max(
            _patch_extent_fraction(spec.aspect_max, context_fraction),
            _patch_extent_fraction(1.0 / spec.aspect_min, context_fraction),
        )
        half = 0.5 * frac * template_size / max(1e-9, 1.0 - scale_jitter)
        if shift_range + half > (search_size - 1) / 2.0:
            raise ConfigError(
                f"shift_range {shift_range} too large: worst-case target half-extent "
                f"{half:.1f}px does not fit a {search_size}px search patch"
            )

    def sample(self) -> TrainSample:
        return sample_pair(
            self.spec,
            self.shift_range,
            self.scale_jitter,
            self.rng,
            template_size=self.template_size,
            search_size=self.search_size,
            context_fraction=self.context_fraction,
        )


def write_sequence(seq_dir, frames: np.ndarray, boxes) -> None:
    """Materialize one sequence: numbered PNG frames plus groundtruth.txt."""
    seq_dir = Path(seq_dir)
    seq_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        if not cv2.imwrite(str(seq_dir / f"{t:06d}.png"), frame):
            raise DatasetError(f"failed to write frame {t} under {seq_dir}")
    save_boxes(seq_dir / "groundtruth.txt", boxes)


def make_dataset(root, spec: SynthSpec, sequences: int, frames: int, seed: int = 0) -> list[Path]:
    """Write ``sequences`` synthetic sequences under ``root``; returns their dirs."""
    root = Path(root)
    dirs = []
    for s in range(sequences):
        seq_frames, seq_boxes = synth_sequence(spec, frames, rng_seed=seed + s)
        seq_dir = root / f"seq_{s:03d}"
        write_sequence(seq_dir, seq_frames, seq_boxes)
        dirs.append(seq_dir)
    return dirs
