"""Sequence datasets, one-pass evaluation, and report emission.

OPE protocol: initialize on the first frame's ground truth, never reset.
The first frame counts as a perfect prediction. The success curve is the
fraction of frames with overlap >= t for t in {0.00, 0.05, ..., 1.00}; the
reported AUC is the mean success over the twenty positive thresholds (the
right-endpoint Riemann integral of the curve over [0, 1], so an always-
perfect tracker scores 1 and a never-overlapping tracker scores 0).
Precision is the fraction of frames whose center error is within a pixel
threshold (20 px at full scale, scaled proportionally for desk canvases).
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import DatasetError, UsageError
from .geometry import BBox, iou, load_boxes, save_boxes

__all__ = [
    "Sequence",
    "SequenceDataset",
    "load_dataset",
    "OPEResult",
    "eval_ope",
    "write_reports",
    "OracleTracker",
    "RandomBoxTracker",
    "configure_threads",
    "THRESHOLDS",
]

THRESHOLDS = np.round(np.arange(0, 21) * 0.05, 2)


def configure_threads() -> int:
    """Apply the SIAMTRACK_THREADS cap; unset means single-threaded determinism."""
    n = int(os.environ.get("SIAMTRACK_THREADS", "1") or "1")
    n = max(1, n)
    torch.set_num_threads(n)
    return n


@dataclass(frozen=True)
class Sequence:
    name: str
    frame_paths: tuple[Path, ...]
    boxes: tuple[BBox, ...]

    def load_frame(self, t: int) -> np.ndarray:
        img = cv2.imread(str(self.frame_paths[t]), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise DatasetError(f"unreadable frame: {self.frame_paths[t]}")
        return img


@dataclass(frozen=True)
class SequenceDataset:
    name: str
    sequences: tuple[Sequence, ...]


def load_dataset(root) -> SequenceDataset:
    """Load every sequence directory under ``root`` (frames + groundtruth.txt).

    Validates frame/ground-truth counts up front so failures happen before
    any tracking starts.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    seqs = []
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = tuple(sorted(seq_dir.glob("*.png")))
        gt_path = seq_dir / "groundtruth.txt"
        if not frames:
            raise DatasetError(f"{seq_dir} contains no frames")
        if not gt_path.exists():
            raise DatasetError(f"{seq_dir} missing groundtruth.txt")
        boxes = tuple(load_boxes(gt_path))
        if len(boxes) != len(frames):
            raise DatasetError(
                f"{seq_dir}: {len(frames)} frames but {len(boxes)} ground-truth boxes"
            )
        seqs.append(Sequence(name=seq_dir.name, frame_paths=frames, boxes=boxes))
    if not seqs:
        raise DatasetError(f"no sequences found under {root}")
    return SequenceDataset(name=root.name, sequences=tuple(seqs))


@dataclass
class OPEResult:
    thresholds: np.ndarray
    success: np.ndarray          # fraction of frames with IoU >= threshold
    auc: float
    precision: float
    precision_threshold: float
    mean_iou: float
    n_frames: int
    per_sequence: dict[str, list[BBox]] = field(default_factory=dict)


def _track_sequence(tracker_factory, seq: Sequence) -> list[BBox]:
    tracker = tracker_factory(seq)
    frame0 = seq.load_frame(0)
    first = tracker.init(frame0, seq.boxes[0])
    preds = [first if isinstance(first, BBox) else seq.boxes[0]]
    for t in range(1, len(seq.frame_paths)):
        box, _score = tracker.step(seq.load_frame(t))
        preds.append(box)
    return preds


def eval_ope(tracker_factory, dataset: SequenceDataset, *, precision_threshold: float = 20.0,
             workers: int | None = None) -> OPEResult:
    """One-pass evaluation over a dataset.

    ``tracker_factory(sequence)`` must build an object exposing
    ``init(frame, box)`` (returning its frame-0 estimate, normally the box
    itself) and ``step(frame) -> (BBox, score)``. Trackers are initialized on
    the first frame's ground truth and never reset. Sequences may be tracked
    concurrently (``workers`` > 1); aggregation over frames is
    order-independent.
    """
    if workers is None:
        workers = configure_threads()
    names = [s.name for s in dataset.sequences]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            all_preds = list(pool.map(lambda s: _track_sequence(tracker_factory, s),
                                      dataset.sequences))
    else:
        all_preds = [_track_sequence(tracker_factory, s) for s in dataset.sequences]

    per_sequence = dict(sorted(zip(names, all_preds)))
    ious, errors = [], []
    for seq in sorted(dataset.sequences, key=lambda s: s.name):
        preds = per_sequence[seq.name]
        for pred, gt in zip(preds, seq.boxes):
            ious.append(iou(pred, gt))
            errors.append(np.hypot(pred.cx - gt.cx, pred.cy - gt.cy))
    ious = np.asarray(ious)
    errors = np.asarray(errors)

    success = np.array([(ious >= t).mean() for t in THRESHOLDS])
    auc = float(success[1:].mean())
    return OPEResult(
        thresholds=THRESHOLDS.copy(),
        success=success,
        auc=auc,
        precision=float((errors <= precision_threshold).mean()),
        precision_threshold=precision_threshold,
        mean_iou=float(ious.mean()),
        n_frames=len(ious),
        per_sequence=per_sequence,
    )


def write_reports(result: OPEResult, out_dir, config_text: str = "") -> None:
    """Emit ope_report.csv, summary.txt, and per-sequence prediction files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ope_report.csv", "w") as f:
        f.write("threshold,success\n")
        for t, s in zip(result.thresholds, result.success):
            f.write(f"{t:.2f},{s:.6f}\n")
    cfg_hash = hashlib.sha256(config_text.encode("utf-8")).hexdigest()[:16]
    with open(out_dir / "summary.txt", "w") as f:
        f.write(f"config_hash: {cfg_hash}\n")
        f.write(f"precision_threshold_px: {result.precision_threshold:.2f}\n")
        f.write(f"frames: {result.n_frames}\n")
        f.write(f"auc: {result.auc:.6f}\n")
        f.write(f"precision: {result.precision:.6f}\n")
        f.write(f"mean_iou: {result.mean_iou:.6f}\n")
    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for name, preds in result.per_sequence.items():
        save_boxes(pred_dir / f"{name}.txt", preds)


class OracleTracker:
    """Test double that replays the ground truth it was built with."""

    def __init__(self, boxes):
        self.boxes = list(boxes)
        self.t = 0

    def init(self, frame, box):
        self.t = 0
        return self.boxes[0]

    def step(self, frame):
        self.t += 1
        if self.t >= len(self.boxes):
            raise UsageError("oracle ran out of boxes")
        return self.boxes[self.t], 1.0


class RandomBoxTracker:
    """Sanity-floor baseline emitting uniformly random boxes inside the frame."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def _draw(self, frame):
        h, w = frame.shape[:2]
        bw = self.rng.uniform(4, w / 2)
        bh = self.rng.uniform(4, h / 2)
        cx = self.rng.uniform(bw / 2, w - bw / 2)
        cy = self.rng.uniform(bh / 2, h - bh / 2)
        return BBox(cx, cy, bw, bh)

    def init(self, frame, box):
        return self._draw(frame)

    def step(self, frame):
        return self._draw(frame), 0.0
