"""Loss composition, the optimization schedule, and the training loop.

The loss is softmax cross-entropy over sampled anchors plus smooth-L1 on the
regression offsets of positive anchors, ``total = cls + reg_weight * reg``.
The schedule holds a constant warmup rate, then decays geometrically from
``peak_lr`` to ``final_lr`` over the remaining epochs; backbone parameter
groups run at ``backbone_lr_scale`` times the scheduled rate and stay frozen
for the first ``freeze_backbone_epochs`` epochs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .errors import ConfigError, DivergenceError, UsageError
from .model import SiamModel
from .rpn_head import ResponsePair
from .sampling import LabelAssignment, assign_labels

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "smooth_l1",
    "total_loss",
    "lr_schedule",
    "train",
    "TrainResult",
    "grad_check",
    "GradCheckResult",
    "standard_grad_checks",
]

METRICS_HEADER = ("epoch", "step", "cls_loss", "reg_loss", "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    warmup_epochs: int = 5
    warmup_lr: float = 1e-3
    peak_lr: float = 5e-3
    final_lr: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    backbone_lr_scale: float = 0.1
    batch_size: int = 8
    steps_per_epoch: int = 50
    freeze_backbone_epochs: int = 5
    reg_weight: float = 1.0
    shift_range: float = 32.0
    scale_jitter: float = 0.05
    max_pos: int = 16
    neg_ratio: int = 3
    seed: int = 7
    grad_clip: float | None = None

    def __post_init__(self):
        for name in ("warmup_lr", "peak_lr", "final_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.warmup_lr > self.peak_lr:
            raise ConfigError("warmup_lr must not exceed peak_lr")
        if self.final_lr > self.peak_lr:
            raise ConfigError("final_lr must not exceed peak_lr (schedule must not increase)")
        if not 0 < self.backbone_lr_scale <= 1:
            raise ConfigError(f"backbone_lr_scale must be in (0, 1], got {self.backbone_lr_scale}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, steps_per_epoch, and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs)")
        if not 0 <= self.freeze_backbone_epochs <= self.epochs:
            raise ConfigError("freeze_backbone_epochs out of range")
        if self.reg_weight < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("reg_weight, momentum, and weight_decay must be >= 0")
        if self.max_pos < 1 or self.neg_ratio < 1:
            raise ConfigError("max_pos and neg_ratio must be >= 1")


@dataclass(frozen=True)
class LossBreakdown:
    """Classification/regression losses and their weighted total (torch scalars)."""

    cls_loss: torch.Tensor
    reg_loss: torch.Tensor
    total: torch.Tensor
    reg_weight: float = 1.0
    empty: bool = False  # true when no anchors were masked in (losses defined as zero)

    def floats(self) -> tuple[float, float, float]:
        return (
            float(self.cls_loss.detach()),
            float(self.reg_loss.detach()),
            float(self.total.detach()),
        )


def smooth_l1(x):
    """Elementwise smooth L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    if isinstance(x, torch.Tensor):
        ax = x.abs()
        return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def _stack_labels(labels) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if isinstance(labels, LabelAssignment):
        labels = [labels]
    classes = torch.from_numpy(np.stack([l.classes for l in labels]))
    mask = torch.from_numpy(np.stack([l.mask for l in labels]))
    deltas = torch.from_numpy(np.stack([l.deltas for l in labels]))
    return classes, mask, deltas


def total_loss(fused: ResponsePair, labels, reg_weight: float = 1.0) -> LossBreakdown:
    """Masked classification + positive-anchor regression loss over a batch.

    ``labels`` is one LabelAssignment or a list matching the batch dimension.
    Classification is averaged over masked anchors, regression over masked
    positives (per-anchor sum of the four smooth-L1 terms). With nothing
    masked in, both terms are defined as zero and ``empty`` is flagged.
    """
    classes, mask, deltas = _stack_labels(labels)
    cls, reg = fused.cls, fused.reg
    if cls.dim() == 3:
        cls, reg = cls.unsqueeze(0), reg.unsqueeze(0)
    b = cls.shape[0]
    k = fused.num_anchors
    h, w = fused.spatial
    if classes.shape != (b, h, w, k):
        raise UsageError(f"labels shaped {tuple(classes.shape)} do not match responses {(b, h, w, k)}")

    # (B, 2k, H, W) -> (B, H, W, k, 2); reg likewise to (..., 4)
    cls_logits = cls.reshape(b, k, 2, h, w).permute(0, 3, 4, 1, 2)
    reg_pred = reg.reshape(b, k, 4, h, w).permute(0, 3, 4, 1, 2)

    picked = mask & (classes >= 0)
    zero = cls.sum() * 0.0  # keeps the graph alive for degenerate batches
    if picked.any():
        logits = cls_logits[picked]
        targets = classes[picked].long()
        cls_loss = torch.nn.functional.cross_entropy(logits, targets)
    else:
        cls_loss = zero

    pos = mask & (classes == 1)
    if pos.any():
        err = reg_pred[pos] - deltas[pos].to(reg_pred.dtype)
        reg_loss = smooth_l1(err).sum(dim=-1).mean()
    else:
        reg_loss = zero

    total = cls_loss + reg_weight * reg_loss
    return LossBreakdown(cls_loss=cls_loss, reg_loss=reg_loss, total=total,
                         reg_weight=reg_weight, empty=not picked.any())


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 1-indexed epoch: constant warmup, then geometric decay."""
    if not 1 <= epoch <= cfg.epochs:
        raise UsageError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if epoch <= cfg.warmup_epochs:
        return cfg.warmup_lr
    decay_epochs = cfg.epochs - cfg.warmup_epochs
    if decay_epochs == 1:
        return cfg.peak_lr
    t = (epoch - cfg.warmup_epochs - 1) / (decay_epochs - 1)
    return cfg.peak_lr * (cfg.final_lr / cfg.peak_lr) ** t


@dataclass
class TrainResult:
    rows: list[tuple] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    initial_loss: float = math.nan  # mean total over the first epoch
    final_loss: float = math.nan    # mean total over the last epoch
    checkpoint_path: Path | None = None


def train(
    model: SiamModel,
    sampler,
    cfg: TrainConfig,
    *,
    metrics_path=None,
    checkpoint_path=None,
    diagnostics_path=None,
) -> TrainResult:
    """Run the full training loop; returns per-step metrics and epoch summaries.

    ``sampler`` provides ``.sample() -> TrainSample`` and a ``search_size``
    attribute (the anchor grid is derived from it). Loss rows are optionally
    streamed to ``metrics_path`` as CSV and the final model saved to
    ``checkpoint_path``. A non-finite total aborts with a diagnostic dump.
    """
    anchors = model.anchors_for(sampler.search_size)
    label_rng = np.random.default_rng([cfg.seed, 0xA55])
    opt = torch.optim.SGD(
        [
            {"params": model.backbone_parameters(), "lr": cfg.warmup_lr * cfg.backbone_lr_scale},
            {"params": [p for p in model.head_parameters()], "lr": cfg.warmup_lr},
        ],
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )

    result = TrainResult()
    model.train()
    frozen = None
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(epoch, cfg)
        opt.param_groups[0]["lr"] = lr * cfg.backbone_lr_scale
        opt.param_groups[1]["lr"] = lr
        want_frozen = epoch <= cfg.freeze_backbone_epochs
        if want_frozen != frozen:
            model.set_backbone_frozen(want_frozen)
            frozen = want_frozen

        epoch_totals = []
        for step in range(cfg.steps_per_epoch):
            samples = [sampler.sample() for _ in range(cfg.batch_size)]
            z = model.to_input_batch([s.z for s in samples])
            x = model.to_input_batch([s.x for s in samples])
            labels = [assign_labels(anchors, s.gt, max_pos=cfg.max_pos,
                                    neg_ratio=cfg.neg_ratio, rng=label_rng)
                      for s in samples]

            fused, _ = model(z, x)
            lb = total_loss(fused, labels, cfg.reg_weight)
            c, r, t = lb.floats()
            if not math.isfinite(t):
                dump = {
                    "epoch": epoch, "step": step, "cls_loss": c, "reg_loss": r,
                    "lr": lr, "recent": [row[4] for row in result.rows[-20:]],
                }
                if diagnostics_path is not None:
                    Path(diagnostics_path).write_text(json.dumps(dump, indent=2))
                raise DivergenceError(f"training diverged at epoch {epoch} step {step}: total={t}")

            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            result.rows.append((epoch, step, c, r, t, lr))
            epoch_totals.append(t)
        result.epoch_means.append(float(np.mean(epoch_totals)))

    result.initial_loss = result.epoch_means[0]
    result.final_loss = result.epoch_means[-1]
    model.eval()

    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        with open(metrics_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(METRICS_HEADER)
            for epoch, step, c, r, t, lr in result.rows:
                writer.writerow([epoch, step, f"{c:.6f}", f"{r:.6f}", f"{t:.6f}", f"{lr:.8f}"])
    if checkpoint_path is not None:
        checkpoint_path = Path(checkpoint_path)
        checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(checkpoint_path, model, meta={
            "epochs": cfg.epochs,
            "initial_loss": result.initial_loss,
            "final_loss": result.final_loss,
        })
        result.checkpoint_path = checkpoint_path
    return result


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int


def grad_check(fn, inputs, epsilon: float = 1e-5, max_coords: int = 32, seed: int = 0,
               skip=None) -> GradCheckResult:
    """Compare autograd against central finite differences on sampled coordinates.

    ``fn`` maps the given float64 tensors to a tensor of any shape; a fixed
    random projection turns it into a scalar. ``skip(input_index, flat_index,
    value)`` may exclude coordinates where ``fn`` is not differentiable; they
    are counted, not checked. The error is ``|a - n| / max(1, |a|, |n|)``.
    """
    gen = torch.Generator().manual_seed(seed)
    base = [t.detach().double().clone().requires_grad_(True) for t in inputs]
    out = fn(*base)
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(ts):
        return (fn(*ts) * proj).sum()

    loss = (out * proj).sum()
    grads = torch.autograd.grad(loss, base, allow_unused=False)

    rng = np.random.default_rng(seed)
    max_err, checked, skipped = 0.0, 0, 0
    for i, (t, g) in enumerate(zip(base, grads)):
        n = t.numel()
        idxs = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        flat = t.detach().reshape(-1)
        for idx in idxs:
            idx = int(idx)
            if skip is not None and skip(i, idx, float(flat[idx])):
                skipped += 1
                continue
            probe = [b.detach().clone() for b in base]
            pf = probe[i].reshape(-1)
            orig = float(pf[idx])
            pf[idx] = orig + epsilon
            up = float(scalar(probe))
            pf[idx] = orig - epsilon
            down = float(scalar(probe))
            pf[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            analytic = float(g.reshape(-1)[idx])
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            max_err = max(max_err, err)
            checked += 1
    return GradCheckResult(max_rel_error=max_err, checked=checked, skipped=skipped)


def standard_grad_checks(seed: int = 0) -> dict[str, GradCheckResult]:
    """The finite-difference battery: correlation ops, fusion, and the losses."""
    from . import correlation as corr
    from .geometry import AnchorConfig, make_anchors
    from .rpn_head import fuse as fuse_op

    gen = torch.Generator().manual_seed(seed)

    def randn(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    results = {}

    zf, xf = randn(2, 4, 4), randn(2, 8, 8)
    results["dw_xcorr"] = grad_check(corr.dw_xcorr, (zf, xf), seed=seed)

    zf, xf = randn(2, 5, 5), randn(2, 8, 8)
    w = randn(3 * 2, 2, 3, 3) / 4.0
    results["up_xcorr"] = grad_check(lambda z, x, w_: corr.up_xcorr(z, x, w_), (zf, xf, w), seed=seed)

    def fusion_fn(c3, c4, c5, r3, r4, r5, log_a, log_b):
        pairs = [ResponsePair(cls=c, reg=r) for c, r in ((c3, r3), (c4, r4), (c5, r5))]
        a = torch.softmax(log_a, dim=0)
        b = torch.softmax(log_b, dim=0)
        fused = fuse_op(pairs, (list(a), list(b)))
        return fused.cls.sum(dim=0) + fused.reg.sum(dim=0)

    maps = [randn(2, 3, 3) for _ in range(3)] + [randn(4, 3, 3) for _ in range(3)]
    results["fusion"] = grad_check(fusion_fn, (*maps, randn(3), randn(3)), seed=seed)

    x = randn(24) * 2.0
    results["smooth_l1"] = grad_check(
        smooth_l1, (x,), seed=seed,
        skip=lambda i, idx, v: abs(abs(v) - 1.0) < 1e-3,
    )

    anchors = make_anchors(AnchorConfig(ratios=(0.5, 1.0), scale=6.0, stride=2), (5, 5), (0.0, 0.0))
    from .geometry import BBox
    gt = BBox(4.0, 4.0, 6.0, 6.0)
    labels = assign_labels(anchors, gt, pos_thr=0.5, neg_thr=0.3, rng=np.random.default_rng(seed))

    def loss_fn(cls_map, reg_map):
        lb = total_loss(ResponsePair(cls=cls_map, reg=reg_map), labels, reg_weight=1.0)
        return lb.total

    cls_map, reg_map = randn(4, 5, 5), randn(8, 5, 5) * 0.3
    results["total_loss"] = grad_check(loss_fn, (cls_map, reg_map), seed=seed)
    return results
