"""Per-level Siamese RPN blocks and the weighted layer-wise fusion.

Channel layout conventions (used everywhere downstream):

* classification maps have ``2k`` channels; anchor ``a`` owns channels
  ``(2a, 2a+1) = (background logit, target logit)``;
* regression maps have ``4k`` channels; anchor ``a`` owns channels
  ``4a..4a+3 = (dx, dy, dw, dh)``;
* flattened score ordering is row-major over the grid, then anchor index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import ConvNorm
from .correlation import dw_xcorr, up_xcorr
from .errors import ShapeError, UsageError
from .geometry import AnchorSet, BBox, decode_regression

__all__ = [
    "ResponsePair",
    "FusionWeights",
    "RpnBlock",
    "UpChannelBlock",
    "fuse",
    "positive_scores",
    "select_best",
]


@dataclass
class ResponsePair:
    """Classification (2k channels) and regression (4k channels) response maps.

    Tensors are either (C, H, W) or batched (B, C, H, W); cls and reg always
    share their spatial grid.
    """

    cls: torch.Tensor
    reg: torch.Tensor
    level: int | None = None

    def __post_init__(self):
        if self.cls.dim() != self.reg.dim() or self.cls.dim() not in (3, 4):
            raise ShapeError(
                f"cls/reg must both be 3D or 4D, got {tuple(self.cls.shape)} / {tuple(self.reg.shape)}"
            )
        if self.cls.shape[-2:] != self.reg.shape[-2:]:
            raise ShapeError(
                f"cls and reg must share the spatial grid: {tuple(self.cls.shape)} vs {tuple(self.reg.shape)}"
            )
        ck, rk = self.cls.shape[-3], self.reg.shape[-3]
        if ck % 2 != 0 or rk != 2 * ck:
            raise ShapeError(f"expected 2k/4k channels, got cls={ck}, reg={rk}")

    @property
    def num_anchors(self) -> int:
        return self.cls.shape[-3] // 2

    @property
    def spatial(self) -> tuple[int, int]:
        return self.cls.shape[-2], self.cls.shape[-1]


@dataclass(frozen=True)
class FusionWeights:
    """Raw (unnormalized, positive) per-level fusion weights.

    ``alpha`` weights the classification maps, ``beta`` the regression maps.
    Normalization divides by the group sum, so scaling a whole group by any
    c > 0 leaves the normalized weights unchanged.
    """

    alpha: tuple[float, ...]
    beta: tuple[float, ...]

    def __post_init__(self):
        for name, grp in (("alpha", self.alpha), ("beta", self.beta)):
            arr = np.asarray(grp, dtype=np.float64)
            if arr.ndim != 1 or len(arr) < 1:
                raise UsageError(f"{name} must be a non-empty vector")
            if not np.isfinite(arr).all() or (arr <= 0).any():
                raise UsageError(f"{name} weights must be positive and finite: {grp}")

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        a = np.asarray(self.alpha, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        return a / a.sum(), b / b.sum()


class RpnBlock(nn.Module):
    """One level's Siamese RPN block built around depthwise correlation.

    Template and search features pass non-shared 3x3 conv-norm adjust layers,
    correlate channel by channel, then per-task 1x1 conv-norm-relu fusion and
    a final 1x1 output convolution produce the 2k/4k maps.
    """

    def __init__(self, channels: int, k: int, adjust_kernel: int = 3, fusion_kernel: int = 1):
        super().__init__()
        self.k = k
        self.adjust_z = ConvNorm(channels, channels, adjust_kernel)
        self.adjust_x = ConvNorm(channels, channels, adjust_kernel)
        self.cls_fuse = ConvNorm(channels, channels, fusion_kernel)
        self.reg_fuse = ConvNorm(channels, channels, fusion_kernel)
        self.cls_out = nn.Conv2d(channels, 2 * k, 1)
        self.reg_out = nn.Conv2d(channels, 4 * k, 1)
        self.act = nn.ReLU(inplace=True)

    def correlate(self, zf: torch.Tensor, xf: torch.Tensor) -> torch.Tensor:
        return dw_xcorr(self.adjust_z(zf), self.adjust_x(xf))

    def forward(self, zf: torch.Tensor, xf: torch.Tensor, level: int | None = None) -> ResponsePair:
        corr = self.correlate(zf, xf)
        cls = self.cls_out(self.act(self.cls_fuse(corr)))
        reg = self.reg_out(self.act(self.reg_fuse(corr)))
        return ResponsePair(cls=cls, reg=reg, level=level)


class DetectorBlock(nn.Module):
    """Template-free twin of :class:`RpnBlock` for the bias simulation.

    The Siamese template kernel is replaced by a learned static depthwise
    kernel, so the block scores positions from search features alone. With
    ``adjust_kernel`` 3 and a 5x5 static kernel the response grid matches the
    Siamese block built with a 7-cell template crop.
    """

    def __init__(self, channels: int, k: int, adjust_kernel: int = 3,
                 fusion_kernel: int = 1, static_kernel: int = 5):
        super().__init__()
        self.k = k
        self.adjust_x = ConvNorm(channels, channels, adjust_kernel)
        self.static_kernel = nn.Parameter(
            torch.randn(channels, 1, static_kernel, static_kernel) / static_kernel
        )
        self.cls_fuse = ConvNorm(channels, channels, fusion_kernel)
        self.reg_fuse = ConvNorm(channels, channels, fusion_kernel)
        self.cls_out = nn.Conv2d(channels, 2 * k, 1)
        self.reg_out = nn.Conv2d(channels, 4 * k, 1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, zf, xf: torch.Tensor, level: int | None = None) -> ResponsePair:
        del zf  # detection mode: no template branch
        x = self.adjust_x(xf)
        corr = torch.nn.functional.conv2d(x, self.static_kernel, groups=x.shape[1])
        cls = self.cls_out(self.act(self.cls_fuse(corr)))
        reg = self.reg_out(self.act(self.reg_fuse(corr)))
        return ResponsePair(cls=cls, reg=reg, level=level)


class UpChannelBlock(nn.Module):
    """Up-channel correlation head: heavy raise convolutions on the template branch."""

    def __init__(self, channels: int, k: int, raise_kernel: int = 3):
        super().__init__()
        self.k = k
        self.raise_cls = nn.Conv2d(channels, 2 * k * channels, raise_kernel)
        self.raise_reg = nn.Conv2d(channels, 4 * k * channels, raise_kernel)
        self.search_cls = nn.Conv2d(channels, channels, raise_kernel)
        self.search_reg = nn.Conv2d(channels, channels, raise_kernel)
        self.reg_adjust = nn.Conv2d(4 * k, 4 * k, 1)

    def forward(self, zf: torch.Tensor, xf: torch.Tensor, level: int | None = None) -> ResponsePair:
        cls = up_xcorr(zf, self.search_cls(xf), self.raise_cls.weight, self.raise_cls.bias)
        reg = up_xcorr(zf, self.search_reg(xf), self.raise_reg.weight, self.raise_reg.bias)
        reg = self.reg_adjust(reg)
        return ResponsePair(cls=cls, reg=reg, level=level)


def _weight_vectors(weights, n: int):
    if isinstance(weights, FusionWeights):
        a, b = weights.normalized()
    else:
        a, b = weights
    if len(a) != n or len(b) != n:
        raise ShapeError(f"need {n} weights per group, got {len(a)}/{len(b)}")
    return a, b


def _weighted_sum(maps, weights):
    out = None
    for w, m in zip(weights, maps):
        if isinstance(w, float) and w == 0.0:
            continue  # keeps one-hot selection bitwise exact
        term = w * m
        out = term if out is None else out + term
    if out is None:
        raise UsageError("all fusion weights are zero")
    return out


def fuse(levels, weights) -> ResponsePair:
    """Weighted sum of per-level response pairs.

    ``weights`` is either a FusionWeights (normalized internally) or a pair
    ``(alpha_hat, beta_hat)`` of already-normalized vectors (floats or torch
    scalars; torch weights keep the operation differentiable). Classification
    and regression are combined with their own weight group.
    """
    if len(levels) < 1:
        raise UsageError("fuse needs at least one level")
    shapes = {(tuple(p.cls.shape), tuple(p.reg.shape)) for p in levels}
    if len(shapes) != 1:
        raise ShapeError(f"levels must share shapes, got {sorted(shapes)}")
    a, b = _weight_vectors(weights, len(levels))
    cls = _weighted_sum([p.cls for p in levels], a)
    reg = _weighted_sum([p.reg for p in levels], b)
    return ResponsePair(cls=cls, reg=reg)


def positive_scores(pair: ResponsePair) -> np.ndarray:
    """Per-anchor target probabilities, shape (H, W, k), softmax over the 2 classes."""
    cls = pair.cls
    if cls.dim() == 4:
        if cls.shape[0] != 1:
            raise UsageError("positive_scores expects a single response map")
        cls = cls[0]
    k = pair.num_anchors
    h, w = cls.shape[-2], cls.shape[-1]
    logits = cls.detach().reshape(k, 2, h, w)
    probs = torch.softmax(logits, dim=1)[:, 1]  # (k, H, W)
    return probs.permute(1, 2, 0).numpy().astype(np.float64)


def select_best(fused: ResponsePair, anchors: AnchorSet) -> tuple[tuple[int, int, int], float, BBox]:
    """Raw argmax over per-anchor target probabilities, decoded to a box.

    Ties break toward the lowest flat index (row-major over the grid, then
    anchor). Penalty/window reweighting is the tracker's job, not done here.
    """
    h, w = fused.spatial
    k = fused.num_anchors
    if anchors.grid != (h, w) or anchors.k != k:
        raise ShapeError(
            f"anchors {anchors.grid}x{anchors.k} do not match responses {(h, w)}x{k}"
        )
    scores = positive_scores(fused)
    flat = int(np.argmax(scores))  # first occurrence = lowest flat index
    i, j, a = np.unravel_index(flat, scores.shape)
    reg = fused.reg
    if reg.dim() == 4:
        reg = reg[0]
    delta = reg[4 * a:4 * a + 4, i, j].detach().numpy().astype(np.float64)
    box = decode_regression(anchors.boxes[i, j, a], delta)
    return (int(i), int(j), int(a)), float(scores[i, j, a]), BBox(*box.tolist())
