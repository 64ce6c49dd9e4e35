"""Feature extractors and channel adapters.

Two variants share one stem (valid 3x3 stride-2 convolutions down to the
configured total stride):

* ``padded_residual``: residual stages with padding kept everywhere and
  unit spatial stride; the two deepest stages use dilated convolutions, so
  all three taps (levels 3, 4, 5) come out at the same resolution and the
  same effective stride.
* ``padfree_shallow``: plain valid convolutions, no padding anywhere; each
  stage shrinks the map by 2 cells. Exists to make the translation-
  equivariance contrast measurable, not to mirror any particular topology.

Canonical sizes (padded variant): a 127 px patch at stride 8 and a 63 px
patch at stride 4 both map to 15x15; 255/127 px search patches map to 31x31.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError

ALLOWED_STRIDES = (1, 2, 4, 8, 16, 32)
VARIANTS = ("padfree_shallow", "padded_residual")
LEVELS = (3, 4, 5)


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "padded_residual"
    in_channels: int = 1
    stem_channels: int = 8
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    dilations: tuple[int, int, int] = (1, 2, 4)
    adapter_dim: int = 32
    total_stride: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown backbone variant {self.variant!r}")
        if self.total_stride not in ALLOWED_STRIDES or self.total_stride < 2:
            raise ConfigError(f"total_stride must be one of {ALLOWED_STRIDES[1:]}, got {self.total_stride}")
        if len(self.stage_channels) != 3 or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be three positive ints: {self.stage_channels}")
        if self.stem_channels < 1 or self.in_channels < 1:
            raise ConfigError("stem_channels and in_channels must be positive")
        if self.adapter_dim < 1:
            raise ConfigError(f"adapter_dim must be positive, got {self.adapter_dim}")
        if len(self.dilations) != 3 or any(not (isinstance(d, int) and d >= 1) for d in self.dilations):
            raise ConfigError(f"dilations must be three integers >= 1: {self.dilations}")
        if self.variant == "padfree_shallow" and any(d != 1 for d in self.dilations):
            raise ConfigError(
                "inconsistent stride/dilation combination: the pad-free variant "
                f"uses valid unit-dilation stages, got dilations {self.dilations}"
            )

    @classmethod
    def desk(cls, variant: str = "padded_residual") -> "BackboneConfig":
        """Desk-scale defaults: stride 4, small channel counts."""
        dil = (1, 1, 1) if variant == "padfree_shallow" else (1, 2, 4)
        return cls(variant=variant, dilations=dil)

    @classmethod
    def paper_scale(cls, variant: str = "padded_residual") -> "BackboneConfig":
        """Full-scale geometry: stride 8, 256-dim adapters."""
        dil = (1, 1, 1) if variant == "padfree_shallow" else (1, 2, 4)
        return cls(
            variant=variant,
            stem_channels=32,
            stage_channels=(64, 128, 256),
            dilations=dil,
            adapter_dim=256,
            total_stride=8,
        )


@dataclass
class FeatureMap:
    """Dense activation grid with its input stride recorded."""

    values: torch.Tensor  # (C, H, W)
    stride: int
    padding_used: bool

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ShapeError(f"feature map must be (C, H, W), got {tuple(self.values.shape)}")
        if self.stride not in ALLOWED_STRIDES:
            raise ShapeError(f"stride must be one of {ALLOWED_STRIDES}, got {self.stride}")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass
class FeaturePyramid:
    """Per-level feature maps for levels 3, 4, 5 (shallow to deep)."""

    levels: dict[int, FeatureMap] = field(default_factory=dict)

    def __post_init__(self):
        if not self.levels or any(l not in LEVELS for l in self.levels):
            raise ShapeError(f"pyramid levels must be a subset of {LEVELS}, got {sorted(self.levels)}")

    def spatial_sizes(self) -> dict[int, tuple[int, int]]:
        return {l: fm.spatial for l, fm in self.levels.items()}


class ConvNorm(nn.Module):
    """Convolution followed by optional batch normalization (conv bias off with norm)."""

    def __init__(self, cin, cout, kernel, stride=1, padding=0, dilation=1, norm=True):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=padding,
                              dilation=dilation, bias=not norm)
        self.norm = nn.BatchNorm2d(cout) if norm else None

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return x


class ResidualBlock(nn.Module):
    """Two padded 3x3 convolutions with a skip; unit spatial stride, given dilation."""

    def __init__(self, cin, cout, dilation=1):
        super().__init__()
        self.conv1 = ConvNorm(cin, cout, 3, padding=dilation, dilation=dilation)
        self.conv2 = ConvNorm(cout, cout, 3, padding=dilation, dilation=dilation)
        self.proj = ConvNorm(cin, cout, 1) if cin != cout else None
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        skip = x if self.proj is None else self.proj(x)
        y = self.conv2(self.act(self.conv1(x)))
        return self.act(y + skip)


def _out_size(n: int, k: int, s: int, p: int, d: int) -> int:
    m = n + 2 * p - (d * (k - 1) + 1)
    if m < 0:
        raise ShapeError(f"input of size {n} too small for kernel {k} (dilation {d}, padding {p})")
    return m // s + 1


class Backbone(nn.Module):
    """Three-level feature extractor; taps after stages 3, 4, and 5."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        padded = cfg.variant == "padded_residual"
        n_stem = int(round(math.log2(cfg.total_stride)))

        stem = []
        cin = cfg.in_channels
        for _ in range(n_stem):
            stem.append(ConvNorm(cin, cfg.stem_channels, 3, stride=2, padding=0))
            stem.append(nn.ReLU(inplace=True))
            cin = cfg.stem_channels
        self.stem = nn.Sequential(*stem)

        stages = []
        for level_idx, cout in enumerate(cfg.stage_channels):
            if padded:
                stages.append(ResidualBlock(cin, cout, dilation=cfg.dilations[level_idx]))
            else:
                stages.append(nn.Sequential(ConvNorm(cin, cout, 3, padding=0), nn.ReLU(inplace=True)))
            cin = cout
        self.stage3, self.stage4, self.stage5 = stages

    @property
    def padding_used(self) -> bool:
        return self.cfg.variant == "padded_residual"

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        x = self.stem(x)
        f3 = self.stage3(x)
        f4 = self.stage4(f3)
        f5 = self.stage5(f4)
        return {3: f3, 4: f4, 5: f5}

    # --- analytic layer arithmetic ---

    def layer_specs(self, level: int) -> list[tuple[int, int, int, int]]:
        """(kernel, stride, padding, dilation) of every conv on the path to ``level``."""
        if level not in LEVELS:
            raise ShapeError(f"level must be one of {LEVELS}, got {level}")
        padded = self.padding_used
        specs = [(3, 2, 0, 1)] * len(self.stem[::2])
        for idx in range(level - 2):
            d = self.cfg.dilations[idx]
            if padded:
                specs += [(3, 1, d, d), (3, 1, d, d)]
            else:
                specs += [(3, 1, 0, 1)]
        return specs

    def feature_size(self, n: int, level: int = 5) -> int:
        """Spatial size of the ``level`` tap for an n-pixel square input."""
        for k, s, p, d in self.layer_specs(level):
            n = _out_size(n, k, s, p, d)
        if n < 1:
            raise ShapeError(f"input too small for the level-{level} receptive field")
        return n

    def effective_strides(self) -> tuple[int, int, int]:
        out = []
        for level in LEVELS:
            stride = 1
            for _, s, _, _ in self.layer_specs(level):
                stride *= s
            out.append(stride)
        return tuple(out)

    def receptive_field(self, level: int) -> int:
        rf, jump = 1, 1
        for k, s, _, d in self.layer_specs(level):
            rf += (k - 1) * d * jump
            jump *= s
        return rf

    def channels(self, level: int) -> int:
        return self.cfg.stage_channels[level - 3]


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic init: fan-in scaled normal convolutions, identity norms.

    Iteration follows module registration order, so a fixed seed gives
    bitwise-identical parameters on every call.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
                std = math.sqrt(2.0 / fan_in)
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_running_stats()
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_backbone(cfg: BackboneConfig, rng_seed: int) -> Backbone:
    """Construct a backbone with deterministic parameters under ``rng_seed``."""
    net = Backbone(cfg)
    init_parameters(net, torch.Generator().manual_seed(rng_seed))
    return net


def to_input(patch) -> torch.Tensor:
    """Convert an image patch to a (C, H, W) float32 tensor in [-0.5, 0.5].

    Accepts (H, W) or (H, W, C) uint8/float arrays, or an already-float
    (C, H, W) torch tensor (passed through unchanged).
    """
    if isinstance(patch, torch.Tensor):
        t = patch
        if t.dim() == 2:
            t = t.unsqueeze(0)
        if t.dtype == torch.uint8:
            t = t.float() / 255.0 - 0.5
        return t.float()
    arr = np.asarray(patch)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3:
        arr = np.moveaxis(arr, -1, 0)
    else:
        raise ShapeError(f"patch must be (H, W) or (H, W, C), got {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr)).float()
    if arr.dtype == np.uint8:
        t = t / 255.0 - 0.5
    return t


def extract_pyramid(backbone: Backbone, patch) -> FeaturePyramid:
    """Run the backbone on one patch and wrap the raw taps as a pyramid.

    Raw taps keep their native sizes: the padded variant produces equal
    (H, W) at every level, the pad-free variant shrinks with depth.
    """
    t = to_input(patch)
    backbone.feature_size(min(t.shape[1], t.shape[2]), level=5)  # raises ShapeError if too small
    stride = backbone.cfg.total_stride
    with torch.no_grad():
        feats = backbone(t.unsqueeze(0))
    return FeaturePyramid(levels={
        l: FeatureMap(values=f[0], stride=stride, padding_used=backbone.padding_used)
        for l, f in feats.items()
    })


def crop_center_hw(t: torch.Tensor, size: int) -> torch.Tensor:
    """Centered spatial crop of a (..., H, W) tensor; parity must match."""
    h, w = t.shape[-2], t.shape[-1]
    if size > h or size > w:
        raise ShapeError(f"crop size {size} exceeds spatial extent {h}x{w}")
    if (h - size) % 2 != 0 or (w - size) % 2 != 0:
        raise ShapeError(f"crop size {size} has wrong parity for extent {h}x{w}; refusing off-center crop")
    top = (h - size) // 2
    left = (w - size) // 2
    return t[..., top:top + size, left:left + size]


def crop_center(fm: FeatureMap, size: int) -> FeatureMap:
    """Center-crop a feature map's spatial grid; channels untouched."""
    return FeatureMap(values=crop_center_hw(fm.values, size), stride=fm.stride,
                      padding_used=fm.padding_used)


class AdapterBank(nn.Module):
    """Per-level 1x1 convolution (+ norm) mapping every level to one channel count."""

    def __init__(self, in_channels: dict[int, int], dim: int, norm: bool = True):
        super().__init__()
        self.dim = dim
        self.convs = nn.ModuleDict({
            str(l): ConvNorm(c, dim, 1, norm=norm) for l, c in sorted(in_channels.items())
        })

    def forward(self, feats: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        return {l: self.convs[str(l)](f) for l, f in feats.items()}

    def init_identity(self) -> None:
        """Set every adapter conv to the identity map (requires cin == dim, norm off)."""
        with torch.no_grad():
            for conv in self.convs.values():
                if conv.norm is not None:
                    raise ConfigError("identity init requires adapters built with norm=False")
                w = conv.conv.weight
                if w.shape[0] != w.shape[1]:
                    raise ConfigError("identity init requires matching channel counts")
                w.zero_()
                for c in range(w.shape[0]):
                    w[c, c, 0, 0] = 1.0
                if conv.conv.bias is not None:
                    conv.conv.bias.zero_()


def adapt_channels(pyramid: FeaturePyramid, adapters: AdapterBank) -> FeaturePyramid:
    """Apply the 1x1 adapters to every pyramid level; spatial sizes unchanged."""
    with torch.no_grad():
        out = {}
        for l, fm in pyramid.levels.items():
            values = adapters.convs[str(l)](fm.values.unsqueeze(0))[0]
            out[l] = FeatureMap(values=values, stride=fm.stride, padding_used=fm.padding_used)
    return FeaturePyramid(levels=out)
