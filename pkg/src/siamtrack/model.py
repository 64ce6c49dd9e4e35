"""The assembled Siamese tracking network.

Glues together the backbone, the 1x1 channel adapters, one RPN block per
pyramid level, and the learned fusion weights. Template features are
center-cropped to ``template_crop`` cells before correlation. Fusion weights
are stored in log space (one parameter per level and task), so the learned
normalized weights are their softmax and always positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import (
    AdapterBank,
    Backbone,
    BackboneConfig,
    crop_center_hw,
    init_parameters,
    to_input,
)
from .errors import ConfigError, ShapeError
from .geometry import AnchorConfig, AnchorSet, centered_origin, make_anchors
from .rpn_head import DetectorBlock, FusionWeights, ResponsePair, RpnBlock, UpChannelBlock, fuse

HEAD_VARIANTS = ("DW_XCORR", "UP_XCORR", "DETECT")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig.desk)
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    levels: tuple[int, ...] = (3, 4, 5)
    template_crop: int = 7
    head_variant: str = "DW_XCORR"
    adjust_kernel: int = 3
    fusion_kernel: int = 1
    raise_kernel: int = 3
    static_kernel: int = 5

    def __post_init__(self):
        if not self.levels or any(l not in (3, 4, 5) for l in self.levels):
            raise ConfigError(f"levels must be a non-empty subset of (3, 4, 5): {self.levels}")
        if tuple(sorted(set(self.levels))) != self.levels:
            raise ConfigError(f"levels must be sorted and unique: {self.levels}")
        if self.template_crop < self.adjust_kernel:
            raise ConfigError(f"template_crop must be >= adjust kernel, got {self.template_crop}")
        if self.head_variant not in HEAD_VARIANTS:
            raise ConfigError(f"unknown head variant {self.head_variant!r}")
        if self.anchor.stride != self.backbone.total_stride:
            raise ConfigError(
                f"anchor stride {self.anchor.stride} must equal the backbone stride "
                f"{self.backbone.total_stride}"
            )
        if (self.head_variant == "DETECT"
                and self.adjust_kernel + self.static_kernel - 1 != self.template_crop):
            raise ConfigError(
                "DETECT heads must consume the template-crop extent: "
                "adjust_kernel + static_kernel - 1 == template_crop"
            )

    @classmethod
    def desk(cls, variant: str = "padded_residual", levels=(3, 4, 5), head: str = "DW_XCORR") -> "ModelConfig":
        return cls(backbone=BackboneConfig.desk(variant), levels=tuple(levels), head_variant=head)

    def to_dict(self) -> dict:
        return {
            "backbone": {
                "variant": self.backbone.variant,
                "in_channels": self.backbone.in_channels,
                "stem_channels": self.backbone.stem_channels,
                "stage_channels": list(self.backbone.stage_channels),
                "dilations": list(self.backbone.dilations),
                "adapter_dim": self.backbone.adapter_dim,
                "total_stride": self.backbone.total_stride,
            },
            "anchor": {
                "ratios": list(self.anchor.ratios),
                "scale": self.anchor.scale,
                "stride": self.anchor.stride,
            },
            "levels": list(self.levels),
            "template_crop": self.template_crop,
            "head_variant": self.head_variant,
            "adjust_kernel": self.adjust_kernel,
            "fusion_kernel": self.fusion_kernel,
            "raise_kernel": self.raise_kernel,
            "static_kernel": self.static_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = d["backbone"]
        an = d["anchor"]
        return cls(
            backbone=BackboneConfig(
                variant=bb["variant"],
                in_channels=bb["in_channels"],
                stem_channels=bb["stem_channels"],
                stage_channels=tuple(bb["stage_channels"]),
                dilations=tuple(bb["dilations"]),
                adapter_dim=bb["adapter_dim"],
                total_stride=bb["total_stride"],
            ),
            anchor=AnchorConfig(ratios=tuple(an["ratios"]), scale=an["scale"], stride=an["stride"]),
            levels=tuple(d["levels"]),
            template_crop=d["template_crop"],
            head_variant=d["head_variant"],
            adjust_kernel=d["adjust_kernel"],
            fusion_kernel=d["fusion_kernel"],
            raise_kernel=d["raise_kernel"],
            static_kernel=d.get("static_kernel", 5),
        )


class SiamModel(nn.Module):
    """Backbone + adapters + per-level RPN blocks + learned fusion weights."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        dim = cfg.backbone.adapter_dim
        self.adapters = AdapterBank(
            {l: self.backbone.channels(l) for l in cfg.levels}, dim
        )
        k = cfg.anchor.k
        if cfg.head_variant == "DW_XCORR":
            heads = {str(l): RpnBlock(dim, k, cfg.adjust_kernel, cfg.fusion_kernel) for l in cfg.levels}
        elif cfg.head_variant == "UP_XCORR":
            heads = {str(l): UpChannelBlock(dim, k, cfg.raise_kernel) for l in cfg.levels}
        else:
            heads = {str(l): DetectorBlock(dim, k, cfg.adjust_kernel, cfg.fusion_kernel,
                                           cfg.static_kernel) for l in cfg.levels}
        self.heads = nn.ModuleDict(heads)
        n = len(cfg.levels)
        self.log_alpha = nn.Parameter(torch.zeros(n))
        self.log_beta = nn.Parameter(torch.zeros(n))

    # --- feature extraction ---

    def extract(self, patches: torch.Tensor) -> dict[int, torch.Tensor]:
        """Backbone taps for a (B, C, H, W) batch, aligned and channel-adapted.

        The pad-free variant's taps shrink with depth; all selected levels
        are center-cropped to the deepest tap's size so they share one grid.
        """
        feats = self.backbone(patches)
        feats = {l: feats[l] for l in self.cfg.levels}
        smallest = min(f.shape[-1] for f in feats.values())
        feats = {l: crop_center_hw(f, smallest) for l, f in feats.items()}
        return self.adapters(feats)

    def template(self, z: torch.Tensor) -> dict[int, torch.Tensor]:
        """Template features per level, center-cropped to ``template_crop`` cells.

        Detection-mode heads carry no template branch: the placeholder dict
        keeps the calling convention without touching the backbone.
        """
        if self.cfg.head_variant == "DETECT":
            return {l: None for l in self.cfg.levels}
        return {l: crop_center_hw(f, self.cfg.template_crop) for l, f in self.extract(z).items()}

    def responses(self, zf: dict[int, torch.Tensor], xf: dict[int, torch.Tensor]) -> list[ResponsePair]:
        return [self.heads[str(l)](zf[l], xf[l], level=l) for l in self.cfg.levels]

    def fusion_vectors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.softmax(self.log_alpha, dim=0), torch.softmax(self.log_beta, dim=0)

    def fusion_weights(self) -> FusionWeights:
        """Learned raw weights (exponentiated log-parameters), detached."""
        return FusionWeights(
            alpha=tuple(torch.exp(self.log_alpha).detach().tolist()),
            beta=tuple(torch.exp(self.log_beta).detach().tolist()),
        )

    def forward(self, z: torch.Tensor, x: torch.Tensor) -> tuple[ResponsePair, list[ResponsePair]]:
        """Fused response pair (differentiable through the fusion weights)."""
        zf = self.template(z)
        xf = self.extract(x)
        per_level = self.responses(zf, xf)
        alpha, beta = self.fusion_vectors()
        fused = fuse(per_level, (list(alpha), list(beta)))
        return fused, per_level

    # --- response-grid arithmetic ---

    def feature_size(self, patch_px: int) -> int:
        """Aligned per-level feature size for a square input patch."""
        return min(self.backbone.feature_size(patch_px, l) for l in self.cfg.levels)

    def response_size(self, search_px: int) -> int:
        """Response grid side for a square search patch of ``search_px`` pixels."""
        x_feat = self.feature_size(search_px)
        size = x_feat - self.cfg.template_crop + 1
        if size < 1:
            raise ShapeError(f"search patch {search_px}px too small for the template crop")
        return size

    def anchors_for(self, search_px: int) -> AnchorSet:
        """Anchor grid centered on a ``search_px`` square search patch."""
        m = self.response_size(search_px)
        origin = centered_origin(search_px, (m, m), self.cfg.anchor.stride)
        return make_anchors(self.cfg.anchor, (m, m), origin)

    # --- training support ---

    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def head_parameters(self):
        """Everything trained at full learning rate: adapters, heads, fusion."""
        params = list(self.adapters.parameters())
        params += list(self.heads.parameters())
        params += [self.log_alpha, self.log_beta]
        return params

    def set_backbone_frozen(self, frozen: bool) -> None:
        for p in self.backbone.parameters():
            p.requires_grad_(not frozen)

    @staticmethod
    def to_input_batch(patches) -> torch.Tensor:
        """Stack image patches into a normalized (B, C, H, W) float batch."""
        return torch.stack([to_input(p) for p in patches])


def build_model(cfg: ModelConfig, seed: int) -> SiamModel:
    """Construct a model with deterministic parameter init under ``seed``."""
    model = SiamModel(cfg)
    init_parameters(model, torch.Generator().manual_seed(seed))
    return model
