"""Change-guided dual-task decoding.

The binary-change decoder walks the pyramid top-down: each stage fuses the
two timestamps, adds the upsampled carry from the deeper stage, and runs a
state-space block whose raw output is that stage's change map (CM).  The
two semantic decoders (independent weights, one per timestamp) consume the
CMs through change-guided attention: features are multiplied by the
sigmoid of the matching CM, with gradients flowing back into the change
branch.  All upsampling steps share one multi-kernel CBAM unit.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .backbone import FeaturePyramid, VSSBlock
from .config import ModelConfig
from .errors import ShapeError
from .fusion import CBAM, FusionBlock


def change_guided_attention(x: Tensor, cm: Tensor) -> Tensor:
    """Gate features by the sigmoid of a same-shape change map.

    Parameter-free: x * sigmoid(cm).  A zero map scales x by exactly 0.5;
    a strongly positive map passes x through unchanged.
    """
    if x.shape != cm.shape:
        raise ShapeError(
            f"change_guided_attention needs matching shapes, got {tuple(x.shape)} vs {tuple(cm.shape)}"
        )
    return x * torch.sigmoid(cm)


class CbamUpsample(nn.Module):
    """Multi-kernel refinement, attention, then bilinear resize.

    Three parallel convolutions (1x1, 3x3, 5x5) with batch norm are
    concatenated, refined by CBAM, and added to a 1x1 shortcut of the
    input; a 1x1 projection sets the output width before interpolation to
    the requested spatial size.  ``bias=False`` makes the whole unit map
    zero to zero, which the tests use.
    """

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True, reduction: int = 8):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_channels, in_channels, k, padding=k // 2, bias=bias),
                nn.BatchNorm2d(in_channels),
            )
            for k in (1, 3, 5)
        )
        self.cbam = CBAM(3 * in_channels, reduction)
        self.shortcut = nn.Conv2d(in_channels, 3 * in_channels, 1, bias=bias)
        self.proj = nn.Conv2d(3 * in_channels, out_channels, 1, bias=bias)

    def forward(self, x: Tensor, size: tuple[int, int]) -> Tensor:
        h, w = x.shape[-2:]
        if size[0] < h or size[1] < w:
            raise ShapeError(f"upsample target {tuple(size)} is smaller than input {(h, w)}")
        y = torch.cat([branch(x) for branch in self.branches], dim=1)
        y = self.cbam(y) + self.shortcut(x)
        y = self.proj(y)
        return F.interpolate(y, size=tuple(size), mode="bilinear", align_corners=False)


def _head(channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(channels, channels, 3, padding=1),
        nn.Conv2d(channels, out_channels, 1),
    )


@dataclass
class BcdOutput:
    """Binary-change logits plus the per-stage change maps, fine to coarse."""

    logits: Tensor
    change_maps: tuple[Tensor, Tensor, Tensor, Tensor]


class BcdDecoder(nn.Module):
    """Fuse both timestamps per stage and decode a 2-class change mask."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        chs = config.stage_channels
        self.fuse = nn.ModuleList(
            FusionBlock(chs[i], config.fft_branch, config.diff_branch, config.attention_reduction)
            for i in range(4)
        )
        self.blocks = nn.ModuleList(VSSBlock(chs[i], config.state_dim) for i in range(4))
        self.ups = nn.ModuleList(
            CbamUpsample(chs[i + 1], chs[i], reduction=config.attention_reduction) for i in range(3)
        )
        self.head = _head(chs[0], 2)

    def forward(self, pyr_t1: FeaturePyramid, pyr_t2: FeaturePyramid) -> BcdOutput:
        cms: list[Tensor | None] = [None] * 4
        carry: Tensor | None = None
        for i in (3, 2, 1, 0):
            fused = self.fuse[i](pyr_t1[i].data, pyr_t2[i].data)
            if carry is not None:
                fused = fused + carry
            cm = self.blocks[i](fused)
            cms[i] = cm
            if i > 0:
                carry = self.ups[i - 1](cm, pyr_t1[i - 1].data.shape[-2:])
        full = F.interpolate(cms[0], scale_factor=4, mode="bilinear", align_corners=False)
        return BcdOutput(logits=self.head(full), change_maps=tuple(cms))


class ScdDecoder(nn.Module):
    """Decode one timestamp's semantic mask under change-map guidance.

    ``use_cga`` can be flipped at any time; when off, the change maps are
    ignored entirely, so no gradient couples the semantic loss to the
    change branch through this decoder.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        chs = config.stage_channels
        self.use_cga = config.cga
        self.blocks = nn.ModuleList(VSSBlock(chs[i], config.state_dim) for i in range(4))
        self.ups = nn.ModuleList(
            CbamUpsample(chs[i + 1], chs[i], reduction=config.attention_reduction) for i in range(3)
        )
        self.head = _head(chs[0], config.num_classes)

    def forward(self, pyr: FeaturePyramid, change_maps: tuple[Tensor, ...]) -> Tensor:
        if len(change_maps) != 4:
            raise ShapeError(f"expected 4 change maps, got {len(change_maps)}")
        carry: Tensor | None = None
        out: Tensor | None = None
        for i in (3, 2, 1, 0):
            x = pyr[i].data
            if self.use_cga:
                x = change_guided_attention(x, change_maps[i])
            if carry is not None:
                x = x + carry
            out = self.blocks[i](x)
            if i > 0:
                carry = self.ups[i - 1](out, pyr[i - 1].data.shape[-2:])
        full = F.interpolate(out, scale_factor=4, mode="bilinear", align_corners=False)
        return self.head(full)
