"""Multi-resolution UNet discriminator with voxel-wise logits.

The UNet variant classifies every voxel at every pyramid level as real or
synthetic; the global variant collapses the whole patch to one logit and
exists as an ablation baseline. All convolutions can be spectral-normalized
to bound the Lipschitz constant.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch


@dataclasses.dataclass(frozen=True)
class DiscriminatorConfig:
    num_levels: int = 3
    base_channels: int = 16
    channel_growth: int = 2
    channel_cap: int = 256
    unet_mode: bool = True
    spectral_norm: bool = True
    conditional: bool = False

    def __post_init__(self):
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.base_channels < 1 or self.channel_growth < 1 or self.channel_cap < 1:
            raise ValueError("channel parameters must be positive")

    def channels(self, level: int) -> int:
        return min(self.base_channels * self.channel_growth**level, self.channel_cap)

    @property
    def in_channels(self) -> int:
        return 2 if self.conditional else 1

    @property
    def divisor(self) -> int:
        # encoder reaches one level below the deepest logit level
        return 2**self.num_levels


def apply_spectral_norm(module: nn.Module) -> nn.Module:
    """Wrap every conv kernel in ``module`` with spectral normalization.

    Each kernel, reshaped to 2D, is divided by its largest singular value as
    estimated by one persistent power-iteration step per training forward.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv3d) and not hasattr(m, "weight_orig"):
            nn.utils.spectral_norm(m)
    return module


def _lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, 0.2)


class _DiscEncoder(nn.Module):
    """Shared encoder: stem + stride-2 downsamplings with image injection."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        ch = [cfg.channels(k) for k in range(cfg.num_levels + 1)]
        self.stem = nn.Conv3d(cfg.in_channels, ch[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv3d(ch[k - 1], ch[k], 3, stride=2, padding=1)
            for k in range(1, cfg.num_levels + 1)
        )
        self.bodies = nn.ModuleList(
            nn.Conv3d(ch[k], ch[k], 3, padding=1) for k in range(cfg.num_levels + 1)
        )
        self.inject_projs = nn.ModuleDict()
        self.inject_fuses = nn.ModuleDict()
        for k in range(1, cfg.num_levels):
            self.inject_projs[str(k)] = nn.Conv3d(1, ch[k], 1)
            self.inject_fuses[str(k)] = nn.Conv3d(2 * ch[k], ch[k], 1)

    def forward(self, images: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        f = _lrelu(self.stem(images[0]))
        f = _lrelu(self.bodies[0](f))
        feats = [f]
        for k in range(1, self.cfg.num_levels + 1):
            f = _lrelu(self.downs[k - 1](f))
            key = str(k)
            if key in self.inject_projs:
                side = self.inject_projs[key](images[k])
                f = _lrelu(self.inject_fuses[key](torch.cat([f, side], dim=1)))
            f = _lrelu(self.bodies[k](f))
            feats.append(f)
        return feats


def _check_pyramid(images: Sequence[torch.Tensor], num_levels: int, divisor: int) -> None:
    if len(images) != num_levels:
        raise ShapeMismatch(f"expected {num_levels} image levels, got {len(images)}")
    x0 = images[0]
    if x0.dim() != 5 or x0.shape[1] != 1:
        raise ShapeMismatch(f"images must be (B, 1, D, H, W), got {tuple(x0.shape)}")
    if any(d % divisor for d in x0.shape[2:]):
        raise ShapeMismatch(
            f"level-0 dims {tuple(x0.shape[2:])} must be divisible by {divisor}"
        )
    for k, x in enumerate(images[1:], start=1):
        want = tuple(d // 2**k for d in x0.shape[2:])
        if x.dim() != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != want:
            raise ShapeMismatch(f"image level {k} dims {tuple(x.shape[2:])}, expected {want}")


class VoxelUNetDiscriminator(nn.Module):
    """UNet over the image pyramid; one voxel-wise logit grid per level."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        cfg = config
        ch = [cfg.channels(k) for k in range(cfg.num_levels + 1)]
        self.encoder = _DiscEncoder(cfg)
        self.ups = nn.ModuleList(
            nn.Conv3d(ch[k + 1] + ch[k], ch[k], 3, padding=1)
            for k in range(cfg.num_levels)
        )
        self.heads = nn.ModuleList(nn.Conv3d(ch[k], 1, 1) for k in range(cfg.num_levels))
        if cfg.spectral_norm:
            apply_spectral_norm(self)

    def forward(
        self, images: Sequence[torch.Tensor], condition: torch.Tensor | None = None
    ) -> list[torch.Tensor]:
        cfg = self.config
        _check_pyramid(images, cfg.num_levels, cfg.divisor)
        images = list(images)
        if cfg.conditional:
            if condition is None or condition.shape != images[0].shape:
                raise ShapeMismatch("conditional discriminator needs a matching source image")
            images[0] = torch.cat([images[0], condition], dim=1)
        feats = self.encoder(images)
        logits = [None] * cfg.num_levels
        d = feats[-1]
        for k in range(cfg.num_levels - 1, -1, -1):
            d = F.interpolate(d, size=feats[k].shape[2:], mode="trilinear", align_corners=False)
            d = _lrelu(self.ups[k](torch.cat([d, feats[k]], dim=1)))
            logits[k] = self.heads[k](d)
        return logits


class GlobalBinaryDiscriminator(nn.Module):
    """Patch-collapse baseline: the level-0 image alone -> one scalar logit.

    The logit is returned as a (B, 1, 1, 1, 1) grid so downstream loss code
    treats both discriminator variants uniformly.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        cfg = config
        ch = [cfg.channels(k) for k in range(cfg.num_levels + 1)]
        self.stem = nn.Conv3d(cfg.in_channels, ch[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv3d(ch[k - 1], ch[k], 3, stride=2, padding=1)
            for k in range(1, cfg.num_levels + 1)
        )
        self.head = nn.Conv3d(ch[-1], 1, 1)
        if cfg.spectral_norm:
            apply_spectral_norm(self)

    def forward(
        self, images: Sequence[torch.Tensor], condition: torch.Tensor | None = None
    ) -> list[torch.Tensor]:
        if not images:
            raise ShapeMismatch("expected at least the level-0 image")
        x = images[0]
        if x.dim() != 5 or x.shape[1] != 1:
            raise ShapeMismatch(f"images must be (B, 1, D, H, W), got {tuple(x.shape)}")
        if self.config.conditional:
            if condition is None or condition.shape != x.shape:
                raise ShapeMismatch("conditional discriminator needs a matching source image")
            x = torch.cat([x, condition], dim=1)
        f = _lrelu(self.stem(x))
        for down in self.downs:
            f = _lrelu(down(f))
        pooled = f.mean(dim=(2, 3, 4), keepdim=True)
        return [self.head(pooled)]


def build_discriminator(config: DiscriminatorConfig) -> nn.Module:
    return VoxelUNetDiscriminator(config) if config.unet_mode else GlobalBinaryDiscriminator(config)
