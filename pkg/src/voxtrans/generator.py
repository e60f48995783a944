"""3D multi-resolution dense-attention UNet generator.

Residual dense blocks do the feature extraction, growing heavier with depth;
decoder levels fuse skip connections through channel-then-spatial attention.
The network optionally takes the downsampled input pyramid as side inputs
("multi-resolution input") and emits a synthetic image at several resolutions
("multi-resolution output"), each through its own sigmoid head.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import IndivisiblePatch, ShapeMismatch
from .volumes import avg_pool_ceil


class FinalActivation(enum.Enum):
    SIGMOID = "SIGMOID"
    NONE = "NONE"


@dataclasses.dataclass(frozen=True)
class GeneratorConfig:
    """Structural hyperparameters of the translation generator.

    ``num_levels`` counts encoder depths; output heads exist at decoder
    levels 0..num_output_levels-1, so num_output_levels must stay below
    num_levels. Channel width at level k is base_channels * channel_growth**k
    capped at channel_cap. ``rdb_growth_rate`` None means base_channels // 2.
    """

    num_levels: int = 4
    num_output_levels: int = 3
    base_channels: int = 16
    channel_growth: int = 2
    channel_cap: int = 256
    rdb_layers_per_level: tuple[int, ...] = (2, 3, 4, 6)
    rdb_growth_rate: int | None = None
    mr_input_enabled: bool = True
    mr_output_enabled: bool = True
    final_activation: FinalActivation = FinalActivation.SIGMOID

    def __post_init__(self):
        if self.num_levels < 2:
            raise ValueError("num_levels must be >= 2")
        if not (1 <= self.num_output_levels <= self.num_levels - 1):
            raise ValueError(
                f"num_output_levels must be in [1, {self.num_levels - 1}], "
                f"got {self.num_output_levels}"
            )
        if len(self.rdb_layers_per_level) != self.num_levels:
            raise ValueError(
                f"rdb_layers_per_level needs {self.num_levels} entries, "
                f"got {len(self.rdb_layers_per_level)}"
            )
        if any(n < 1 for n in self.rdb_layers_per_level):
            raise ValueError("rdb layer counts must be >= 1")
        if self.base_channels < 1 or self.channel_growth < 1 or self.channel_cap < 1:
            raise ValueError("channel parameters must be positive")
        if self.growth_rate < 1:
            raise ValueError("rdb_growth_rate must be >= 1")
        object.__setattr__(
            self, "rdb_layers_per_level", tuple(int(n) for n in self.rdb_layers_per_level)
        )

    @property
    def growth_rate(self) -> int:
        if self.rdb_growth_rate is not None:
            return self.rdb_growth_rate
        return max(1, self.base_channels // 2)

    def channels(self, level: int) -> int:
        return min(self.base_channels * self.channel_growth**level, self.channel_cap)

    @property
    def num_input_levels(self) -> int:
        return self.num_output_levels if self.mr_input_enabled else 1

    @property
    def divisor(self) -> int:
        """Required divisor of level-0 spatial dims."""
        return 2 ** (self.num_levels - 1)


class ResidualDenseBlock(nn.Module):
    """Densely connected 3x3x3 convs with local feature fusion and residual add.

    Layer i sees the block input concatenated with every earlier layer's
    output; a 1x1x1 fusion conv maps back to the input width and is added to
    the input, so zero weights reduce the block to identity.
    """

    def __init__(self, channels: int, num_layers: int, growth_rate: int):
        super().__init__()
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.layers = nn.ModuleList(
            nn.Conv3d(channels + i * growth_rate, growth_rate, 3, padding=1)
            for i in range(num_layers)
        )
        self.fusion = nn.Conv3d(channels + num_layers * growth_rate, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = x
        for conv in self.layers:
            feats = torch.cat([feats, F.relu(conv(feats))], dim=1)
        return x + self.fusion(feats)


class AttentionFusion(nn.Module):
    """Skip fusion: upsample low, concat, channel then spatial attention, project.

    Channel attention pushes global-average and global-max descriptors through
    a shared two-layer bottleneck; spatial attention runs channel-wise
    mean/max maps through a 7x7x7 conv. Both gate multiplicatively via
    sigmoid. ``attention_bypass`` forces both gates to 1, leaving the plain
    projected concatenation.
    """

    def __init__(self, low_channels: int, high_channels: int, reduction: int = 8):
        super().__init__()
        cat_ch = low_channels + high_channels
        hidden = max(1, cat_ch // reduction)
        self.channel_mlp = nn.Sequential(
            nn.Conv3d(cat_ch, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv3d(hidden, cat_ch, 1),
        )
        self.spatial_conv = nn.Conv3d(2, 1, 7, padding=3)
        self.project = nn.Conv3d(cat_ch, high_channels, 1)
        self.norm = nn.InstanceNorm3d(high_channels, affine=True)

    def forward(
        self, low: torch.Tensor, high: torch.Tensor, attention_bypass: bool = False
    ) -> torch.Tensor:
        want = tuple((d + 1) // 2 for d in high.shape[2:])
        if tuple(low.shape[2:]) != want:
            raise ShapeMismatch(
                f"low dims {tuple(low.shape[2:])} are not the factor-2 reduction "
                f"{want} of high dims {tuple(high.shape[2:])}"
            )
        up = F.interpolate(low, size=high.shape[2:], mode="trilinear", align_corners=False)
        x = torch.cat([high, up], dim=1)
        if not attention_bypass:
            avg = x.mean(dim=(2, 3, 4), keepdim=True)
            peak = x.amax(dim=(2, 3, 4), keepdim=True)
            x = x * torch.sigmoid(self.channel_mlp(avg) + self.channel_mlp(peak))
            smap = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
            x = x * torch.sigmoid(self.spatial_conv(smap))
        return F.relu(self.norm(self.project(x)))


class _Transition(nn.Module):
    """Conv + instance norm + ReLU."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.InstanceNorm3d(out_ch, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.norm(self.conv(x)))


class TranslationGenerator(nn.Module):
    """Encoder-decoder translator over image pyramids.

    forward() takes a list of (B, 1, D, H, W) tensors — the input pyramid,
    ``config.num_input_levels`` long, level 0 first — and returns the output
    pyramid as a list of (B, 1, ...) tensors, one per supervised level (a
    single level-0 entry when mr_output is disabled).
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        cfg = config
        ch = [cfg.channels(k) for k in range(cfg.num_levels)]
        g = cfg.growth_rate

        self.stem = _Transition(1, ch[0])
        self.enc_blocks = nn.ModuleList(
            ResidualDenseBlock(ch[k], cfg.rdb_layers_per_level[k], g)
            for k in range(cfg.num_levels)
        )
        self.downs = nn.ModuleList(
            _Transition(ch[k - 1], ch[k], stride=2) for k in range(1, cfg.num_levels)
        )

        self.input_projs = nn.ModuleDict()
        self.input_fuses = nn.ModuleDict()
        if cfg.mr_input_enabled:
            for k in range(1, cfg.num_input_levels):
                self.input_projs[str(k)] = nn.Conv3d(1, ch[k], 1)
                self.input_fuses[str(k)] = _Transition(2 * ch[k], ch[k], kernel=1)

        self.fusions = nn.ModuleList(
            AttentionFusion(ch[k + 1], ch[k]) for k in range(cfg.num_levels - 1)
        )
        self.dec_blocks = nn.ModuleList(
            ResidualDenseBlock(ch[k], cfg.rdb_layers_per_level[k], g)
            for k in range(cfg.num_levels - 1)
        )

        head_levels = range(cfg.num_output_levels) if cfg.mr_output_enabled else range(1)
        self.heads = nn.ModuleDict(
            {str(k): nn.Conv3d(ch[k], 1, 1) for k in head_levels}
        )

    @property
    def output_levels(self) -> tuple[int, ...]:
        return tuple(sorted(int(k) for k in self.heads))

    def _check_inputs(self, inputs: Sequence[torch.Tensor]) -> None:
        cfg = self.config
        if len(inputs) != cfg.num_input_levels:
            raise ShapeMismatch(
                f"expected {cfg.num_input_levels} input levels, got {len(inputs)}"
            )
        x0 = inputs[0]
        if x0.dim() != 5 or x0.shape[1] != 1:
            raise ShapeMismatch(f"inputs must be (B, 1, D, H, W), got {tuple(x0.shape)}")
        if any(d % cfg.divisor for d in x0.shape[2:]):
            raise IndivisiblePatch(
                f"level-0 dims {tuple(x0.shape[2:])} must be divisible by {cfg.divisor}"
            )
        for k, x in enumerate(inputs[1:], start=1):
            want = tuple(d // 2**k for d in x0.shape[2:])
            if x.dim() != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != want:
                raise ShapeMismatch(
                    f"input level {k} dims {tuple(x.shape[2:])}, expected {want}"
                )

    def forward(self, inputs: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        cfg = self.config
        self._check_inputs(inputs)

        skips = []
        f = self.stem(inputs[0])
        f = self.enc_blocks[0](f)
        skips.append(f)
        for k in range(1, cfg.num_levels):
            f = self.downs[k - 1](f)
            key = str(k)
            if key in self.input_projs:
                side = self.input_projs[key](inputs[k])
                f = self.input_fuses[key](torch.cat([f, side], dim=1))
            f = self.enc_blocks[k](f)
            skips.append(f)

        decoded = {}
        d = skips[-1]
        for k in range(cfg.num_levels - 2, -1, -1):
            d = self.fusions[k](d, skips[k])
            d = self.dec_blocks[k](d)
            decoded[k] = d

        outputs = []
        for k in self.output_levels:
            y = self.heads[str(k)](decoded[k])
            if cfg.final_activation is FinalActivation.SIGMOID:
                y = torch.sigmoid(y)
            outputs.append(y)
        return outputs


def pyramid_tensors(patch: np.ndarray, num_levels: int) -> list[torch.Tensor]:
    """Float32 patch -> list of (1, 1, ...) tensors, level 0 plus downsamplings."""
    levels = [np.asarray(patch, dtype=np.float32)]
    for _ in range(1, num_levels):
        levels.append(avg_pool_ceil(levels[-1]))
    return [torch.from_numpy(lvl.copy()).unsqueeze(0).unsqueeze(0) for lvl in levels]


def as_patch_model(gen: TranslationGenerator):
    """Wrap the generator as a numpy patch -> numpy patch callable.

    Builds the input pyramid the generator expects, runs in eval mode without
    gradients, and returns the level-0 output. Suitable for
    ``patches.sliding_window_infer``.
    """

    def run(patch: np.ndarray) -> np.ndarray:
        was_training = gen.training
        gen.eval()
        try:
            with torch.no_grad():
                inputs = pyramid_tensors(patch, gen.config.num_input_levels)
                out = gen(inputs)[0]
        finally:
            gen.train(was_training)
        return out.squeeze(0).squeeze(0).numpy().astype(np.float32)

    return run
