"""2D feature extractors applied slice-wise to volumes.

The perception loss and the deep-feature metric both compare stacks of 2D
slices through a frozen convolutional backbone. Production uses pretrained
VGG backbones (optional torchvision dependency); tests and offline runs use
small deterministic stand-in CNNs seeded at construction, so nothing here
ever needs a download.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import AdapterUnavailable, SliceTooSmall

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class SliceFeatureExtractor:
    """Frozen 2D backbone with canonical preprocessing, single tap point.

    ``features`` maps a (N, 1, H, W) slice stack to the tap-point activation.
    Grayscale input is replicated to three channels and normalized with the
    backbone's training statistics. Weights never receive gradients.
    """

    def __init__(self, backbone: nn.Module, mean, std, min_size: int, name: str):
        backbone.eval()
        for p in backbone.parameters():
            p.requires_grad_(False)
        self.backbone = backbone
        self.mean = torch.tensor(mean).view(1, -1, 1, 1)
        self.std = torch.tensor(std).view(1, -1, 1, 1)
        self.min_size = min_size
        self.name = name

    def _preprocess(self, slices: torch.Tensor) -> torch.Tensor:
        if slices.dim() != 4 or slices.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) slices, got {tuple(slices.shape)}")
        h, w = slices.shape[2:]
        if h < self.min_size or w < self.min_size:
            raise SliceTooSmall(
                f"slices {h}x{w} below backbone minimum {self.min_size} ({self.name})"
            )
        x = slices.repeat(1, 3, 1, 1)
        return (x - self.mean.to(x)) / self.std.to(x)

    def features(self, slices: torch.Tensor) -> torch.Tensor:
        return self.backbone(self._preprocess(slices))


class MultiTapExtractor(SliceFeatureExtractor):
    """Same contract but returns activations at several depths.

    ``features`` returns a list of maps, one per tap index into the backbone's
    layer sequence.
    """

    def __init__(self, backbone: nn.Sequential, taps, mean, std, min_size: int, name: str):
        super().__init__(backbone, mean, std, min_size, name)
        self.taps = tuple(taps)

    def features(self, slices: torch.Tensor) -> list[torch.Tensor]:
        x = self._preprocess(slices)
        out = []
        last = max(self.taps)
        for i, layer in enumerate(self.backbone):
            x = layer(x)
            if i in self.taps:
                out.append(x)
            if i == last:
                break
        return out


def _seeded(seed: int, build):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return build()


def standin_extractor(seed: int = 0) -> SliceFeatureExtractor:
    """Tiny deterministic CNN standing in for the perception backbone."""
    backbone = _seeded(
        seed,
        lambda: nn.Sequential(
            nn.Conv2d(3, 8, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3, padding=1),
            nn.ReLU(inplace=True),
        ),
    )
    return SliceFeatureExtractor(backbone, (0.5,) * 3, (0.5,) * 3, min_size=2, name="standin")


def standin_multitap_extractor(seed: int = 0) -> MultiTapExtractor:
    """Deterministic multi-tap CNN standing in for the deep-feature metric."""
    backbone = _seeded(
        seed,
        lambda: nn.Sequential(
            nn.Conv2d(3, 8, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(inplace=True),
        ),
    )
    return MultiTapExtractor(
        backbone, taps=(1, 4, 7), mean=(0.5,) * 3, std=(0.5,) * 3, min_size=4,
        name="standin-multitap",
    )


def _load_vgg(arch: str, weights_path: str | None) -> nn.Sequential:
    try:
        from torchvision import models
    except ImportError as exc:
        raise AdapterUnavailable(
            "torchvision is required for pretrained VGG backbones; "
            "install the 'vgg' extra or use the stand-in extractor"
        ) from exc
    builder = getattr(models, arch)
    try:
        if weights_path:
            net = builder(weights=None)
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        else:
            net = builder(weights="DEFAULT")
    except Exception as exc:
        raise AdapterUnavailable(f"cannot load {arch} weights: {exc}") from exc
    return net.features


def vgg19_extractor(weights_path: str | None = None) -> SliceFeatureExtractor:
    """VGG-19 tapped at the activation after its final convolution."""
    features = _load_vgg("vgg19", weights_path)
    backbone = nn.Sequential(*list(features.children())[:36])
    return SliceFeatureExtractor(
        backbone, IMAGENET_MEAN, IMAGENET_STD, min_size=16, name="vgg19"
    )


def vgg16_multitap_extractor(weights_path: str | None = None) -> MultiTapExtractor:
    """VGG-16 tapped after each stage's last ReLU, for the deep-feature metric."""
    features = _load_vgg("vgg16", weights_path)
    backbone = nn.Sequential(*list(features.children()))
    return MultiTapExtractor(
        backbone, taps=(3, 8, 15, 22, 29), mean=IMAGENET_MEAN, std=IMAGENET_STD,
        min_size=32, name="vgg16",
    )


def make_extractor(kind: str = "standin", weights_path: str | None = None, seed: int = 0):
    """Factory keyed by config string: 'standin' or 'vgg19'."""
    if kind == "standin":
        return standin_extractor(seed)
    if kind == "vgg19":
        return vgg19_extractor(weights_path)
    raise ValueError(f"unknown feature extractor kind {kind!r}")


def make_metric_extractor(kind: str = "standin", weights_path: str | None = None, seed: int = 0):
    """Factory for the multi-tap metric backbone: 'standin' or 'vgg16'."""
    if kind == "standin":
        return standin_multitap_extractor(seed)
    if kind == "vgg16":
        return vgg16_multitap_extractor(weights_path)
    raise ValueError(f"unknown metric extractor kind {kind!r}")
