"""Loss stack: relativistic adversarial terms, voxel L1, and 2.5D perception.

Adversarial terms follow the relativistic-average form: each side is judged
against the mean logit of the opposite side, estimated over the batch and all
voxels of the same resolution level. Every multi-level loss reduces per level
first, then sums over levels: a single-level pyramid degenerates to the plain
single-scale definition, and each extra supervised level adds signal without
diluting the finest one. All public functions raise NaNLoss instead of
returning a non-finite value.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import NaNLoss, ShapeMismatch
from .features import SliceFeatureExtractor


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Weights of the composite generator loss: voxel, perception, adversarial."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.0001

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclasses.dataclass(frozen=True)
class LossReport:
    """Scalar loss terms of one step, aggregate plus per-level detail."""

    l_voxel: float
    l_perception: float
    l_adv: float
    l_g_total: float
    l_voxel_per_level: tuple[float, ...]
    l_adv_per_level: tuple[float, ...]
    l_d: float | None = None
    l_d_per_level: tuple[float, ...] | None = None


def _guard(value: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NaNLoss(f"{what} is non-finite")
    return value


def _check_paired(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor], what: str) -> None:
    if len(a) != len(b):
        raise ShapeMismatch(f"{what}: {len(a)} vs {len(b)} levels")
    for k, (x, y) in enumerate(zip(a, b)):
        if x.shape != y.shape:
            raise ShapeMismatch(f"{what} level {k}: {tuple(x.shape)} vs {tuple(y.shape)}")


def _sum_over_levels(per_level: list[torch.Tensor]) -> torch.Tensor:
    return torch.stack(per_level).sum()


def relativistic_d_loss(
    d_real: Sequence[torch.Tensor], d_fake: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Discriminator loss: real should beat the mean fake logit and vice versa.

    Per level: mean[-log sigmoid(r - E[f])] + mean[-log(1 - sigmoid(f - E[r]))]
    in numerically stable softplus form, then summed over levels. A single
    level of identical constant real and fake logits scores exactly 2 ln 2.
    """
    _check_paired(d_real, d_fake, "discriminator logits")
    per_level = []
    for r, f in zip(d_real, d_fake):
        mean_r, mean_f = r.mean(), f.mean()
        lvl = F.softplus(-(r - mean_f)).mean() + F.softplus(f - mean_r).mean()
        per_level.append(lvl)
    return _guard(_sum_over_levels(per_level), "relativistic discriminator loss")


def adversarial_g_loss(
    d_real: Sequence[torch.Tensor], d_fake: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Generator-side relativistic loss: the role-swapped counterpart above."""
    _check_paired(d_real, d_fake, "discriminator logits")
    per_level = []
    for r, f in zip(d_real, d_fake):
        mean_r, mean_f = r.mean(), f.mean()
        lvl = F.softplus(-(f - mean_r)).mean() + F.softplus(r - mean_f).mean()
        per_level.append(lvl)
    return _guard(_sum_over_levels(per_level), "relativistic generator loss")


def bce_voxel_d_loss(
    d_real: Sequence[torch.Tensor], d_fake: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Non-relativistic ablation: plain BCE, real toward 1 and fake toward 0."""
    _check_paired(d_real, d_fake, "discriminator logits")
    per_level = [
        F.softplus(-r).mean() + F.softplus(f).mean() for r, f in zip(d_real, d_fake)
    ]
    return _guard(_sum_over_levels(per_level), "BCE discriminator loss")


def bce_g_loss(d_fake: Sequence[torch.Tensor]) -> torch.Tensor:
    """Non-relativistic generator ablation: push fake logits toward 1."""
    per_level = [F.softplus(-f).mean() for f in d_fake]
    return _guard(_sum_over_levels(per_level), "BCE generator loss")


def voxel_l1(
    syn: Sequence[torch.Tensor], gt: Sequence[torch.Tensor]
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Mean absolute voxel difference per level, summed over levels."""
    _check_paired(syn, gt, "image pyramids")
    per_level = [(s - g).abs().mean() for s, g in zip(syn, gt)]
    return _guard(_sum_over_levels(per_level), "voxel L1"), per_level


def _slice_stacks(x: torch.Tensor):
    """Yield the three orthogonal slice stacks of a (B, 1, D, H, W) tensor."""
    b, c, d, h, w = x.shape
    yield x.permute(0, 2, 1, 3, 4).reshape(b * d, c, h, w)  # axial
    yield x.permute(0, 3, 1, 2, 4).reshape(b * h, c, d, w)  # coronal
    yield x.permute(0, 4, 1, 2, 3).reshape(b * w, c, d, h)  # sagittal


def perception_2p5d(
    syn: torch.Tensor, gt: torch.Tensor, fx: SliceFeatureExtractor
) -> torch.Tensor:
    """2.5D perceptual loss on full-resolution volumes.

    Each orthogonal view is sliced into a 2D stack, pushed through the frozen
    backbone, and scored by mean absolute feature difference; the three view
    terms are summed.
    """
    if syn.shape != gt.shape:
        raise ShapeMismatch(f"perception inputs {tuple(syn.shape)} vs {tuple(gt.shape)}")
    if syn.dim() != 5 or syn.shape[1] != 1:
        raise ShapeMismatch(f"perception inputs must be (B, 1, D, H, W), got {tuple(syn.shape)}")
    total = syn.new_zeros(())
    for s_stack, g_stack in zip(_slice_stacks(syn), _slice_stacks(gt)):
        fs = fx.features(s_stack)
        with torch.no_grad():
            fg = fx.features(g_stack)
        total = total + (fs - fg).abs().mean()
    return _guard(total, "2.5D perception loss")


def generator_total_loss(
    syn_pyr: Sequence[torch.Tensor],
    gt_pyr: Sequence[torch.Tensor],
    d_real: Sequence[torch.Tensor] | None,
    d_fake: Sequence[torch.Tensor] | None,
    weights: LossWeights,
    fx: SliceFeatureExtractor,
    adversarial: str = "relativistic",
) -> tuple[torch.Tensor, LossReport]:
    """Composite generator loss and its per-term report.

    Voxel L1 and the adversarial term run over every supervised level; the
    perception term runs at full resolution only. ``d_real``/``d_fake`` may be
    None when the adversarial weight is zero.
    """
    l_vox, vox_levels = voxel_l1(syn_pyr, gt_pyr)
    l_per = perception_2p5d(syn_pyr[0], gt_pyr[0], fx)

    adv_levels: list[torch.Tensor] = []
    if d_fake is None:
        if weights.lambda3 != 0:
            raise ValueError("adversarial weight is nonzero but no logits were given")
        l_adv = syn_pyr[0].new_zeros(())
    elif adversarial == "relativistic":
        l_adv = adversarial_g_loss(d_real, d_fake)
        with torch.no_grad():
            adv_levels = [
                adversarial_g_loss([r.detach()], [f.detach()])
                for r, f in zip(d_real, d_fake)
            ]
    elif adversarial == "bce":
        l_adv = bce_g_loss(d_fake)
        with torch.no_grad():
            adv_levels = [bce_g_loss([f.detach()]) for f in d_fake]
    else:
        raise ValueError(f"unknown adversarial mode {adversarial!r}")

    total = weights.lambda1 * l_vox + weights.lambda2 * l_per + weights.lambda3 * l_adv
    _guard(total, "generator total loss")
    report = LossReport(
        l_voxel=float(l_vox.detach()),
        l_perception=float(l_per.detach()),
        l_adv=float(l_adv.detach()),
        l_g_total=float(total.detach()),
        l_voxel_per_level=tuple(float(v.detach()) for v in vox_levels),
        l_adv_per_level=tuple(float(v.detach()) for v in adv_levels),
    )
    return total, report
