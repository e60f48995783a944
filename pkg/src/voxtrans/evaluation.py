"""Volumetric image-quality metrics and synthetic-to-real applicability.

IQA metrics (SSIM, PSNR, NMSE, deep-feature distance) score translated
volumes against ground truth. The applicability assessments ask whether
synthetic images are good enough to *use*: train a small segmenter on them
and measure Dice on real data, or compare a fixed pretrained segmenter's
outputs on synthetic versus real inputs.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .errors import EmptyManifest, MissingLabels, ShapeMismatch, ZeroReference
from .features import MultiTapExtractor
from .generator import TranslationGenerator, as_patch_model
from .io import load_volume
from .patches import (
    DEFAULT_OVERLAP,
    DEFAULT_SIGMA_SCALE,
    BlendAccumulator,
    _tile_origins,
    gaussian_importance,
    sliding_window_infer,
)
from .volumes import DatasetManifest, IntensityDomain, Volume

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 7


def _check_dims(a: Volume, b: Volume) -> None:
    if a.dims != b.dims:
        raise ShapeMismatch(f"volume dims differ: {a.dims} vs {b.dims}")


def ssim3d(a: Volume, b: Volume, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over the volume, uniform cubic window, data range 1."""
    _check_dims(a, b)
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)

    def filt(v):
        return ndimage.uniform_filter(v, size=window, mode="nearest")

    mu_x, mu_y = filt(x), filt(y)
    sig_x = filt(x * x) - mu_x * mu_x
    sig_y = filt(y * y) - mu_y * mu_y
    sig_xy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sig_xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sig_x + sig_y + SSIM_C2)
    return float((num / den).mean())


def psnr(a: Volume, b: Volume) -> float:
    """Peak signal-to-noise ratio in dB on data range 1; inf when identical."""
    _check_dims(a, b)
    mse = float(
        np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2)
    )
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def nmse(a: Volume, b_ref: Volume) -> float:
    """Squared error normalized by the reference's energy; asymmetric."""
    _check_dims(a, b_ref)
    ref = b_ref.data.astype(np.float64)
    denom = float((ref * ref).sum())
    if denom == 0.0:
        raise ZeroReference("NMSE reference has zero energy")
    diff = a.data.astype(np.float64) - ref
    return float((diff * diff).sum() / denom)


def _slice_stacks_np(data: np.ndarray):
    d, h, w = data.shape
    yield data.reshape(d, 1, h, w).copy()
    yield np.moveaxis(data, 1, 0).reshape(h, 1, d, w).copy()
    yield np.moveaxis(data, 2, 0).reshape(w, 1, d, h).copy()


def _unit_normalize(feat: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    norm = feat.pow(2).sum(dim=1, keepdim=True).sqrt()
    return feat / (norm + eps)


def lpips_2p5d(a: Volume, b: Volume, fx: MultiTapExtractor) -> float:
    """Slice-wise deep-feature distance, averaged over three orthogonal views.

    Per tap layer, features are unit-normalized along channels and compared by
    mean squared difference; layers are averaged, then slices, then views.
    """
    _check_dims(a, b)
    view_scores = []
    with torch.no_grad():
        for sa, sb in zip(_slice_stacks_np(a.data), _slice_stacks_np(b.data)):
            fa = fx.features(torch.from_numpy(sa))
            fb = fx.features(torch.from_numpy(sb))
            tap_scores = [
                float((_unit_normalize(x) - _unit_normalize(y)).pow(2).mean())
                for x, y in zip(fa, fb)
            ]
            view_scores.append(sum(tap_scores) / len(tap_scores))
    return float(sum(view_scores) / len(view_scores))


def dice(pred: Volume, gt: Volume, label: int = 1) -> float:
    """Overlap of the binarized label masks; 1.0 when both masks are empty."""
    _check_dims(pred, gt)
    p = np.rint(pred.data).astype(np.int64) == label
    g = np.rint(gt.data).astype(np.int64) == label
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(p, g).sum())
    return 2.0 * inter / total


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    """Per-case metric values plus mean/std aggregates.

    Non-finite PSNR values are excluded from the aggregate and counted in
    ``inf_count`` instead.
    """

    per_case: dict[str, dict[str, float]]
    aggregate: dict[str, dict[str, float]]


def build_report(per_case: dict[str, dict[str, float]]) -> MetricsReport:
    metrics = sorted({m for row in per_case.values() for m in row})
    aggregate = {}
    for m in metrics:
        values = [row[m] for row in per_case.values() if m in row]
        finite = [v for v in values if math.isfinite(v)]
        entry = {
            "mean": float(np.mean(finite)) if finite else math.nan,
            "std": float(np.std(finite)) if finite else math.nan,
            "count": len(finite),
        }
        inf_count = len(values) - len(finite)
        if inf_count:
            entry["inf_count"] = inf_count
        aggregate[m] = entry
    return MetricsReport(per_case=per_case, aggregate=aggregate)


_TABLE_ORDER = [
    ("ssim", "SSIM↑"),
    ("psnr", "PSNR↑"),
    ("nmse", "NMSE↓"),
    ("lpips", "LPIPS↓"),
    ("dice", "Dice↑"),
]


def render_table(report: MetricsReport, title: str = "") -> str:
    """Human-readable mean +/- std table over the standard metric columns."""
    cols = [(key, label) for key, label in _TABLE_ORDER if key in report.aggregate]
    cols += [
        (key, key) for key in report.aggregate if key not in {k for k, _ in _TABLE_ORDER}
    ]
    lines = []
    if title:
        lines.append(title)
    header = "  ".join(f"{label:>16}" for _, label in cols)
    lines.append(header)
    cells = []
    for key, _ in cols:
        agg = report.aggregate[key]
        cell = f"{agg['mean']:.4f} ± {agg['std']:.4f}"
        if agg.get("inf_count"):
            cell += f" ({agg['inf_count']} inf)"
        cells.append(f"{cell:>16}")
    lines.append("  ".join(cells))
    return "\n".join(lines)


def translate_volume(
    gen: TranslationGenerator,
    vol: Volume,
    patch_size: tuple[int, int, int],
    overlap: float = DEFAULT_OVERLAP,
    sigma_scale: float = DEFAULT_SIGMA_SCALE,
) -> Volume:
    """Sliding-window translation of a whole volume through the generator."""
    return sliding_window_infer(vol, as_patch_model(gen), patch_size, overlap, sigma_scale)


def evaluate_translation(
    gen: TranslationGenerator,
    manifest: DatasetManifest,
    fx_metric: MultiTapExtractor,
    patch_size: tuple[int, int, int],
    overlap: float = DEFAULT_OVERLAP,
    sigma_scale: float = DEFAULT_SIGMA_SCALE,
) -> MetricsReport:
    """Translate every TEST case and score it against the ground truth."""
    cases = manifest.test_cases
    if not cases:
        raise EmptyManifest("manifest has no TEST cases to evaluate")
    per_case = {}
    for case in cases:
        src = load_volume(case.source)
        tgt = load_volume(case.target)
        syn = translate_volume(gen, src, patch_size, overlap, sigma_scale)
        per_case[case.case_id] = {
            "ssim": ssim3d(syn, tgt),
            "psnr": psnr(syn, tgt),
            "nmse": nmse(syn, tgt),
            "lpips": lpips_2p5d(syn, tgt, fx_metric),
        }
    return build_report(per_case)


# ---------------------------------------------------------------------------
# applicability: train-a-segmenter mode


@dataclasses.dataclass(frozen=True)
class SegTrainConfig:
    """Pinned segmenter recipe so Dice comparisons across models are fair."""

    base_channels: int = 8
    num_classes: int = 2
    steps: int = 300
    lr: float = 1e-3
    batch_size: int = 2
    patch_size: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    fg_bias: float = 0.5

    def __post_init__(self):
        if self.num_classes < 2 or self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid segmenter training config")
        if not 0.0 <= self.fg_bias <= 1.0:
            raise ValueError("fg_bias must lie in [0, 1]")
        object.__setattr__(self, "patch_size", tuple(int(s) for s in self.patch_size))


class SmallUNet3d(nn.Module):
    """Fixed 3-level UNet used only for the applicability assessment."""

    def __init__(self, base_channels: int = 8, num_classes: int = 2):
        super().__init__()
        c = base_channels
        self.enc0 = self._block(1, c)
        self.enc1 = self._block(c, 2 * c, stride=2)
        self.enc2 = self._block(2 * c, 4 * c, stride=2)
        self.dec1 = self._block(4 * c + 2 * c, 2 * c)
        self.dec0 = self._block(2 * c + c, c)
        self.head = nn.Conv3d(c, num_classes, 1)

    @staticmethod
    def _block(cin, cout, stride=1):
        return nn.Sequential(
            nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
            nn.InstanceNorm3d(cout, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv3d(cout, cout, 3, padding=1),
            nn.InstanceNorm3d(cout, affine=True),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        d1 = F.interpolate(e2, size=e1.shape[2:], mode="trilinear", align_corners=False)
        d1 = self.dec1(torch.cat([d1, e1], dim=1))
        d0 = F.interpolate(d1, size=e0.shape[2:], mode="trilinear", align_corners=False)
        d0 = self.dec0(torch.cat([d0, e0], dim=1))
        return self.head(d0)


def soft_dice_ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy plus (1 - mean soft Dice over classes)."""
    ce = F.cross_entropy(logits, target)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, logits.shape[1]).movedim(-1, 1).to(probs)
    dims = (0, 2, 3, 4)
    eps = 1e-6
    inter = (probs * onehot).sum(dims)
    card = probs.sum(dims) + onehot.sum(dims)
    soft_dice = ((2 * inter + eps) / (card + eps)).mean()
    return ce + (1.0 - soft_dice)


def _random_crop(
    img: np.ndarray,
    lab: np.ndarray,
    size,
    rng: np.random.Generator,
    fg_coords: np.ndarray | None = None,
    fg_bias: float = 0.0,
):
    """Crop a training window, optionally biased toward foreground.

    Blob masks cover around one percent of the volume, so uniform windows
    mostly show background and starve the loss of boundary gradient. With
    probability ``fg_bias`` the window is centred on a random foreground
    voxel (clamped to the volume) instead of placed uniformly.
    """
    if fg_coords is not None and len(fg_coords) and rng.random() < fg_bias:
        center = fg_coords[int(rng.integers(len(fg_coords)))]
        origin = [
            int(np.clip(int(c) - s // 2, 0, d - s))
            for c, d, s in zip(center, img.shape, size)
        ]
    else:
        origin = [int(rng.integers(d - s + 1)) for d, s in zip(img.shape, size)]
    region = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return img[region], lab[region]


def train_segmenter(
    images: Sequence[Volume], labels: Sequence[Volume], cfg: SegTrainConfig
) -> SmallUNet3d:
    """Fit the pinned small UNet on (image, label) volume pairs."""
    if len(images) != len(labels) or not images:
        raise MissingLabels("segmenter training needs matching image/label lists")
    for img, lab in zip(images, labels):
        if img.dims != lab.dims:
            raise ShapeMismatch(f"image dims {img.dims} != label dims {lab.dims}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = SmallUNet3d(cfg.base_channels, cfg.num_classes)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    size = tuple(min(s, d) for s, d in zip(cfg.patch_size, images[0].dims))
    fg_coords = [np.argwhere(np.rint(lab.data) > 0) for lab in labels]
    model.train()
    for _ in range(cfg.steps):
        xs, ys = [], []
        for _ in range(cfg.batch_size):
            idx = int(rng.integers(len(images)))
            img, lab = _random_crop(
                images[idx].data,
                labels[idx].data,
                size,
                rng,
                fg_coords[idx],
                cfg.fg_bias,
            )
            xs.append(torch.from_numpy(img.copy()))
            ys.append(torch.from_numpy(np.rint(lab).astype(np.int64)))
        x = torch.stack(xs).unsqueeze(1)
        y = torch.stack(ys)
        loss = soft_dice_ce_loss(model(x), y)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    return model


def segment(
    model: SmallUNet3d,
    vol: Volume,
    patch_size: tuple[int, int, int] | None = None,
    overlap: float = 0.5,
) -> Volume:
    """Argmax segmentation of a volume.

    With ``patch_size`` the volume is traversed in Gaussian-blended sliding
    windows and class probabilities are averaged before the argmax. Windows
    sized like the training patches keep the instance-norm statistics in the
    regime the model was fitted under; normalizing over a whole, mostly
    background volume shifts every feature map and costs real accuracy.
    """
    model.eval()
    data = vol.data
    if patch_size is None:
        with torch.no_grad():
            logits = model(torch.from_numpy(data.copy()).unsqueeze(0).unsqueeze(0))
            pred = logits.argmax(dim=1).squeeze(0).numpy().astype(np.float32)
        return Volume(pred, vol.spacing, vol.modality, IntensityDomain.RAW)

    size = tuple(min(int(s), d) for s, d in zip(patch_size, data.shape))
    stride = tuple(max(1, int(np.floor(s * (1.0 - overlap)))) for s in size)
    weights = gaussian_importance(size)
    num_classes = model.head.out_channels
    accs = [BlendAccumulator(data.shape) for _ in range(num_classes)]
    with torch.no_grad():
        for oz in _tile_origins(data.shape[0], size[0], stride[0]):
            for oy in _tile_origins(data.shape[1], size[1], stride[1]):
                for ox in _tile_origins(data.shape[2], size[2], stride[2]):
                    origin = (oz, oy, ox)
                    region = tuple(slice(o, o + s) for o, s in zip(origin, size))
                    tile = torch.from_numpy(np.ascontiguousarray(data[region]))
                    probs = torch.softmax(model(tile[None, None]), dim=1)[0].numpy()
                    for c in range(num_classes):
                        accs[c].add(origin, probs[c], weights)
    stacked = np.stack([acc.finalize() for acc in accs])
    pred = stacked.argmax(axis=0).astype(np.float32)
    return Volume(pred, vol.spacing, vol.modality, IntensityDomain.RAW)


def _mean_foreground_dice(pred: Volume, gt: Volume, num_classes: int) -> float:
    scores = [dice(pred, gt, label=c) for c in range(1, num_classes)]
    return float(np.mean(scores))


def applicability_train_mode(
    train_images: Sequence[Volume],
    train_labels: Sequence[Volume],
    test_images: Sequence[Volume],
    test_labels: Sequence[Volume],
    cfg: SegTrainConfig = SegTrainConfig(),
    upper_bound_images: Sequence[Volume] | None = None,
) -> dict:
    """Train a segmenter on (synthetic) images, score Dice on real test data.

    When ``upper_bound_images`` (the corresponding real training images) are
    given, a second segmenter trained on them provides the upper-bound Dice
    under the identical recipe.
    """
    if not test_images:
        raise EmptyManifest("no test cases for the applicability assessment")
    if len(test_images) != len(test_labels) or any(v is None for v in test_labels):
        raise MissingLabels("every test case needs a label volume")
    if any(v is None for v in train_labels):
        raise MissingLabels("every training case needs a label volume")

    model = train_segmenter(train_images, train_labels, cfg)
    per_case = {}
    for i, (img, lab) in enumerate(zip(test_images, test_labels)):
        per_case[f"case_{i:04d}"] = _mean_foreground_dice(
            segment(model, img, cfg.patch_size), lab, cfg.num_classes
        )
    report = {
        "per_case": per_case,
        "mean_dice": float(np.mean(list(per_case.values()))),
    }
    if upper_bound_images is not None:
        upper = train_segmenter(upper_bound_images, train_labels, cfg)
        upper_per_case = {}
        for i, (img, lab) in enumerate(zip(test_images, test_labels)):
            upper_per_case[f"case_{i:04d}"] = _mean_foreground_dice(
                segment(upper, img, cfg.patch_size), lab, cfg.num_classes
            )
        report["upper_bound"] = {
            "per_case": upper_per_case,
            "mean_dice": float(np.mean(list(upper_per_case.values()))),
        }
    return report


# ---------------------------------------------------------------------------
# applicability: pretrained-adapter mode


@dataclasses.dataclass(frozen=True)
class SegmenterAdapter:
    """Opaque pretrained segmenter: Volume in, integer-label Volume out."""

    name: str
    label_map: dict[int, str]
    fn: Callable[[Volume], Volume]

    def __call__(self, vol: Volume) -> Volume:
        out = self.fn(vol)
        if out.dims != vol.dims:
            raise ShapeMismatch(
                f"adapter {self.name} returned dims {out.dims} for input {vol.dims}"
            )
        return out


def threshold_adapter(threshold: float = 0.5, name: str = "threshold") -> SegmenterAdapter:
    """Trivial intensity-threshold segmenter, used as a deterministic fixture."""

    def fn(vol: Volume) -> Volume:
        mask = (vol.data > threshold).astype(np.float32)
        return Volume(mask, vol.spacing, vol.modality, IntensityDomain.RAW)

    return SegmenterAdapter(name=name, label_map={1: "foreground"}, fn=fn)


def applicability_pretrained_mode(
    synthetic: Sequence[Volume], real: Sequence[Volume], adapter: SegmenterAdapter
) -> dict:
    """Compare a fixed segmenter's outputs on synthetic vs real volumes."""
    if len(synthetic) != len(real) or not synthetic:
        raise ShapeMismatch("synthetic and real volume lists must pair up")
    per_case = {}
    for i, (syn, rl) in enumerate(zip(synthetic, real)):
        seg_syn = adapter(syn)
        seg_real = adapter(rl)
        per_case[f"case_{i:04d}"] = {
            name: dice(seg_syn, seg_real, label=lbl)
            for lbl, name in adapter.label_map.items()
        }
    per_label = {
        name: float(np.mean([row[name] for row in per_case.values()]))
        for name in adapter.label_map.values()
    }
    return {
        "adapter": adapter.name,
        "per_case": per_case,
        "per_label": per_label,
        "mean_dice": float(np.mean(list(per_label.values()))),
    }
