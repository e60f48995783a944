"""Volume containers, intensity scaling, spatial normalization, and pyramids.

A :class:`Volume` is the currency of the whole pipeline: a 3D float32 grid in
depth x height x width order plus voxel spacing in millimeters. Volumes are
immutable after construction (the backing array is marked read-only) and all
operations here are pure functions, safe to call from parallel workers.
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np
from scipy import ndimage

from .errors import DegenerateRange, EmptyManifest, TooManyLevels

# Tolerance when snapping near-[0,1] values into the UNIT domain. Blending and
# float32 round-off may overshoot the bounds by a few ulps; anything beyond
# this is a real contract violation and raises.
_UNIT_SNAP_TOL = 1e-5

CT_CLIP_MIN = -1024.0
CT_CLIP_MAX = 3000.0


class Modality(enum.Enum):
    T1 = "T1"
    T2 = "T2"
    FLAIR = "FLAIR"
    CT = "CT"
    CBCT = "CBCT"
    GENERIC = "GENERIC"


class IntensityDomain(enum.Enum):
    RAW = "RAW"
    UNIT = "UNIT"


MRI_MODALITIES = frozenset({Modality.T1, Modality.T2, Modality.FLAIR, Modality.GENERIC})
CT_MODALITIES = frozenset({Modality.CT, Modality.CBCT})


@dataclasses.dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid with voxel spacing and modality metadata.

    Attributes:
        data: float32 array of shape (depth, height, width), finite everywhere.
        spacing: millimeters per voxel along (depth, height, width); all > 0.
        modality: acquisition type of the image.
        intensity_domain: RAW for native intensities, UNIT for values in [0, 1].
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    modality: Modality = Modality.GENERIC
    intensity_domain: IntensityDomain = IntensityDomain.RAW

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got {data.ndim}D")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing components must be positive finite, got {spacing}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains NaN/Inf voxels")
        if self.intensity_domain is IntensityDomain.UNIT:
            lo, hi = float(data.min()), float(data.max())
            if lo < -_UNIT_SNAP_TOL or hi > 1.0 + _UNIT_SNAP_TOL:
                raise ValueError(
                    f"UNIT volume out of range: [{lo}, {hi}] exceeds [0, 1] tolerance"
                )
            if lo < 0.0 or hi > 1.0:
                data = np.clip(data, 0.0, 1.0)
        if data is self.data:
            data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Grid dimensions as (depth, height, width)."""
        return self.data.shape

    def with_data(
        self,
        data: np.ndarray,
        *,
        spacing: tuple[float, float, float] | None = None,
        modality: Modality | None = None,
        intensity_domain: IntensityDomain | None = None,
    ) -> "Volume":
        """New volume from ``data``, inheriting unchanged metadata."""
        return Volume(
            data=data,
            spacing=self.spacing if spacing is None else spacing,
            modality=self.modality if modality is None else modality,
            intensity_domain=(
                self.intensity_domain if intensity_domain is None else intensity_domain
            ),
        )


@dataclasses.dataclass(frozen=True)
class ResolutionPyramid:
    """Ordered stack of volumes at dyadically decreasing resolutions.

    Level 0 is full resolution; level k+1 has per-axis dims
    ceil(dims(level k) / 2). All levels share modality and intensity domain.
    """

    levels: tuple[Volume, ...]
    factor: int = 2

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        if self.factor != 2:
            raise ValueError("only factor-2 pyramids are supported")
        object.__setattr__(self, "levels", tuple(self.levels))
        base = self.levels[0]
        for k, lvl in enumerate(self.levels[1:], start=1):
            prev = self.levels[k - 1]
            want = tuple((d + 1) // 2 for d in prev.dims)
            if lvl.dims != want:
                raise ValueError(f"level {k} dims {lvl.dims} != ceil(previous / 2) {want}")
            if lvl.modality is not base.modality or lvl.intensity_domain is not base.intensity_domain:
                raise ValueError("pyramid levels must share modality and intensity domain")

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, k: int) -> Volume:
        return self.levels[k]


class Split(enum.Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"


@dataclasses.dataclass(frozen=True)
class CaseRecord:
    case_id: str
    source: str
    target: str
    label: str | None = None


@dataclasses.dataclass(frozen=True)
class DatasetManifest:
    """Case list plus a TRAIN/TEST split keyed by case id."""

    cases: tuple[CaseRecord, ...]
    split: dict[str, Split]

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple(self.cases))
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate case ids in manifest")
        missing = [i for i in ids if i not in self.split]
        if missing:
            raise ValueError(f"cases without split assignment: {missing}")

    def subset(self, split: Split) -> tuple[CaseRecord, ...]:
        return tuple(c for c in self.cases if self.split[c.case_id] is split)

    @property
    def train_cases(self) -> tuple[CaseRecord, ...]:
        return self.subset(Split.TRAIN)

    @property
    def test_cases(self) -> tuple[CaseRecord, ...]:
        return self.subset(Split.TEST)


def default_split(case_ids: list[str], train_fraction: float = 0.75) -> dict[str, Split]:
    """Leading-fraction split by case order; 75/25 by count (within one case)."""
    n_train = int(round(len(case_ids) * train_fraction))
    n_train = min(max(n_train, 0), len(case_ids))
    return {
        cid: (Split.TRAIN if i < n_train else Split.TEST)
        for i, cid in enumerate(case_ids)
    }


def scale_intensity_mri(vol: Volume) -> Volume:
    """Min-max scale an MRI volume into the UNIT domain.

    Raises:
        DegenerateRange: if the volume is constant (max == min). Callers that
            want an all-zero fallback must substitute it explicitly.
    """
    if vol.modality not in MRI_MODALITIES:
        raise ValueError(f"min-max scaling expects an MRI-like modality, got {vol.modality}")
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi == lo:
        raise DegenerateRange(f"constant volume (all voxels = {lo}); cannot min-max scale")
    scaled = (vol.data - np.float32(lo)) / np.float32(hi - lo)
    return vol.with_data(scaled, intensity_domain=IntensityDomain.UNIT)


def scale_intensity_ct(vol: Volume) -> Volume:
    """Clip CT/CBCT intensities to [-1024, 3000] and map that range to [0, 1].

    The bounds are fixed, not the observed min/max, so outlier voxels saturate
    instead of stretching the scale.
    """
    if vol.modality not in CT_MODALITIES:
        raise ValueError(f"clip scaling expects CT/CBCT, got {vol.modality}")
    clipped = np.clip(vol.data, CT_CLIP_MIN, CT_CLIP_MAX)
    scaled = (clipped - np.float32(CT_CLIP_MIN)) / np.float32(CT_CLIP_MAX - CT_CLIP_MIN)
    return vol.with_data(scaled, intensity_domain=IntensityDomain.UNIT)


def scale_intensity(vol: Volume) -> Volume:
    """Dispatch to the modality-appropriate intensity scaler."""
    if vol.modality in CT_MODALITIES:
        return scale_intensity_ct(vol)
    return scale_intensity_mri(vol)


def compute_population_spacing(
    manifest: DatasetManifest, *, train_only: bool = False
) -> tuple[float, float, float]:
    """Per-axis arithmetic mean of source-volume spacings over the population.

    By default the mean runs over all cases; ``train_only`` restricts it to
    the TRAIN split.
    """
    from .io import read_volume_header  # local import: io depends on this module

    cases = manifest.train_cases if train_only else manifest.cases
    if not cases:
        raise EmptyManifest("manifest has no cases to average spacing over")
    acc = np.zeros(3, dtype=np.float64)
    for case in cases:
        _, spacing = read_volume_header(case.source)
        acc += np.asarray(spacing, dtype=np.float64)
    mean = acc / len(cases)
    return (float(mean[0]), float(mean[1]), float(mean[2]))


def resample(vol: Volume, target_spacing: tuple[float, float, float]) -> Volume:
    """Trilinearly resample onto a grid with the requested voxel spacing.

    New dims are round(dim * spacing / target_spacing) per axis with a floor
    of 1. Sampling is corner-anchored (voxel i sits at i * spacing mm) with
    edge clamping. An exact spacing match returns the input unchanged.
    """
    target = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target):
        raise ValueError(f"target spacing must be positive, got {target}")
    if target == vol.spacing:
        return vol
    old_dims = vol.dims
    new_dims = tuple(
        max(1, int(round(d * s_old / s_new)))
        for d, s_old, s_new in zip(old_dims, vol.spacing, target)
    )
    axes = [
        np.arange(n, dtype=np.float64) * (s_new / s_old)
        for n, s_old, s_new in zip(new_dims, vol.spacing, target)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.reshape(-1) for g in grid])
    out = ndimage.map_coordinates(
        vol.data.astype(np.float32), coords, order=1, mode="nearest"
    ).reshape(new_dims)
    return vol.with_data(out.astype(np.float32), spacing=target)


def avg_pool_ceil(a: np.ndarray) -> np.ndarray:
    """2x2x2 average pooling with padding-free ceil handling of odd dims.

    Edge cells whose window extends past the boundary average only the voxels
    that exist, so constant fields stay constant and (for even dims) the mean
    is preserved exactly.
    """
    out_shape = tuple((d + 1) // 2 for d in a.shape)
    acc = np.zeros(out_shape, dtype=np.float64)
    cnt = np.zeros(out_shape, dtype=np.float64)
    for dz in range(2):
        for dy in range(2):
            for dx in range(2):
                part = a[dz::2, dy::2, dx::2]
                region = tuple(slice(0, n) for n in part.shape)
                acc[region] += part
                cnt[region] += 1.0
    return (acc / cnt).astype(np.float32)


def build_pyramid(vol: Volume, num_levels: int) -> ResolutionPyramid:
    """Stack ``vol`` with ``num_levels - 1`` successive 2x downsamplings.

    Downsampling is 2x2x2 average pooling (mean-preserving, the adjoint of
    nearest upsampling), with ceil handling for odd trailing dims.
    """
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    min_dim = 2 ** (num_levels - 1)
    if any(d < min_dim for d in vol.dims):
        raise TooManyLevels(
            f"{num_levels} levels need every dim >= {min_dim}, got {vol.dims}"
        )
    levels = [vol]
    data = vol.data
    for k in range(1, num_levels):
        data = avg_pool_ceil(data)
        spacing = tuple(s * 2 for s in levels[-1].spacing)
        levels.append(vol.with_data(data, spacing=spacing))
    return ResolutionPyramid(levels=tuple(levels))
