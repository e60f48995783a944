"""Patch sampling for training and sliding-window inference with blending.

Training draws paired source/target patches at a shared random origin.
Inference tiles the volume with overlapping patches, runs the model on each,
and blends the predictions with a separable Gaussian importance map so tile
seams are invisible. Both halves are pure array code; the model is an opaque
callable mapping a float32 patch to a float32 patch of the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ModelOutputShapeMismatch, PatchTooLarge, ShapeMismatch
from .volumes import IntensityDomain, Volume

# Weights below this are clamped up so border voxels never divide by ~0.
WEIGHT_FLOOR = 1e-4

DEFAULT_PATCH_SIZE = (96, 96, 96)
DEFAULT_OVERLAP = 0.5
DEFAULT_SIGMA_SCALE = 0.125

PatchModel = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PatchSpec:
    """Location of a patch inside a parent volume: corner ``origin``, ``size``."""

    size: tuple[int, int, int]
    origin: tuple[int, int, int]

    def __post_init__(self):
        if len(self.size) != 3 or any(int(s) < 1 for s in self.size):
            raise ValueError(f"patch size must be three positive ints, got {self.size}")
        if len(self.origin) != 3 or any(int(o) < 0 for o in self.origin):
            raise ValueError(f"patch origin must be nonnegative, got {self.origin}")
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))


def _check_patch_fits(size, dims) -> None:
    if any(s > d for s, d in zip(size, dims)):
        raise PatchTooLarge(f"patch {tuple(size)} does not fit in volume {tuple(dims)}")


def extract_patch(vol: Volume, spec: PatchSpec) -> Volume:
    """Cut the patch described by ``spec`` out of ``vol``."""
    for o, s, d in zip(spec.origin, spec.size, vol.dims):
        if o + s > d:
            raise PatchTooLarge(
                f"patch origin {spec.origin} + size {spec.size} exceeds dims {vol.dims}"
            )
    return vol.with_data(vol.data[spec.slices()])


def sample_patch_pair(
    src: Volume,
    tgt: Volume,
    size: tuple[int, int, int] = DEFAULT_PATCH_SIZE,
    rng_seed: int = 0,
) -> tuple[Volume, Volume, PatchSpec]:
    """Draw one aligned source/target patch pair at a shared random origin.

    The origin is uniform over all valid corner positions and fully
    determined by ``rng_seed``.
    """
    if src.dims != tgt.dims:
        raise ShapeMismatch(f"source dims {src.dims} != target dims {tgt.dims}")
    size = tuple(int(s) for s in size)
    _check_patch_fits(size, src.dims)
    rng = np.random.default_rng(rng_seed)
    high = np.asarray([d - s + 1 for d, s in zip(src.dims, size)])
    origin = tuple(int(x) for x in rng.integers(0, high))
    spec = PatchSpec(size=size, origin=origin)
    return extract_patch(src, spec), extract_patch(tgt, spec), spec


def gaussian_importance(
    size: tuple[int, int, int], sigma_scale: float = DEFAULT_SIGMA_SCALE
) -> np.ndarray:
    """Separable Gaussian weight map over a patch grid.

    Per axis, sigma = sigma_scale * size and the Gaussian is centered at the
    continuous patch center (size - 1) / 2 with peak value 1. Weights are
    floor-clamped at WEIGHT_FLOOR so no voxel's blend weight is ever ~0.
    """
    if sigma_scale <= 0:
        raise ValueError(f"sigma_scale must be positive, got {sigma_scale}")
    size = tuple(int(s) for s in size)
    if len(size) != 3 or any(s < 1 for s in size):
        raise ValueError(f"size must be three positive ints, got {size}")
    axes = []
    for n in size:
        center = (n - 1) / 2.0
        sigma = sigma_scale * n
        i = np.arange(n, dtype=np.float64)
        axes.append(np.exp(-((i - center) ** 2) / (2.0 * sigma**2)))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return np.maximum(w, WEIGHT_FLOOR).astype(np.float32)


class BlendAccumulator:
    """Weighted running sum over a full-volume grid for tile blending.

    Accumulates in float64 so the blend partition property (a constant
    prediction blends back to exactly that constant) holds to tight
    tolerance regardless of tile count or ordering.
    """

    def __init__(self, dims: tuple[int, int, int]):
        self.value_sum = np.zeros(dims, dtype=np.float64)
        self.weight_sum = np.zeros(dims, dtype=np.float64)

    def add(self, origin: tuple[int, int, int], values: np.ndarray, weights: np.ndarray) -> None:
        if values.shape != weights.shape:
            raise ShapeMismatch(f"values {values.shape} vs weights {weights.shape}")
        region = tuple(slice(o, o + s) for o, s in zip(origin, values.shape))
        self.value_sum[region] += values.astype(np.float64) * weights
        self.weight_sum[region] += weights

    def finalize(self) -> np.ndarray:
        if not (self.weight_sum > 0).all():
            raise ValueError("blend finalize with uncovered voxels")
        return (self.value_sum / self.weight_sum).astype(np.float32)


def _tile_origins(dim: int, size: int, stride: int) -> list[int]:
    # regular grid, then a flush-aligned final tile so coverage reaches the edge
    origins = list(range(0, dim - size + 1, stride))
    last = dim - size
    if origins[-1] != last:
        origins.append(last)
    return origins


def sliding_window_infer(
    vol: Volume,
    model: PatchModel,
    patch_size: tuple[int, int, int] = DEFAULT_PATCH_SIZE,
    overlap: float = DEFAULT_OVERLAP,
    sigma_scale: float = DEFAULT_SIGMA_SCALE,
) -> Volume:
    """Run ``model`` over a Gaussian-blended tiling of ``vol``.

    Tiles advance with stride floor(patch_size * (1 - overlap)) per axis and
    the final tile per axis is aligned flush with the boundary. Volumes
    smaller than the patch are symmetric-padded for the model and cropped
    back, so output dims always equal input dims. The result is deterministic
    and independent of tile evaluation order.
    """
    if not (0 <= overlap < 1):
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    patch_size = tuple(int(s) for s in patch_size)
    if any(s < 1 for s in patch_size):
        raise ValueError(f"patch_size must be positive, got {patch_size}")

    data = vol.data
    pad = [(0, max(0, s - d)) for s, d in zip(patch_size, data.shape)]
    padded = data
    if any(p[1] for p in pad):
        padded = np.pad(data, pad, mode="symmetric")

    dims = padded.shape
    stride = tuple(max(1, int(np.floor(s * (1.0 - overlap)))) for s in patch_size)
    weights = gaussian_importance(patch_size, sigma_scale)
    acc = BlendAccumulator(dims)
    for oz in _tile_origins(dims[0], patch_size[0], stride[0]):
        for oy in _tile_origins(dims[1], patch_size[1], stride[1]):
            for ox in _tile_origins(dims[2], patch_size[2], stride[2]):
                origin = (oz, oy, ox)
                region = tuple(slice(o, o + s) for o, s in zip(origin, patch_size))
                pred = np.asarray(model(np.ascontiguousarray(padded[region])))
                if pred.shape != tuple(patch_size):
                    raise ModelOutputShapeMismatch(
                        f"model returned {pred.shape}, expected {tuple(patch_size)}"
                    )
                acc.add(origin, pred.astype(np.float32), weights)

    out = acc.finalize()
    crop = tuple(slice(0, d) for d in data.shape)
    out = np.ascontiguousarray(out[crop])

    domain = IntensityDomain.RAW
    if vol.intensity_domain is IntensityDomain.UNIT:
        lo, hi = float(out.min()), float(out.max())
        if lo >= -1e-5 and hi <= 1.0 + 1e-5:
            domain = IntensityDomain.UNIT
    return vol.with_data(out, intensity_domain=domain)
