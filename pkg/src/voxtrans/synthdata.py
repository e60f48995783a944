"""Procedural paired-modality volumes for desk-scale training and testing.

Each case is a smooth random background plus a handful of Gaussian blobs.
Modality A adds voxel noise on top of that structure; modality B is a
deterministic transform of the noise-free structure, so the A-to-B mapping is
learnable by construction. The blob support doubles as a segmentation label.
"""

from __future__ import annotations

import dataclasses
import enum
import os

import numpy as np
from scipy import ndimage

from .errors import IOFailure
from .volumes import DatasetManifest, CaseRecord, IntensityDomain, Modality, Volume, default_split

# Blob indicator threshold on the max-combined blob field. Blob amplitudes are
# drawn strictly above this, so every blob contributes label voxels.
LABEL_THRESHOLD = 0.5

_BG_LO, _BG_HI = 0.10, 0.30
_AMP_LO, _AMP_HI = 0.55, 0.80


class TransformKind(enum.Enum):
    """Deterministic structure-to-modality-B mapping."""

    INVERT_SMOOTH = "INVERT_SMOOTH"
    EDGE_MIX = "EDGE_MIX"


@dataclasses.dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic case; identical specs generate identical data."""

    size: tuple[int, int, int] = (64, 64, 64)
    num_blobs: tuple[int, int] = (3, 8)
    blob_radius: tuple[float, float] = (4.0, 9.0)
    noise_sigma: float = 0.03
    transform: TransformKind = TransformKind.INVERT_SMOOTH
    smooth_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if any(int(s) < 4 for s in self.size):
            raise ValueError(f"size axes must be >= 4, got {self.size}")
        lo, hi = self.num_blobs
        if lo < 1 or hi < lo:
            raise ValueError(f"num_blobs range must satisfy 1 <= lo <= hi, got {self.num_blobs}")
        rlo, rhi = self.blob_radius
        if rlo <= 0 or rhi < rlo:
            raise ValueError(f"blob_radius range must be positive, got {self.blob_radius}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.smooth_sigma < 0:
            raise ValueError(f"smooth_sigma must be >= 0, got {self.smooth_sigma}")
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))


def _blob_field(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Max-combined Gaussian bumps; each peaks strictly above LABEL_THRESHOLD."""
    dims = spec.size
    n = int(rng.integers(spec.num_blobs[0], spec.num_blobs[1] + 1))
    grids = np.ogrid[0 : dims[0], 0 : dims[1], 0 : dims[2]]
    field = np.zeros(dims, dtype=np.float64)
    for _ in range(n):
        radius = float(rng.uniform(*spec.blob_radius))
        center = []
        for d in dims:
            m = min(radius, (d - 1) / 2.0)
            center.append(float(rng.uniform(m, d - 1 - m)))
        amp = float(rng.uniform(_AMP_LO, _AMP_HI))
        r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
        field = np.maximum(field, amp * np.exp(-r2 / (2.0 * radius**2)))
    return field


def generate_case(spec: SynthSpec) -> tuple[Volume, Volume, Volume]:
    """Build one (volA, volB, label) triple from ``spec``.

    volA is structure plus voxel noise; volB applies ``spec.transform`` to the
    noise-free structure; label marks voxels where the blob field exceeds
    LABEL_THRESHOLD. All three are deterministic functions of the spec.
    """
    rng = np.random.default_rng(spec.seed)
    dims = spec.size

    bg = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=min(dims) / 8.0)
    span = float(bg.max() - bg.min())
    if span > 0:
        bg = (bg - bg.min()) / span * (_BG_HI - _BG_LO) + _BG_LO
    else:
        bg = np.full(dims, (_BG_LO + _BG_HI) / 2.0)

    blobs = _blob_field(spec, rng)
    structure = np.clip(bg + blobs, 0.0, 1.0).astype(np.float32)

    vol_a = structure
    if spec.noise_sigma > 0:
        noise = rng.standard_normal(dims).astype(np.float32) * np.float32(spec.noise_sigma)
        vol_a = np.clip(structure + noise, 0.0, 1.0).astype(np.float32)

    if spec.transform is TransformKind.INVERT_SMOOTH:
        vol_b = np.float32(1.0) - structure
        if spec.smooth_sigma > 0:
            vol_b = ndimage.gaussian_filter(vol_b, sigma=spec.smooth_sigma)
    else:
        grads = np.gradient(structure)
        mag = np.sqrt(sum(g.astype(np.float64) ** 2 for g in grads))
        peak = float(mag.max())
        if peak > 0:
            mag = mag / peak
        vol_b = (0.5 * (1.0 - structure) + 0.5 * mag).astype(np.float32)

    label = (blobs > LABEL_THRESHOLD).astype(np.float32)

    spacing = (1.0, 1.0, 1.0)
    return (
        Volume(vol_a, spacing, Modality.GENERIC, IntensityDomain.UNIT),
        Volume(vol_b, spacing, Modality.GENERIC, IntensityDomain.UNIT),
        Volume(label, spacing, Modality.GENERIC, IntensityDomain.UNIT),
    )


def generate_manifest(n_cases: int, spec_template: SynthSpec, out_dir) -> DatasetManifest:
    """Write ``n_cases`` paired cases plus a 75/25 split manifest to ``out_dir``.

    Case i reuses the template with seed ``template.seed + i``. Paths in the
    CSV are relative to ``out_dir``; the returned manifest has them resolved.
    Rerunning with the same template reproduces every file bitwise.
    """
    from .io import load_manifest, save_manifest, save_volume

    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out_dir}: {exc}") from exc

    cases = []
    for i in range(n_cases):
        spec = dataclasses.replace(spec_template, seed=spec_template.seed + i)
        vol_a, vol_b, label = generate_case(spec)
        cid = f"case_{i:04d}"
        names = (f"{cid}_a.nii.gz", f"{cid}_b.nii.gz", f"{cid}_label.nii.gz")
        for vol, name in zip((vol_a, vol_b, label), names):
            save_volume(vol, os.path.join(out_dir, name))
        cases.append(CaseRecord(case_id=cid, source=names[0], target=names[1], label=names[2]))

    split = default_split([c.case_id for c in cases])
    manifest_path = os.path.join(out_dir, "manifest.csv")
    save_manifest(DatasetManifest(cases=tuple(cases), split=split), manifest_path)
    return load_manifest(manifest_path)
