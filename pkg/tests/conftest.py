"""Shared fixtures: small volumes, datasets, and model configs sized for CPU."""

from __future__ import annotations

import os

import numpy as np
import pytest

from voxtrans.discriminator import DiscriminatorConfig
from voxtrans.generator import GeneratorConfig
from voxtrans.synthdata import SynthSpec, TransformKind, generate_manifest
from voxtrans.volumes import IntensityDomain, Modality, Volume


def unit_volume(data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(
        np.asarray(data, dtype=np.float32),
        spacing,
        Modality.GENERIC,
        IntensityDomain.UNIT,
    )


def random_unit_volume(rng: np.random.Generator, dims=(8, 8, 8)) -> Volume:
    return unit_volume(rng.random(dims, dtype=np.float32))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def tiny_gen_config() -> GeneratorConfig:
    return GeneratorConfig(
        num_levels=3,
        num_output_levels=2,
        base_channels=4,
        rdb_layers_per_level=(1, 1, 1),
    )


@pytest.fixture
def tiny_disc_config() -> DiscriminatorConfig:
    return DiscriminatorConfig(num_levels=2, base_channels=4)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> tuple:
    """Four 24-cube cases (3 train / 1 test) shared across fast tests."""
    out = tmp_path_factory.mktemp("smalldata")
    spec = SynthSpec(
        size=(24, 24, 24),
        num_blobs=(2, 4),
        blob_radius=(3.0, 6.0),
        transform=TransformKind.INVERT_SMOOTH,
        seed=7,
    )
    manifest = generate_manifest(4, spec, out)
    return manifest, os.path.join(out, "manifest.csv")


@pytest.fixture(scope="session")
def overfit_dataset(tmp_path_factory) -> tuple:
    """Two noise-free 16-cube training cases whose mapping a small model nails."""
    out = tmp_path_factory.mktemp("overfit")
    spec = SynthSpec(
        size=(16, 16, 16),
        num_blobs=(1, 3),
        blob_radius=(2.0, 4.0),
        noise_sigma=0.0,
        transform=TransformKind.INVERT_SMOOTH,
        seed=11,
    )
    manifest = generate_manifest(3, spec, out)
    return manifest, os.path.join(out, "manifest.csv")
