"""Volume container, intensity scaling, resampling, pyramids, manifests."""

import numpy as np
import pytest

from conftest import unit_volume
from voxtrans.errors import DegenerateRange, EmptyManifest, TooManyLevels
from voxtrans.volumes import (
    CaseRecord,
    DatasetManifest,
    IntensityDomain,
    Modality,
    ResolutionPyramid,
    Split,
    Volume,
    build_pyramid,
    compute_population_spacing,
    default_split,
    resample,
    scale_intensity,
    scale_intensity_ct,
    scale_intensity_mri,
)


def raw_volume(data, spacing=(1.0, 1.0, 1.0), modality=Modality.GENERIC):
    return Volume(np.asarray(data, dtype=np.float32), spacing, modality)


class TestVolume:
    def test_rejects_non_3d(self):
        with pytest.raises(ValueError, match="3D"):
            Volume(np.zeros((4, 4), dtype=np.float32), (1, 1, 1))

    def test_rejects_non_finite(self):
        data = np.zeros((4, 4, 4), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            Volume(data, (1, 1, 1))

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValueError, match="spacing"):
            Volume(np.zeros((4, 4, 4), dtype=np.float32), (1, 0, 1))

    def test_unit_domain_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="UNIT"):
            unit_volume(np.full((4, 4, 4), 1.5, dtype=np.float32))

    def test_unit_domain_snaps_tolerable_overshoot(self):
        data = np.full((4, 4, 4), 1.0 + 5e-6, dtype=np.float32)
        vol = unit_volume(data)
        assert float(vol.data.max()) == 1.0

    def test_data_is_read_only(self):
        vol = raw_volume(np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            vol.data[0, 0, 0] = 1.0

    def test_dims_order_depth_height_width(self):
        vol = raw_volume(np.zeros((3, 5, 7)))
        assert vol.dims == (3, 5, 7)


class TestIntensityScaling:
    def test_minmax_endpoints_and_midpoint(self):
        data = np.array([10.0, 20.0, 15.0, 12.5], dtype=np.float32).reshape(1, 1, 4)
        out = scale_intensity_mri(raw_volume(data, modality=Modality.T1))
        assert out.data[0, 0, 0] == 0.0
        assert out.data[0, 0, 1] == 1.0
        assert out.data[0, 0, 2] == 0.5
        assert out.intensity_domain is IntensityDomain.UNIT

    def test_minmax_constant_volume_raises(self):
        with pytest.raises(DegenerateRange):
            scale_intensity_mri(raw_volume(np.full((4, 4, 4), 3.0), modality=Modality.T2))

    def test_ct_clip_bounds_and_midpoint(self):
        data = np.array([-2000.0, 3000.0, 988.0, -1024.0], dtype=np.float32).reshape(1, 1, 4)
        out = scale_intensity_ct(raw_volume(data, modality=Modality.CT))
        assert out.data[0, 0, 0] == 0.0
        assert out.data[0, 0, 1] == 1.0
        assert out.data[0, 0, 2] == 0.5
        assert out.data[0, 0, 3] == 0.0

    def test_dispatch_by_modality(self):
        ct = raw_volume(np.linspace(-500, 500, 64).reshape(4, 4, 4), modality=Modality.CBCT)
        mr = raw_volume(np.linspace(0, 900, 64).reshape(4, 4, 4), modality=Modality.FLAIR)
        assert scale_intensity(ct).intensity_domain is IntensityDomain.UNIT
        assert scale_intensity(mr).intensity_domain is IntensityDomain.UNIT

    @pytest.mark.parametrize("modality", [Modality.T1, Modality.CT])
    def test_scaling_is_monotone(self, rng, modality):
        values = np.sort(rng.normal(0, 800, 64)).astype(np.float32).reshape(4, 4, 4)
        out = scale_intensity(raw_volume(values, modality=modality))
        flat = out.data.ravel()
        assert np.all(np.diff(flat) >= 0)

    @pytest.mark.parametrize("modality", [Modality.T2, Modality.CBCT])
    def test_scaled_output_always_in_unit_interval(self, rng, modality):
        values = rng.normal(0, 1e5, (4, 4, 4)).astype(np.float32)
        out = scale_intensity(raw_volume(values, modality=modality))
        assert float(out.data.min()) >= 0.0
        assert float(out.data.max()) <= 1.0


class TestPopulationSpacing:
    def _manifest(self, tmp_path, spacings, split=None):
        from voxtrans.io import save_volume

        cases = []
        for i, sp in enumerate(spacings):
            cid = f"c{i}"
            path = str(tmp_path / f"{cid}.nii.gz")
            save_volume(raw_volume(np.zeros((4, 4, 4)), spacing=sp), path)
            cases.append(CaseRecord(cid, path, path))
        split = split or {c.case_id: Split.TRAIN for c in cases}
        return DatasetManifest(tuple(cases), split)

    def test_singleton_mean(self, tmp_path):
        m = self._manifest(tmp_path, [(1, 1, 1)])
        assert compute_population_spacing(m) == (1.0, 1.0, 1.0)

    def test_two_case_mean(self, tmp_path):
        m = self._manifest(tmp_path, [(1, 1, 1), (2, 2, 2)])
        assert compute_population_spacing(m) == (1.5, 1.5, 1.5)

    def test_per_axis_mean(self, tmp_path):
        m = self._manifest(tmp_path, [(0.8, 0.8, 1.0), (1.2, 1.2, 3.0)])
        sp = compute_population_spacing(m)
        assert sp == pytest.approx((1.0, 1.0, 2.0), abs=1e-6)

    def test_train_only_restriction(self, tmp_path):
        m = self._manifest(
            tmp_path,
            [(1, 1, 1), (3, 3, 3)],
            split={"c0": Split.TRAIN, "c1": Split.TEST},
        )
        assert compute_population_spacing(m, train_only=True) == (1.0, 1.0, 1.0)
        assert compute_population_spacing(m) == (2.0, 2.0, 2.0)

    def test_empty_manifest_raises(self):
        m = DatasetManifest((), {})
        with pytest.raises(EmptyManifest):
            compute_population_spacing(m)


class TestResample:
    def test_identity_is_bitwise(self, rng):
        vol = raw_volume(rng.random((6, 7, 8)), spacing=(1.5, 1.0, 2.0))
        out = resample(vol, vol.spacing)
        assert out.data.tobytes() == vol.data.tobytes()

    def test_halving_spacing_doubles_sampling(self, rng):
        vol = raw_volume(rng.random((64, 64, 64)))
        out = resample(vol, (2.0, 2.0, 2.0))
        assert out.dims == (32, 32, 32)
        assert out.spacing == (2.0, 2.0, 2.0)

    def test_constant_volume_stays_constant(self):
        vol = raw_volume(np.full((10, 10, 10), 0.7))
        out = resample(vol, (1.7, 0.9, 2.3))
        assert np.allclose(out.data, 0.7, atol=1e-6)

    def test_dims_floor_at_one(self):
        vol = raw_volume(np.ones((2, 2, 2)))
        out = resample(vol, (100.0, 100.0, 100.0))
        assert out.dims == (1, 1, 1)


class TestPyramid:
    def test_single_level_is_original(self, rng):
        vol = unit_volume(rng.random((8, 8, 8), dtype=np.float32))
        pyr = build_pyramid(vol, 1)
        assert len(pyr.levels) == 1
        assert pyr.levels[0].data.tobytes() == vol.data.tobytes()

    def test_ceil_dims_chain(self):
        vol = raw_volume(np.zeros((9, 12, 17)))
        pyr = build_pyramid(vol, 3)
        assert [v.dims for v in pyr.levels] == [(9, 12, 17), (5, 6, 9), (3, 3, 5)]

    def test_constant_volume_constant_at_every_level(self):
        vol = raw_volume(np.full((8, 8, 8), 0.25))
        pyr = build_pyramid(vol, 3)
        for level in pyr.levels:
            assert np.allclose(level.data, 0.25, atol=1e-7)

    def test_mean_preserved_for_even_dims(self, rng):
        vol = raw_volume(rng.random((16, 16, 16)))
        pyr = build_pyramid(vol, 3)
        means = [float(v.data.mean()) for v in pyr.levels]
        assert means[1] == pytest.approx(means[0], abs=1e-5)
        assert means[2] == pytest.approx(means[1], abs=1e-5)

    def test_spacing_doubles_per_level(self):
        vol = raw_volume(np.zeros((8, 8, 8)), spacing=(1.0, 1.5, 2.0))
        pyr = build_pyramid(vol, 2)
        assert pyr.levels[1].spacing == (2.0, 3.0, 4.0)

    def test_too_many_levels(self):
        vol = raw_volume(np.zeros((4, 4, 4)))
        with pytest.raises(TooManyLevels):
            build_pyramid(vol, 10)

    def test_pyramid_validates_dims(self, rng):
        a = unit_volume(rng.random((8, 8, 8), dtype=np.float32))
        b = unit_volume(rng.random((5, 5, 5), dtype=np.float32))
        with pytest.raises(ValueError):
            ResolutionPyramid((a, b))


class TestManifest:
    def test_default_split_4_cases(self):
        split = default_split(["a", "b", "c", "d"])
        values = list(split.values())
        assert values.count(Split.TRAIN) == 3
        assert values.count(Split.TEST) == 1

    def test_default_split_40_cases(self):
        split = default_split([f"c{i}" for i in range(40)])
        assert sum(1 for s in split.values() if s is Split.TRAIN) == 30

    def test_duplicate_ids_rejected(self):
        c = CaseRecord("x", "a.nii", "b.nii")
        with pytest.raises(ValueError, match="duplicate"):
            DatasetManifest((c, c), {"x": Split.TRAIN})

    def test_missing_split_rejected(self):
        c = CaseRecord("x", "a.nii", "b.nii")
        with pytest.raises(ValueError, match="split"):
            DatasetManifest((c,), {})

    def test_subsets(self):
        cases = (CaseRecord("a", "s", "t"), CaseRecord("b", "s", "t"))
        m = DatasetManifest(cases, {"a": Split.TRAIN, "b": Split.TEST})
        assert [c.case_id for c in m.train_cases] == ["a"]
        assert [c.case_id for c in m.test_cases] == ["b"]
