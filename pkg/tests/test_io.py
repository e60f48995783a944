"""Volume file codecs and manifest round-trips."""

import gzip
import struct

import numpy as np
import pytest

from conftest import random_unit_volume, unit_volume
from voxtrans.errors import (
    CorruptHeader,
    EmptyManifest,
    IOFailure,
    ManifestError,
    UnsupportedFormat,
)
from voxtrans.io import (
    load_manifest,
    load_volume,
    read_volume_header,
    save_manifest,
    save_volume,
)
from voxtrans.volumes import (
    CaseRecord,
    DatasetManifest,
    IntensityDomain,
    Modality,
    Split,
    Volume,
)


def _patch_nifti_field(path, offset, fmt, value):
    """Rewrite one header field of a gzipped volume file in place."""
    blob = bytearray(gzip.decompress(open(path, "rb").read()))
    struct.pack_into(fmt, blob, offset, *value)
    with open(path, "wb") as f:
        f.write(gzip.compress(bytes(blob)))


class TestNifti:
    @pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
    def test_round_trip_values_exact(self, rng, tmp_path, suffix):
        vol = random_unit_volume(rng)
        path = str(tmp_path / f"v{suffix}")
        save_volume(vol, path)
        back = load_volume(path)
        assert np.abs(back.data - vol.data).max() <= 1e-6

    def test_round_trip_metadata(self, rng, tmp_path):
        vol = Volume(
            rng.random((5, 6, 7), dtype=np.float32),
            (0.5, 1.25, 2.0),
            Modality.CT,
            IntensityDomain.UNIT,
        )
        path = str(tmp_path / "v.nii.gz")
        save_volume(vol, path)
        back = load_volume(path)
        assert back.spacing == pytest.approx(vol.spacing, abs=1e-6)
        assert back.modality is Modality.CT
        assert back.intensity_domain is IntensityDomain.UNIT

    def test_dims_order_preserved(self, rng, tmp_path):
        vol = unit_volume(rng.random((16, 24, 32), dtype=np.float32))
        path = str(tmp_path / "v.nii.gz")
        save_volume(vol, path)
        assert load_volume(path).dims == (16, 24, 32)
        dims, spacing = read_volume_header(path)
        assert dims == (16, 24, 32)
        assert spacing == pytest.approx((1.0, 1.0, 1.0))

    def test_compressed_output_is_deterministic(self, rng, tmp_path):
        vol = random_unit_volume(rng)
        p1, p2 = str(tmp_path / "a.nii.gz"), str(tmp_path / "b.nii.gz")
        save_volume(vol, p1)
        save_volume(vol, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_nonpositive_spacing_rejected(self, rng, tmp_path):
        path = str(tmp_path / "v.nii.gz")
        save_volume(random_unit_volume(rng), path)
        # pixdim[1] lives at byte offset 80 in the 348-byte header
        _patch_nifti_field(path, 80, "<f", (0.0,))
        with pytest.raises(CorruptHeader, match="spacing|pixdim"):
            load_volume(path)

    def test_bad_magic_rejected(self, rng, tmp_path):
        path = str(tmp_path / "v.nii.gz")
        save_volume(random_unit_volume(rng), path)
        _patch_nifti_field(path, 344, "4s", (b"XXX\0",))
        with pytest.raises(CorruptHeader):
            load_volume(path)

    def test_detached_header_magic_unsupported(self, rng, tmp_path):
        path = str(tmp_path / "v.nii.gz")
        save_volume(random_unit_volume(rng), path)
        _patch_nifti_field(path, 344, "4s", (b"ni1\0",))
        with pytest.raises(UnsupportedFormat):
            load_volume(path)

    def test_scale_slope_and_intercept_applied(self, rng, tmp_path):
        # RAW domain so the rescaled values are not bound to [0, 1]
        vol = Volume(
            rng.random((6, 6, 6), dtype=np.float32),
            (1.0, 1.0, 1.0),
            Modality.GENERIC,
            IntensityDomain.RAW,
        )
        path = str(tmp_path / "v.nii.gz")
        save_volume(vol, path)
        # scl_slope at offset 112, scl_inter at 116
        _patch_nifti_field(path, 112, "<f", (2.0,))
        _patch_nifti_field(path, 116, "<f", (0.25,))
        back = load_volume(path)
        assert np.allclose(back.data, vol.data * 2.0 + 0.25, atol=1e-6)

    def test_missing_file_is_io_failure(self, tmp_path):
        with pytest.raises(IOFailure):
            load_volume(str(tmp_path / "absent.nii.gz"))

    def test_unknown_extension_rejected(self, rng, tmp_path):
        with pytest.raises(UnsupportedFormat):
            save_volume(random_unit_volume(rng), str(tmp_path / "v.mha"))
        with pytest.raises(UnsupportedFormat):
            load_volume(str(tmp_path / "v.mha"))


class TestRawvol:
    def test_round_trip(self, rng, tmp_path):
        vol = Volume(
            rng.random((4, 5, 6), dtype=np.float32),
            (2.0, 1.0, 0.5),
            Modality.T1,
            IntensityDomain.UNIT,
        )
        path = str(tmp_path / "v.rawvol")
        save_volume(vol, path)
        back = load_volume(path)
        assert back.data.tobytes() == vol.data.tobytes()
        assert back.spacing == pytest.approx(vol.spacing)
        assert back.modality is Modality.T1

    def test_header_dims_readable_without_payload(self, rng, tmp_path):
        path = str(tmp_path / "v.rawvol")
        save_volume(random_unit_volume(rng, (3, 4, 5)), path)
        dims, spacing = read_volume_header(path)
        assert dims == (3, 4, 5)

    def test_truncated_payload_rejected(self, rng, tmp_path):
        path = str(tmp_path / "v.rawvol")
        save_volume(random_unit_volume(rng), path)
        blob = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(blob[:-16])
        with pytest.raises(CorruptHeader):
            load_volume(path)


class TestManifestIO:
    def _write(self, tmp_path, rng):
        vols = {}
        for name in ("a_src", "a_tgt", "a_lab", "b_src", "b_tgt"):
            path = str(tmp_path / f"{name}.nii.gz")
            save_volume(random_unit_volume(rng, (4, 4, 4)), path)
            vols[name] = path
        cases = (
            CaseRecord("a", vols["a_src"], vols["a_tgt"], vols["a_lab"]),
            CaseRecord("b", vols["b_src"], vols["b_tgt"]),
        )
        manifest = DatasetManifest(cases, {"a": Split.TRAIN, "b": Split.TEST})
        path = str(tmp_path / "manifest.csv")
        save_manifest(manifest, path)
        return manifest, path

    def test_round_trip(self, rng, tmp_path):
        manifest, path = self._write(tmp_path, rng)
        back = load_manifest(path)
        assert [c.case_id for c in back.cases] == ["a", "b"]
        assert back.split == manifest.split
        assert back.cases[0].label is not None
        assert back.cases[1].label is None

    def test_relative_paths_resolve_against_manifest_dir(self, rng, tmp_path):
        save_volume(random_unit_volume(rng, (4, 4, 4)), str(tmp_path / "s.nii.gz"))
        save_volume(random_unit_volume(rng, (4, 4, 4)), str(tmp_path / "t.nii.gz"))
        path = str(tmp_path / "m.csv")
        with open(path, "w") as f:
            f.write("case_id,source,target,label,split\n")
            f.write("x,s.nii.gz,t.nii.gz,,TRAIN\n")
        back = load_manifest(path)
        load_volume(back.cases[0].source)  # resolvable

    def test_empty_manifest_rejected(self, tmp_path):
        path = str(tmp_path / "m.csv")
        with open(path, "w") as f:
            f.write("case_id,source,target,label,split\n")
        with pytest.raises(EmptyManifest):
            load_manifest(path)

    def test_bad_split_value_rejected(self, tmp_path):
        path = str(tmp_path / "m.csv")
        with open(path, "w") as f:
            f.write("case_id,source,target,label,split\n")
            f.write("x,s.nii.gz,t.nii.gz,,VALIDATE\n")
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_wrong_columns_rejected(self, tmp_path):
        path = str(tmp_path / "m.csv")
        with open(path, "w") as f:
            f.write("id,src,dst\nx,a,b\n")
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_duplicate_ids_rejected(self, tmp_path):
        path = str(tmp_path / "m.csv")
        with open(path, "w") as f:
            f.write("case_id,source,target,label,split\n")
            f.write("x,s.nii.gz,t.nii.gz,,TRAIN\n")
            f.write("x,s.nii.gz,t.nii.gz,,TRAIN\n")
        with pytest.raises(ManifestError):
            load_manifest(path)
