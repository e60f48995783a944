"""File formats: NIfTI-1 volumes, a raw float32 fallback, and case manifests.

NIfTI-1 support is a self-contained reader/writer for the single-file flavor
(.nii / .nii.gz): fixed 348-byte header, spacing taken from pixdim, data
returned in (depth, height, width) order with the file's x axis mapped to
width. Modality and intensity-domain tags ride along in the header's descrip
field so save/load round-trips preserve them; files written elsewhere simply
load as GENERIC/RAW.

The raw fallback (.rawvol) is a little-endian float32 payload with a text
sidecar (``<path>.hdr``) carrying dims and spacing; it exists so tests and
dependency-light tooling never need a NIfTI parser.
"""

from __future__ import annotations

import csv
import gzip
import os
import struct

import numpy as np

from .errors import CorruptHeader, EmptyManifest, IOFailure, ManifestError, UnsupportedFormat
from .volumes import (
    CaseRecord,
    DatasetManifest,
    IntensityDomain,
    Modality,
    Split,
    Volume,
)

_NIFTI_HDR_SIZE = 348
_NIFTI_MAGIC = b"n+1\x00"
_NIFTI_PAIR_MAGIC = b"ni1\x00"

# NIfTI datatype code -> numpy dtype (unsized; endianness applied at read).
_NIFTI_DTYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
    768: "u4",
}
_FLOAT32_CODE = 16


class _DeterministicGzipWriter:
    """Gzip writer with zeroed mtime and no filename header.

    Regenerating a dataset must reproduce files bitwise; the stock gzip
    header embeds the current time, which would break that.
    """

    def __init__(self, path):
        self._raw = open(path, "wb")
        # filename="" keeps the path out of the header, so bytes depend on
        # content alone
        self._gz = gzip.GzipFile(filename="", fileobj=self._raw, mode="wb", mtime=0)

    def write(self, data):
        return self._gz.write(data)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._gz.close()
        self._raw.close()
        return False


def _nifti_open(path, mode):
    if str(path).endswith(".gz"):
        if "w" in mode:
            return _DeterministicGzipWriter(path)
        return gzip.open(path, mode)
    return open(path, mode)


def _descrip_tags(vol: Volume) -> bytes:
    text = f"modality={vol.modality.value};domain={vol.intensity_domain.value}"
    return text.encode("ascii")[:79]


def _parse_descrip(raw: bytes) -> tuple[Modality, IntensityDomain]:
    modality = Modality.GENERIC
    domain = IntensityDomain.RAW
    try:
        text = raw.split(b"\x00", 1)[0].decode("ascii")
    except UnicodeDecodeError:
        return modality, domain
    for part in text.split(";"):
        key, _, value = part.partition("=")
        if key == "modality":
            try:
                modality = Modality(value)
            except ValueError:
                pass
        elif key == "domain":
            try:
                domain = IntensityDomain(value)
            except ValueError:
                pass
    return modality, domain


def _pack_nifti_header(vol: Volume) -> bytes:
    depth, height, width = vol.dims
    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    # dim[0..7]: file x axis is our width, z is our depth
    struct.pack_into("<8h", hdr, 40, 3, width, height, depth, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _FLOAT32_CODE)  # datatype
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    sd, sh, sw = vol.spacing
    struct.pack_into("<8f", hdr, 76, 0.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: millimeters
    descrip = _descrip_tags(vol)
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<h", hdr, 252, 1)  # qform_code: scanner
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    # sform: plain scaling affine in file-axis order (x=width, y=height, z=depth)
    struct.pack_into("<h", hdr, 254, 1)
    struct.pack_into("<4f", hdr, 280, sw, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, sh, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sd, 0.0)
    hdr[344:348] = _NIFTI_MAGIC
    return bytes(hdr)


def save_nifti(vol: Volume, path) -> None:
    """Write a single-file NIfTI-1 volume (float32 payload)."""
    header = _pack_nifti_header(vol)
    # (depth, height, width) in C order is exactly the x-fastest NIfTI layout
    payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    try:
        with _nifti_open(path, "wb") as f:
            f.write(header)
            f.write(b"\x00\x00\x00\x00")  # no header extensions
            f.write(payload)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _read_nifti_header(f, path):
    hdr = f.read(_NIFTI_HDR_SIZE)
    if len(hdr) < _NIFTI_HDR_SIZE:
        raise CorruptHeader(f"{path}: truncated header ({len(hdr)} bytes)")
    (size_le,) = struct.unpack_from("<i", hdr, 0)
    (size_be,) = struct.unpack_from(">i", hdr, 0)
    if size_le == _NIFTI_HDR_SIZE:
        endian = "<"
    elif size_be == _NIFTI_HDR_SIZE:
        endian = ">"
    else:
        raise CorruptHeader(f"{path}: sizeof_hdr is {size_le}, expected {_NIFTI_HDR_SIZE}")
    magic = hdr[344:348]
    if magic == _NIFTI_PAIR_MAGIC:
        raise UnsupportedFormat(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic != _NIFTI_MAGIC:
        raise CorruptHeader(f"{path}: bad magic {magic!r}")
    dim = struct.unpack_from(f"{endian}8h", hdr, 40)
    ndim = dim[0]
    if ndim < 3:
        raise CorruptHeader(f"{path}: need 3 spatial dims, header says dim[0]={ndim}")
    if any(d > 1 for d in dim[4 : 1 + ndim]):
        raise UnsupportedFormat(f"{path}: multi-volume files are not supported")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if nx < 1 or ny < 1 or nz < 1:
        raise CorruptHeader(f"{path}: nonpositive dims {(nx, ny, nz)}")
    (datatype,) = struct.unpack_from(f"{endian}h", hdr, 70)
    pixdim = struct.unpack_from(f"{endian}8f", hdr, 76)
    sw, sh, sd = pixdim[1], pixdim[2], pixdim[3]
    for s in (sw, sh, sd):
        if not np.isfinite(s) or s <= 0:
            raise CorruptHeader(f"{path}: nonpositive pixdim {(sw, sh, sd)}")
    (vox_offset,) = struct.unpack_from(f"{endian}f", hdr, 108)
    slope, inter = struct.unpack_from(f"{endian}2f", hdr, 112)
    modality, domain = _parse_descrip(hdr[148:228])
    return {
        "endian": endian,
        "dims": (nz, ny, nx),
        "spacing": (float(sd), float(sh), float(sw)),
        "datatype": datatype,
        "vox_offset": int(max(vox_offset, _NIFTI_HDR_SIZE)),
        "slope": slope,
        "inter": inter,
        "modality": modality,
        "domain": domain,
    }


def load_nifti(path) -> Volume:
    """Read a single-file NIfTI-1 volume, applying any scl slope/intercept."""
    try:
        with _nifti_open(path, "rb") as f:
            meta = _read_nifti_header(f, path)
            if meta["datatype"] not in _NIFTI_DTYPES:
                raise UnsupportedFormat(
                    f"{path}: unsupported NIfTI datatype code {meta['datatype']}"
                )
            dtype = np.dtype(meta["endian"] + _NIFTI_DTYPES[meta["datatype"]])
            f.seek(meta["vox_offset"])
            count = int(np.prod(meta["dims"]))
            raw = f.read(count * dtype.itemsize)
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < count * dtype.itemsize:
        raise CorruptHeader(f"{path}: payload truncated")
    data = np.frombuffer(raw, dtype=dtype, count=count).reshape(meta["dims"])
    data = data.astype(np.float32)
    slope, inter = meta["slope"], meta["inter"]
    if slope not in (0.0, 1.0) or inter != 0.0:
        if slope == 0.0:
            slope = 1.0
        data = data * np.float32(slope) + np.float32(inter)
    if not np.isfinite(data).all():
        raise CorruptHeader(f"{path}: payload contains non-finite voxels")
    return Volume(
        data=data,
        spacing=meta["spacing"],
        modality=meta["modality"],
        intensity_domain=meta["domain"],
    )


def save_rawvol(vol: Volume, path) -> None:
    """Write the dependency-light raw format: .rawvol payload + .hdr sidecar."""
    d, h, w = vol.dims
    sd, sh, sw = vol.spacing
    sidecar = (
        f"dims: {d} {h} {w}\n"
        f"spacing: {sd!r} {sh!r} {sw!r}\n"
        f"modality: {vol.modality.value}\n"
        f"domain: {vol.intensity_domain.value}\n"
    )
    try:
        with open(path, "wb") as f:
            f.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
        with open(str(path) + ".hdr", "w", encoding="ascii") as f:
            f.write(sidecar)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _parse_rawvol_header(path):
    sidecar = str(path) + ".hdr"
    if not os.path.exists(sidecar):
        raise CorruptHeader(f"{path}: missing sidecar header {sidecar}")
    fields = {}
    with open(sidecar, "r", encoding="ascii") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(":")
            fields[key.strip()] = value.strip()
    try:
        dims = tuple(int(x) for x in fields["dims"].split())
        spacing = tuple(float(x) for x in fields["spacing"].split())
    except (KeyError, ValueError) as exc:
        raise CorruptHeader(f"{path}: malformed sidecar header: {exc}") from exc
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise CorruptHeader(f"{path}: bad dims {dims}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise CorruptHeader(f"{path}: nonpositive spacing {spacing}")
    modality = Modality(fields.get("modality", "GENERIC"))
    domain = IntensityDomain(fields.get("domain", "RAW"))
    return dims, spacing, modality, domain


def load_rawvol(path) -> Volume:
    dims, spacing, modality, domain = _parse_rawvol_header(path)
    count = int(np.prod(dims))
    try:
        with open(path, "rb") as f:
            raw = f.read(count * 4)
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < count * 4:
        raise CorruptHeader(f"{path}: payload truncated")
    data = np.frombuffer(raw, dtype="<f4", count=count).reshape(dims)
    return Volume(data=data, spacing=spacing, modality=modality, intensity_domain=domain)


def _format_of(path, fmt: str | None):
    if fmt is not None:
        return fmt
    name = str(path)
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    if name.endswith(".rawvol"):
        return "rawvol"
    raise UnsupportedFormat(f"cannot infer volume format from {path}")


def save_volume(vol: Volume, path, fmt: str | None = None) -> None:
    """Write ``vol`` to ``path``; format inferred from the extension."""
    fmt = _format_of(path, fmt)
    if fmt == "nifti":
        save_nifti(vol, path)
    elif fmt == "rawvol":
        save_rawvol(vol, path)
    else:
        raise UnsupportedFormat(f"unknown volume format {fmt!r}")


def load_volume(path, fmt: str | None = None) -> Volume:
    """Read a volume from ``path``; format inferred from the extension."""
    fmt = _format_of(path, fmt)
    if fmt == "nifti":
        return load_nifti(path)
    if fmt == "rawvol":
        return load_rawvol(path)
    raise UnsupportedFormat(f"unknown volume format {fmt!r}")


def read_volume_header(path, fmt: str | None = None):
    """Return (dims, spacing) without loading the payload."""
    fmt = _format_of(path, fmt)
    if fmt == "nifti":
        try:
            with _nifti_open(path, "rb") as f:
                meta = _read_nifti_header(f, path)
        except OSError as exc:
            raise IOFailure(f"cannot read {path}: {exc}") from exc
        return meta["dims"], meta["spacing"]
    if fmt == "rawvol":
        dims, spacing, _, _ = _parse_rawvol_header(path)
        return dims, spacing
    raise UnsupportedFormat(f"unknown volume format {fmt!r}")


_MANIFEST_FIELDS = ["case_id", "source", "target", "label", "split"]


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write the manifest as CSV, one record per case."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=_MANIFEST_FIELDS)
            writer.writeheader()
            for case in manifest.cases:
                writer.writerow(
                    {
                        "case_id": case.case_id,
                        "source": case.source,
                        "target": case.target,
                        "label": case.label or "",
                        "split": manifest.split[case.case_id].value,
                    }
                )
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def load_manifest(path) -> DatasetManifest:
    """Read a manifest CSV; relative volume paths resolve against its dir."""
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    cases = []
    split = {}
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or set(reader.fieldnames) != set(_MANIFEST_FIELDS):
                raise ManifestError(
                    f"{path}: expected columns {_MANIFEST_FIELDS}, got {reader.fieldnames}"
                )
            for row in reader:
                cid = row["case_id"].strip()
                if not cid:
                    raise ManifestError(f"{path}: empty case_id")
                label = row["label"].strip()
                cases.append(
                    CaseRecord(
                        case_id=cid,
                        source=resolve(row["source"].strip()),
                        target=resolve(row["target"].strip()),
                        label=resolve(label) if label else None,
                    )
                )
                try:
                    split[cid] = Split(row["split"].strip())
                except ValueError as exc:
                    raise ManifestError(f"{path}: bad split for {cid}: {row['split']!r}") from exc
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if not cases:
        raise EmptyManifest(f"{path}: manifest lists no cases")
    try:
        return DatasetManifest(cases=tuple(cases), split=split)
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
