"""File formats: dataset manifests, a raw float32 volume format, and NIfTI-1.

The raw format is a 5-int32 little-endian header (magic, D, H, W, C)
followed by float32 payload in C order; C is 1 for image volumes and the
class count for masks. The NIfTI-1 support is a minimal single-file
reader/writer (gzipped or plain) covering the common scalar dtypes.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .data_model import DataError, ModalitySample, SegMask, Volume

RAW_MAGIC = int.from_bytes(b"DMSV", "little")
_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}


def write_raw_volume(path, volume: Volume) -> None:
    with open(path, "wb") as f:
        d, h, w = volume.shape
        f.write(struct.pack("<5i", RAW_MAGIC, d, h, w, 1))
        f.write(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())


def write_raw_mask(path, mask: SegMask) -> None:
    with open(path, "wb") as f:
        d, h, w = mask.shape
        f.write(struct.pack("<5i", RAW_MAGIC, d, h, w, mask.num_classes))
        f.write(np.ascontiguousarray(mask.labels, dtype="<f4").tobytes())


def _read_raw(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        header = f.read(20)
        if len(header) != 20:
            raise DataError(f"{path}: truncated raw header")
        magic, d, h, w, c = struct.unpack("<5i", header)
        if magic != RAW_MAGIC:
            raise DataError(f"{path}: bad magic {magic:#x}")
        if min(d, h, w) < 1 or c < 1:
            raise DataError(f"{path}: bad dimensions ({d}, {h}, {w}, {c})")
        data = np.frombuffer(f.read(4 * d * h * w), dtype="<f4")
        if data.size != d * h * w:
            raise DataError(f"{path}: truncated payload")
        return data.reshape(d, h, w), c


def read_raw_volume(path) -> Volume:
    data, c = _read_raw(path)
    if c != 1:
        raise DataError(f"{path}: expected a single-channel volume, header says C={c}")
    return Volume(data)


def read_raw_mask(path) -> SegMask:
    data, c = _read_raw(path)
    if c < 2:
        raise DataError(f"{path}: mask file must declare C>=2 classes, got {c}")
    return SegMask(np.rint(data).astype(np.int64), num_classes=c)


def _open_maybe_gz(path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> Volume:
    """Read a single-file NIfTI-1 volume as (D, H, W) with mm spacing."""
    with _open_maybe_gz(path, "rb") as f:
        blob = f.read()
    if len(blob) < 352:
        raise DataError(f"{path}: too short for a NIfTI-1 header")
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", blob, 0)[0] == 348:
            break
    else:
        raise DataError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
    dim = struct.unpack_from(endian + "8h", blob, 40)
    datatype = struct.unpack_from(endian + "h", blob, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    vox_offset = int(struct.unpack_from(endian + "f", blob, 108)[0])
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", blob, 112)
    magic = struct.unpack_from("4s", blob, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise DataError(f"{path}: unsupported magic {magic!r}")
    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4:1 + ndim]):
        raise DataError(f"{path}: expected a scalar 3D image, dim={dim}")
    if datatype not in _NIFTI_DTYPES:
        raise DataError(f"{path}: unsupported datatype code {datatype}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    count = nx * ny * nz
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=vox_offset)
    if data.size != count:
        raise DataError(f"{path}: truncated payload")
    arr = data.reshape((nx, ny, nz), order="F").transpose(2, 1, 0).astype(np.float32)
    if scl_slope not in (0.0, 1.0) and np.isfinite(scl_slope):
        arr = arr * scl_slope + scl_inter
    spacing = (float(pixdim[3]) or 1.0, float(pixdim[2]) or 1.0, float(pixdim[1]) or 1.0)
    return Volume(arr, spacing)


def write_nifti(path, volume: Volume) -> None:
    """Write a float32 single-file NIfTI-1 volume (gzipped when path ends .gz)."""
    d, h, w = volume.shape
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)  # float32
    struct.pack_into("<h", header, 72, 32)  # bitpix
    sd, sh, sw = volume.spacing
    struct.pack_into("<8f", header, 76, 1.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope/inter
    struct.pack_into("4s", header, 344, b"n+1\x00")
    payload = np.ascontiguousarray(
        volume.voxels.transpose(2, 1, 0), dtype="<f4"
    ).tobytes(order="F")
    with _open_maybe_gz(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00\x00\x00\x00")  # extension flag
        f.write(payload)


def _read_any_volume(path: Path) -> Volume:
    if path.name.endswith((".nii", ".nii.gz")):
        return read_nifti(path)
    return read_raw_volume(path)


def _read_any_mask(path: Path, num_classes: int) -> SegMask:
    if path.name.endswith((".nii", ".nii.gz")):
        vol = read_nifti(path)
        return SegMask(np.rint(vol.voxels).astype(np.int64), num_classes=num_classes)
    return read_raw_mask(path)


def write_manifest(path, rows: list[tuple[str, str, str, str]]) -> None:
    """One line per sample: id<TAB>path_a<TAB>path_b<TAB>path_mask (mask may be '')."""
    with open(path, "w") as f:
        for row in rows:
            f.write("\t".join(row) + "\n")


def load_manifest(path, num_classes: int = 2) -> list[ModalitySample]:
    """Load samples listed in a manifest; relative paths resolve against it."""
    base = Path(path).parent
    samples = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
            sid, pa, pb, pm = parts
            vol_a = _read_any_volume(base / pa)
            vol_b = _read_any_volume(base / pb)
            mask = _read_any_mask(base / pm, num_classes) if pm else None
            samples.append(ModalitySample(id=sid, vol_a=vol_a, vol_b=vol_b, mask=mask))
    if not samples:
        raise DataError(f"{path}: manifest lists no samples")
    return samples


def save_synthetic_dataset(out_dir, samples: list[ModalitySample]) -> Path:
    """Write samples in the raw format plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        pa, pb, pm = f"{s.id}_a.dmv", f"{s.id}_b.dmv", f"{s.id}_mask.dmv"
        write_raw_volume(out / pa, s.vol_a)
        write_raw_volume(out / pb, s.vol_b)
        if s.mask is not None:
            write_raw_mask(out / pm, s.mask)
        else:
            pm = ""
        rows.append((s.id, pa, pb, pm))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest
