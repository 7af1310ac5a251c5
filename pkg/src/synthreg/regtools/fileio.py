"""
NAME
fileio

DESCRIPTION
Reading and writing of the files a registration run produces and consumes: RVOL volumes (the native,
bit-exact format for images, label maps and vector fields), single-file NIfTI-1 volumes, landmark lists
and run manifests. Every writer goes through a temporary file and a rename.

RVOL layout, little-endian: magic "RVOL", uint16 version, uint8 dtype code (1 float32, 2 uint16 labels,
3 float64), uint8 channel count (1 or 3), uint8 field kind (0 none, 1 velocity, 2 displacement,
3 deformation), 3 bytes holding the label count of a label map as a 24-bit integer (0 otherwise), 3 uint32
dims, 3 float64 spacings in mm, then the payload channel by channel, x fastest.

FUNCTIONS
write_rvol
read_rvol
read_nifti1
write_nifti1
write_landmarks
read_landmarks
write_manifest
read_manifest
"""

import io
import struct
import logging
import numpy as np
import nibabel as nib
from .ptools import (VolumeFormatError, NiftiMagicError, NiftiDetachedError, NiftiDatatypeError,
                     NiftiTruncatedError, atomic_write)
from .volume import ScalarVolume, LabelVolume, VectorField, FIELD_KINDS
from .metrics import LandmarkSet

logger = logging.getLogger(__name__)

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
_RVOL_HEADER = struct.Struct("<4sHBBB3s3I3d")
_RVOL_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<u2"), 3: np.dtype("<f8")}
_KIND_CODES = {kind: code for code, kind in enumerate(FIELD_KINDS, start=1)}

NIFTI_HEADER_SIZE = 348
NIFTI_DATATYPES = {4: "int16", 8: "int32", 16: "float32", 64: "float64"}
_NIFTI_LABEL_TYPES = (4, 8)


def write_rvol(volume, path: str, spacing=None):
    """
    Write a ScalarVolume, LabelVolume or VectorField as RVOL.

    :param spacing: spacing to store for label maps and fields, which carry none themselves
    """
    kind = 0
    label_count = 0
    if isinstance(volume, ScalarVolume):
        code = 3 if volume.data.dtype == np.float64 else 1
        channels = volume.data[None]
        spacing = volume.spacing
    elif isinstance(volume, LabelVolume):
        if volume.label_count > 65536:
            raise ValueError("RVOL label maps hold at most 65536 labels, got {}".format(volume.label_count))
        code = 2
        label_count = volume.label_count
        channels = volume.data[None]
    elif isinstance(volume, VectorField):
        code = 3 if volume.data.dtype == np.float64 else 1
        channels = volume.data
        kind = _KIND_CODES[volume.kind]
    else:
        raise TypeError("Expected a ScalarVolume, LabelVolume or VectorField, got {}".format(type(volume)))
    spacing = tuple(spacing or (1.0, 1.0, 1.0))
    stored_count = label_count.to_bytes(3, "little")
    header = _RVOL_HEADER.pack(RVOL_MAGIC, RVOL_VERSION, code, len(channels), kind, stored_count, *channels.shape[1:],
                               *spacing)
    payload = b"".join(np.asarray(c, dtype=_RVOL_DTYPES[code]).tobytes(order="F") for c in channels)
    atomic_write(path, header + payload, binary=True)


def read_rvol(path: str):
    """
    Read an RVOL file.

    :return:    ScalarVolume, LabelVolume or VectorField, as written
    """
    with open(path, "rb") as infile:
        blob = infile.read()
    if len(blob) < _RVOL_HEADER.size or blob[:4] != RVOL_MAGIC:
        raise VolumeFormatError("Not an RVOL file: {}".format(path))
    magic, version, code, channel_count, kind, labels, nx, ny, nz, sx, sy, sz = _RVOL_HEADER.unpack_from(blob)
    if version != RVOL_VERSION:
        raise VolumeFormatError("Unsupported RVOL version {}".format(version))
    if code not in _RVOL_DTYPES or channel_count not in (1, 3):
        raise VolumeFormatError("Unsupported RVOL dtype {} with {} channels".format(code, channel_count))
    dtype = _RVOL_DTYPES[code]
    count = nx * ny * nz
    expected = _RVOL_HEADER.size + channel_count * count * dtype.itemsize
    if len(blob) != expected:
        raise VolumeFormatError("RVOL payload of {} bytes, expected {}".format(len(blob), expected))
    data = np.frombuffer(blob, dtype=dtype, count=channel_count * count, offset=_RVOL_HEADER.size)
    data = data.reshape((channel_count, nz, ny, nx)).transpose(0, 3, 2, 1).astype(dtype.newbyteorder("="))
    if channel_count == 3:
        if kind not in range(1, len(FIELD_KINDS) + 1):
            raise VolumeFormatError("Unknown vector field kind {}".format(kind))
        return VectorField(data, kind=FIELD_KINDS[kind - 1])
    if code == 2:
        # files without a stored count fall back to max + 1
        return LabelVolume(data[0], label_count=int.from_bytes(labels, "little") or None)
    return ScalarVolume(data[0], spacing=(sx, sy, sz))


def _nifti_byte_order(blob):
    if struct.unpack_from("<i", blob)[0] == NIFTI_HEADER_SIZE:
        return "<"
    if struct.unpack_from(">i", blob)[0] == NIFTI_HEADER_SIZE:
        return ">"
    raise NiftiMagicError("sizeof_hdr is not 348 in either byte order")


def read_nifti1(path: str, kind="auto"):
    """
    Read a single-file NIfTI-1 volume (.nii, uncompressed).

    Both byte orders are accepted. Datatypes int16, int32, float32 and float64 are supported; scl_slope and
    scl_inter are applied when the slope is nonzero. pixdim[1..3] gives the spacing.

    :param kind:    "scalar", "labels", or "auto" (integer data without scaling becomes a LabelVolume); "labels"
                    raises VolumeFormatError when the scaled values are not all integers
    :return:        ScalarVolume (float32) or LabelVolume
    """
    with open(path, "rb") as infile:
        blob = infile.read()
    if len(blob) < NIFTI_HEADER_SIZE:
        raise NiftiTruncatedError("File of {} bytes is shorter than a NIfTI-1 header".format(len(blob)))
    _nifti_byte_order(blob)
    magic = blob[344:348]
    if magic == b"ni1\x00":
        raise NiftiDetachedError("Detached .hdr/.img NIfTI pairs are not supported: {}".format(path))
    if magic != b"n+1\x00":
        raise NiftiMagicError("Unknown NIfTI magic {!r} in {}".format(magic, path))
    header = nib.Nifti1Header.from_fileobj(io.BytesIO(blob), check=False)
    datatype = int(header["datatype"])
    if datatype not in NIFTI_DATATYPES:
        raise NiftiDatatypeError("Unsupported NIfTI datatype {}".format(datatype))
    dim = [int(d) for d in header["dim"]]
    if dim[0] < 3 or any(d > 1 for d in dim[4:dim[0] + 1]):
        raise VolumeFormatError("Expected a 3D volume, got dim {}".format(dim))
    shape = tuple(dim[1:4])
    dtype = header.get_data_dtype()
    offset = int(header["vox_offset"])
    size = int(np.prod(shape)) * dtype.itemsize
    if len(blob) < offset + size:
        raise NiftiTruncatedError("NIfTI payload is {} bytes, expected {}".format(len(blob) - offset, size))
    data = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape, order="F")
    slope = float(header["scl_slope"])
    inter = float(header["scl_inter"])
    scaled = np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0)
    if kind not in ("auto", "scalar", "labels"):
        raise ValueError("Expected kind 'auto', 'scalar' or 'labels', got {}".format(kind))
    if kind == "auto" and datatype in _NIFTI_LABEL_TYPES and not scaled:
        return LabelVolume(data.astype(np.int64))
    values = data.astype(np.float64)
    if scaled:
        values = values * slope + (inter if np.isfinite(inter) else 0.0)
    if kind == "labels":
        if not np.all(np.isfinite(values)) or not np.array_equal(values, np.rint(values)):
            raise VolumeFormatError("Label map {} holds non-integer values".format(path))
        return LabelVolume(values.astype(np.int64))
    spacing = [abs(float(s)) for s in header["pixdim"][1:4]]
    if min(spacing) <= 0:
        logger.warning("Invalid pixdim %s in %s, using 1 mm spacing", spacing, path)
        spacing = [1.0, 1.0, 1.0]
    return ScalarVolume(values.astype(np.float32), spacing=spacing)


def write_nifti1(volume: ScalarVolume, path: str):
    """Write a ScalarVolume as a single-file float32 NIfTI-1 with a diagonal (spacing) affine."""
    if not isinstance(volume, ScalarVolume):
        raise TypeError("Only scalar volumes are written as NIfTI, got {}".format(type(volume)))
    affine = np.diag(list(volume.spacing) + [1.0])
    image = nib.Nifti1Image(np.asarray(volume.data, dtype=np.float32), affine)
    image.header.set_zooms(volume.spacing)
    atomic_write(path, image.to_bytes(), binary=True)


def write_landmarks(landmarks: LandmarkSet, path: str):
    """Write a header line with the spacing, then one "x y z" line per landmark."""
    lines = ["# spacing {} {} {}".format(*map(repr, landmarks.spacing))]
    lines += ["{} {} {}".format(*map(repr, map(float, point))) for point in landmarks.points]
    atomic_write(path, "\n".join(lines) + "\n")


def read_landmarks(path: str) -> LandmarkSet:
    spacing = (1.0, 1.0, 1.0)
    points = []
    with open(path) as infile:
        for number, line in enumerate(infile, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                words = line[1:].split()
                if words and words[0] == "spacing":
                    spacing = tuple(float(w) for w in words[1:4])
                continue
            values = line.split()
            if len(values) != 3:
                raise VolumeFormatError("Line {} of {}: expected 'x y z', got {!r}".format(number, path, line))
            points.append([float(v) for v in values])
    return LandmarkSet(np.asarray(points, dtype=np.float64).reshape(-1, 3), spacing=spacing)


def write_manifest(entries: dict, path: str):
    """Write one "key = value" line per entry, in the given order."""
    lines = []
    for key, value in entries.items():
        if "\n" in str(value) or "=" in str(key):
            raise ValueError("Manifest entries must be single-line with keys without '=': {}".format(key))
        lines.append("{} = {}".format(key, value))
    atomic_write(path, "\n".join(lines) + "\n")


def read_manifest(path: str) -> dict:
    entries = {}
    with open(path) as infile:
        for line in infile:
            if line.strip() and not line.startswith("#"):
                key, _, value = line.partition("=")
                entries[key.strip()] = value.strip()
    return entries
