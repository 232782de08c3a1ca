"""NIfTI-1 single-file reader and writer (plain ``.nii`` and gzip ``.nii.gz``)."""

from __future__ import annotations

import dataclasses
import gzip
import io
import os
from typing import Any

import numpy as np

from .errors import (
    BadHeaderSize,
    BadMagic,
    HeaderPairUnsupported,
    TruncatedPayload,
    UnsupportedDatatype,
)

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# datatype code -> (element kind, numpy base type)
DATATYPES: dict[int, tuple[str, str]] = {
    2: ("u8", "u1"),
    4: ("i16", "i2"),
    16: ("f32", "f4"),
    64: ("f64", "f8"),
    512: ("u16", "u2"),
}
KIND_TO_CODE = {kind: code for code, (kind, _) in DATATYPES.items()}

# Field layout of the 348-byte NIfTI-1 header, in file order.
HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(byteorder: str) -> np.dtype:
    fields = [(f[0], byteorder + f[1], *f[2:]) if f[1][0] != "S" else f for f in HEADER_FIELDS]
    dt = np.dtype(fields)
    assert dt.itemsize == HEADER_SIZE
    return dt


LE_HEADER = _header_dtype("<")
BE_HEADER = _header_dtype(">")


@dataclasses.dataclass
class NiftiHeader:
    """Decoded header fields the pipeline relies on.

    ``record`` keeps the full little-endian header so orientation fields
    and free-text metadata survive a round trip untouched.
    """

    header_size: int
    dim: tuple[int, ...]
    datatype_code: int
    bitpix: int
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    endianness: str
    record: np.ndarray = dataclasses.field(repr=False, compare=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.dim[1 : self.dim[0] + 1])

    @property
    def element_kind(self) -> str:
        return DATATYPES[self.datatype_code][0]

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(("<" if self.endianness == "little" else ">") + DATATYPES[self.datatype_code][1])

    @property
    def has_scaling(self) -> bool:
        return self.scl_slope not in (0.0, 1.0) or self.scl_inter != 0.0

    def payload_nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * self.bitpix // 8


@dataclasses.dataclass
class VoxelVolume:
    """A decoded voxel grid.

    ``data`` is indexed ``[x, y, z, ...]``; its memory follows file order
    (x varies fastest), which :meth:`flat` exposes directly.
    """

    data: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def element_kind(self) -> str:
        return _kind_of(self.data.dtype)

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")


def _kind_of(dtype: np.dtype) -> str:
    base = np.dtype(dtype).newbyteorder("=").str[1:]
    for kind, np_type in DATATYPES.values():
        if np.dtype(np_type) == np.dtype(base):
            return kind
    raise UnsupportedDatatype(f"element type {dtype} has no supported NIfTI code")


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) != HEADER_SIZE:
        raise BadHeaderSize(f"header must be {HEADER_SIZE} bytes, got {len(raw)}")
    little = int(np.frombuffer(raw[:4], "<i4")[0])
    big = int(np.frombuffer(raw[:4], ">i4")[0])
    if little == HEADER_SIZE:
        endianness, dt = "little", LE_HEADER
    elif big == HEADER_SIZE:
        endianness, dt = "big", BE_HEADER
    else:
        raise BadHeaderSize(f"sizeof_hdr is neither 348 little- nor big-endian ({little}/{big})")
    rec = np.frombuffer(raw, dtype=dt, count=1)[0]

    magic = bytes(raw[344:348])
    if magic == MAGIC_PAIR:
        raise HeaderPairUnsupported("header-pair (.hdr/.img) NIfTI files are not supported")
    if magic != MAGIC_SINGLE:
        raise BadMagic(f"not a NIfTI-1 file (magic {magic!r})")

    dim = tuple(int(d) for d in rec["dim"])
    if not 1 <= dim[0] <= 7:
        raise BadMagic(f"dim[0]={dim[0]} outside 1..7")
    if any(d < 1 for d in dim[1 : dim[0] + 1]):
        raise BadMagic(f"non-positive axis length in dim {dim}")

    code = int(rec["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code} is not supported")
    bitpix = int(rec["bitpix"])
    expected_bits = np.dtype(DATATYPES[code][1]).itemsize * 8
    if bitpix != expected_bits:
        raise UnsupportedDatatype(f"bitpix {bitpix} does not match datatype code {code}")
    vox_offset = float(rec["vox_offset"])
    if vox_offset < SINGLE_FILE_OFFSET:
        raise BadMagic(f"vox_offset {vox_offset} < {SINGLE_FILE_OFFSET} for a single-file volume")

    le_record = np.array(rec, dtype=dt).astype(LE_HEADER)
    return NiftiHeader(
        header_size=HEADER_SIZE,
        dim=dim,
        datatype_code=code,
        bitpix=bitpix,
        vox_offset=vox_offset,
        scl_slope=float(rec["scl_slope"]),
        scl_inter=float(rec["scl_inter"]),
        magic=magic,
        endianness=endianness,
        record=le_record,
    )


def _open(path: str | os.PathLike) -> tuple[io.BufferedIOBase, bool]:
    fh = open(path, "rb")
    is_gz = fh.read(2) == GZIP_MAGIC
    fh.seek(0)
    if is_gz:
        return gzip.GzipFile(fileobj=fh, mode="rb"), True
    return fh, False


def read_header(path: str | os.PathLike) -> tuple[NiftiHeader, bool]:
    """Decode only the header; returns it with the gzip flag.

    Reads at most the 348 header bytes (plus the gzip prefix needed to
    produce them).
    """
    fh, is_gz = _open(path)
    with fh:
        raw = fh.read(HEADER_SIZE)
    return parse_header(raw), is_gz


def read_volume_raw(path: str | os.PathLike) -> tuple[NiftiHeader, VoxelVolume]:
    """Read the voxel payload in its stored type, without intensity scaling.

    Used for segmentation masks, whose labels must stay exact integers.
    """
    fh, _ = _open(path)
    with fh:
        hdr = parse_header(fh.read(HEADER_SIZE))
        skip = int(hdr.vox_offset) - HEADER_SIZE
        if len(fh.read(skip)) != skip:
            raise TruncatedPayload("file ends inside the header extension block")
        nbytes = hdr.payload_nbytes()
        payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise TruncatedPayload(f"expected {nbytes} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=hdr.dtype).reshape(hdr.shape, order="F")
    data = data.astype(data.dtype.newbyteorder("="), copy=True)
    return hdr, VoxelVolume(data)


def read_volume(path: str | os.PathLike) -> tuple[NiftiHeader, VoxelVolume]:
    """Read an image volume as f32, applying scl_slope/scl_inter when set."""
    hdr, vol = read_volume_raw(path)
    if hdr.has_scaling:
        slope = np.float32(hdr.scl_slope if hdr.scl_slope != 0.0 else 1.0)
        data = vol.data.astype(np.float32) * slope + np.float32(hdr.scl_inter)
    else:
        data = vol.data.astype(np.float32)
    return hdr, VoxelVolume(data)


def make_header(shape: tuple[int, ...], element_kind: str, template: NiftiHeader | dict[str, Any] | None = None) -> np.ndarray:
    """Build a little-endian header record for ``shape``/``element_kind``.

    Fields from ``template`` (a parsed header or a dict of raw field
    values) are carried over, then geometry and type fields are forced to
    match the volume.
    """
    if element_kind not in KIND_TO_CODE:
        raise UnsupportedDatatype(f"element kind {element_kind!r} is not supported")
    if not 1 <= len(shape) <= 7:
        raise UnsupportedDatatype(f"rank {len(shape)} outside 1..7")
    rec = np.zeros((), dtype=LE_HEADER)
    rec["pixdim"] = [1.0] * 8
    rec["scl_slope"] = 1.0
    rec["regular"] = b"r"
    if isinstance(template, NiftiHeader):
        rec[...] = template.record
    elif template:
        for key, value in template.items():
            rec[key] = value
    code = KIND_TO_CODE[element_kind]
    dim = [len(shape), *shape] + [1] * (7 - len(shape))
    rec["sizeof_hdr"] = HEADER_SIZE
    rec["dim"] = dim
    rec["datatype"] = code
    rec["bitpix"] = np.dtype(DATATYPES[code][1]).itemsize * 8
    rec["vox_offset"] = SINGLE_FILE_OFFSET
    rec["magic"] = MAGIC_SINGLE
    return rec


def encode_volume(volume: VoxelVolume, header_fields: NiftiHeader | dict[str, Any] | None = None) -> bytes:
    kind = volume.element_kind
    rec = make_header(volume.shape, kind, header_fields)
    payload = np.asarray(volume.data, dtype="<" + DATATYPES[KIND_TO_CODE[kind]][1])
    return rec.tobytes() + b"\x00" * 4 + payload.tobytes(order="F")


def write_volume(
    header_fields: NiftiHeader | dict[str, Any] | None,
    volume: VoxelVolume,
    path: str | os.PathLike,
    gzip_output: bool = False,
) -> None:
    """Write a single-file little-endian NIfTI-1 volume.

    Gzip output uses a zero mtime and no embedded filename, so identical
    volumes give identical bytes.
    """
    blob = encode_volume(volume, header_fields)
    with open(path, "wb") as fh:
        if gzip_output:
            with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
                gz.write(blob)
        else:
            fh.write(blob)
