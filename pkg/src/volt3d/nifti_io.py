"""Minimal NIfTI-1 reader/writer (single-file ``.nii`` and ``.nii.gz``).

Only what the pipeline needs: dims, datatype, pixdim, intensity scaling and
the voxel payload.  Orientation (qform/sform) is ignored and extensions are
skipped over via ``vox_offset``.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    BadSize,
    InvalidHeader,
    IoFailure,
    NonFiniteInput,
    TruncatedData,
    UnsupportedDatatype,
    UnsupportedRank,
)

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# datatype code -> numpy dtype (without byte order); the five codes we load
SUPPORTED_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}

# bits/voxel for codes we can at least validate a header against
KNOWN_BITPIX = {
    1: 1, 2: 8, 4: 16, 8: 32, 16: 32, 32: 64, 64: 64, 128: 24,
    256: 8, 512: 16, 768: 32, 1024: 64, 1280: 64, 1536: 128,
    1792: 128, 2048: 256, 2304: 32,
}

# (name, struct code, count) in on-disk order; covers all 348 bytes
_LAYOUT = [
    ("sizeof_hdr", "i", 1),
    ("data_type", "10s", 1),
    ("db_name", "18s", 1),
    ("extents", "i", 1),
    ("session_error", "h", 1),
    ("regular", "c", 1),
    ("dim_info", "B", 1),
    ("dim", "h", 8),
    ("intent_p", "f", 3),
    ("intent_code", "h", 1),
    ("datatype", "h", 1),
    ("bitpix", "h", 1),
    ("slice_start", "h", 1),
    ("pixdim", "f", 8),
    ("vox_offset", "f", 1),
    ("scl_slope", "f", 1),
    ("scl_inter", "f", 1),
    ("slice_end", "h", 1),
    ("slice_code", "B", 1),
    ("xyzt_units", "B", 1),
    ("cal_max", "f", 1),
    ("cal_min", "f", 1),
    ("slice_duration", "f", 1),
    ("toffset", "f", 1),
    ("glmax", "i", 1),
    ("glmin", "i", 1),
    ("descrip", "80s", 1),
    ("aux_file", "24s", 1),
    ("qform_code", "h", 1),
    ("sform_code", "h", 1),
    ("quatern", "f", 6),
    ("srow", "f", 12),
    ("intent_name", "16s", 1),
    ("magic", "4s", 1),
]


def _struct_format(order):
    parts = [order]
    for _, code, count in _LAYOUT:
        parts.append(code if count == 1 else f"{count}{code}")
    return "".join(parts)


_FMT_LE = struct.Struct(_struct_format("<"))
_FMT_BE = struct.Struct(_struct_format(">"))
assert _FMT_LE.size == HEADER_SIZE


@dataclass
class NiftiHeader:
    sizeof_hdr: int = HEADER_SIZE
    dim: tuple = (3, 1, 1, 1, 1, 1, 1, 1)
    datatype_code: int = 16
    bitpix: int = 32
    pixdim: tuple = (1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    vox_offset: float = float(SINGLE_FILE_OFFSET)
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    magic: bytes = MAGIC_SINGLE
    byteorder: str = field(default="<", compare=False)
    # remaining raw fields, kept so a header can be re-encoded verbatim
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def rank(self):
        return self.dim[0]

    @property
    def shape(self):
        """Spatial shape, always three extents (rank-1/2 headers are padded)."""
        ext = list(self.dim[1:self.dim[0] + 1])
        while len(ext) > 3 and ext[-1] == 1:
            ext.pop()
        while len(ext) < 3:
            ext.append(1)
        return tuple(ext)

    @property
    def spacing(self):
        return tuple(float(abs(p)) if p != 0 else 1.0 for p in self.pixdim[1:4])


@dataclass
class Volume:
    """A 3D scalar grid.

    ``data`` is a float32 array of shape ``(X, Y, Z)`` indexed ``[x, y, z]``;
    on disk the voxels are stored X-fastest.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    source_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise UnsupportedRank(f"volume data must be 3-D, got shape {self.data.shape}")
        # pixdim is float32 on disk; holding spacing at that precision keeps round trips exact
        self.spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise InvalidHeader(f"spacing must be three positive reals, got {self.spacing}")

    @property
    def shape(self):
        return tuple(self.data.shape)

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteInput(f"volume {self.source_id or '<memory>'} has NaN/Inf voxels")
        return self

    def replace(self, data, spacing=None):
        return Volume(data, self.spacing if spacing is None else spacing, self.source_id)


def _decode(block, fmt):
    values = fmt.unpack(block)
    out = {}
    i = 0
    for name, _, count in _LAYOUT:
        if count == 1:
            out[name] = values[i]
        else:
            out[name] = tuple(values[i:i + count])
        i += count
    return out


def parse_header(block: bytes) -> NiftiHeader:
    """Decode a 348-byte NIfTI-1 header, detecting its byte order."""
    if len(block) != HEADER_SIZE:
        raise BadSize(f"header block must be {HEADER_SIZE} bytes, got {len(block)}")
    if struct.unpack("<i", block[:4])[0] == HEADER_SIZE:
        order, fmt = "<", _FMT_LE
    elif struct.unpack(">i", block[:4])[0] == HEADER_SIZE:
        order, fmt = ">", _FMT_BE
    else:
        raise BadSize("sizeof_hdr is not 348 in either byte order")
    raw = _decode(block, fmt)

    magic = raw["magic"]
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise BadMagic(f"bad NIfTI-1 magic {magic!r}")

    dim = tuple(int(d) for d in raw["dim"])
    rank = dim[0]
    if not 1 <= rank <= 7:
        raise UnsupportedRank(f"dim[0] = {rank} outside 1..7")
    if any(d < 1 for d in dim[1:rank + 1]):
        raise InvalidHeader(f"non-positive extent in dim {dim[1:rank + 1]}")
    eff_rank = rank
    while eff_rank > 3 and dim[eff_rank] == 1:
        eff_rank -= 1
    if eff_rank > 3:
        raise UnsupportedRank(f"rank {rank} volume with non-singleton dims {dim[4:rank + 1]}")

    code = int(raw["datatype"])
    bitpix = int(raw["bitpix"])
    if code in KNOWN_BITPIX and KNOWN_BITPIX[code] != bitpix:
        raise InvalidHeader(f"bitpix {bitpix} inconsistent with datatype {code}")

    extra = {k: v for k, v in raw.items()
             if k not in ("sizeof_hdr", "dim", "datatype", "bitpix", "pixdim",
                          "vox_offset", "scl_slope", "scl_inter", "magic")}
    return NiftiHeader(
        sizeof_hdr=HEADER_SIZE,
        dim=dim,
        datatype_code=code,
        bitpix=bitpix,
        pixdim=tuple(float(p) for p in raw["pixdim"]),
        vox_offset=float(raw["vox_offset"]),
        scl_slope=float(raw["scl_slope"]),
        scl_inter=float(raw["scl_inter"]),
        magic=magic,
        byteorder=order,
        extra=extra,
    )


_DEFAULT_EXTRA = {
    "data_type": b"", "db_name": b"", "extents": 0, "session_error": 0,
    "regular": b"r", "dim_info": 0, "intent_p": (0.0, 0.0, 0.0),
    "intent_code": 0, "slice_start": 0, "slice_end": 0, "slice_code": 0,
    "xyzt_units": 2, "cal_max": 0.0, "cal_min": 0.0, "slice_duration": 0.0,
    "toffset": 0.0, "glmax": 0, "glmin": 0, "descrip": b"", "aux_file": b"",
    "qform_code": 0, "sform_code": 0, "quatern": (0.0,) * 6,
    "srow": (0.0,) * 12, "intent_name": b"",
}


def encode_header(hdr: NiftiHeader, byteorder: str | None = None) -> bytes:
    """Inverse of :func:`parse_header`."""
    order = byteorder or hdr.byteorder
    fmt = _FMT_LE if order == "<" else _FMT_BE
    fields = dict(_DEFAULT_EXTRA)
    fields.update(hdr.extra)
    fields.update(
        sizeof_hdr=hdr.sizeof_hdr, dim=tuple(hdr.dim), datatype=hdr.datatype_code,
        bitpix=hdr.bitpix, pixdim=tuple(hdr.pixdim), vox_offset=hdr.vox_offset,
        scl_slope=hdr.scl_slope, scl_inter=hdr.scl_inter, magic=hdr.magic,
    )
    values = []
    for name, _, count in _LAYOUT:
        v = fields[name]
        if count == 1:
            values.append(v)
        else:
            values.extend(v)
    return fmt.pack(*values)


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if blob[:2] == GZIP_MAGIC:
        try:
            blob = gzip.decompress(blob)
        except (OSError, EOFError) as exc:
            raise TruncatedData(f"{path}: corrupt gzip stream: {exc}") from exc
    return blob


def read_header(path) -> NiftiHeader:
    blob = _read_bytes(path)
    if len(blob) < HEADER_SIZE:
        raise BadSize(f"{path}: file shorter than a NIfTI-1 header")
    return parse_header(blob[:HEADER_SIZE])


def read_volume(path) -> Volume:
    blob = _read_bytes(path)
    if len(blob) < HEADER_SIZE:
        raise BadSize(f"{path}: file shorter than a NIfTI-1 header")
    hdr = parse_header(blob[:HEADER_SIZE])
    if hdr.datatype_code not in SUPPORTED_DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {hdr.datatype_code} not supported")
    shape = hdr.shape
    n = shape[0] * shape[1] * shape[2]
    dtype = SUPPORTED_DTYPES[hdr.datatype_code].newbyteorder(hdr.byteorder)
    start = int(hdr.vox_offset)
    need = n * dtype.itemsize
    if len(blob) - start < need:
        raise TruncatedData(f"{path}: need {need} data bytes after offset {start}, "
                            f"have {max(len(blob) - start, 0)}")
    raw = np.frombuffer(blob, dtype=dtype, count=n, offset=start)
    identity = hdr.scl_slope == 1 and hdr.scl_inter == 0
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope) and not identity:
        data = raw.astype(np.float64) * hdr.scl_slope + hdr.scl_inter
    else:
        data = raw
    data = np.asarray(data, dtype=np.float32).reshape(shape, order="F")
    vol = Volume(data, hdr.spacing, source_id=os.fspath(path))
    return vol.check_finite()


def write_volume(path, v: Volume, datatype_code: int = 16) -> None:
    """Write ``v`` as single-file NIfTI-1, gzipped when ``path`` ends in ``.gz``.

    ``datatype_code`` defaults to float32.  Other supported codes are allowed
    only when every voxel is exactly representable in that type.
    """
    if datatype_code not in SUPPORTED_DTYPES:
        raise UnsupportedDatatype(f"cannot write datatype code {datatype_code}")
    v.check_finite()
    dtype = SUPPORTED_DTYPES[datatype_code].newbyteorder("<")
    payload = v.data.astype(dtype)
    if not np.array_equal(payload.astype(np.float32), v.data):
        raise UnsupportedDatatype(f"volume values not exactly representable as code {datatype_code}")
    x, y, z = v.shape
    hdr = NiftiHeader(
        dim=(3, x, y, z, 1, 1, 1, 1),
        datatype_code=datatype_code,
        bitpix=dtype.itemsize * 8,
        pixdim=(1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0),
        vox_offset=float(SINGLE_FILE_OFFSET),
        scl_slope=1.0,
        scl_inter=0.0,
        magic=MAGIC_SINGLE,
    )
    blob = encode_header(hdr, "<") + b"\x00" * 4 + payload.tobytes(order="F")
    if os.fspath(path).endswith(".gz"):
        # mtime=0 keeps the output byte-identical across runs
        blob = gzip.compress(blob, mtime=0)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def describe_header(hdr: NiftiHeader) -> str:
    dtype = SUPPORTED_DTYPES.get(hdr.datatype_code)
    magic = hdr.magic.rstrip(b"\x00").decode("ascii", "replace")
    lines = [
        f"magic: {magic}",
        f"byteorder: {'little' if hdr.byteorder == '<' else 'big'}",
        f"rank: {hdr.rank}",
        "dim: " + " ".join(str(d) for d in hdr.shape),
        f"datatype: {hdr.datatype_code} ({dtype.name if dtype is not None else 'unsupported'})",
        f"bitpix: {hdr.bitpix}",
        "pixdim: " + " ".join(f"{p:g}" for p in hdr.pixdim[1:4]),
        f"vox_offset: {hdr.vox_offset:g}",
        f"scl_slope: {hdr.scl_slope:g}",
        f"scl_inter: {hdr.scl_inter:g}",
    ]
    return "\n".join(lines)
