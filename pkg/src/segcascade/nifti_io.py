"""Single-file NIfTI-1 reading and writing.

Only rank-3 ``.nii`` payloads are handled; gzip-wrapped files are detected
by their magic bytes. Output is always little-endian float32 with
``vox_offset`` 352.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, NiftiError, RankNotThree, TruncatedData, UnsupportedDatatype
from .volume import Volume3D

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

_HEADER_FIELDS = [
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


def _header_dtype(endian: str) -> np.dtype:
    fields = [(f[0], endian + f[1] if f[1][0] in "iuf" else f[1], *f[2:]) for f in _HEADER_FIELDS]
    return np.dtype(fields)


_LE = _header_dtype("<")
_BE = _header_dtype(">")
assert _LE.itemsize == HEADER_SIZE

# NIfTI datatype code -> (numpy type char, bitpix)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    8: ("i4", 32),
    16: ("f4", 32),
    64: ("f8", 64),
}
FLOAT32 = 16


@dataclass
class NiftiHeader:
    sizeof_hdr: int = HEADER_SIZE
    dim: tuple = (3, 1, 1, 1, 1, 1, 1, 1)
    datatype: int = FLOAT32
    bitpix: int = 32
    pixdim: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    vox_offset: float = float(VOX_OFFSET)
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple = (0.0, 0.0, 0.0)
    qoffset: tuple = (0.0, 0.0, 0.0)
    srow: np.ndarray = field(default_factory=lambda: np.zeros((3, 4)))
    xyzt_units: int = 2  # mm
    descrip: bytes = b""
    magic: bytes = MAGIC
    little_endian: bool = True

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.dim[1 : self.dim[0] + 1])


def _unwrap(raw: bytes) -> bytes:
    raw = bytes(raw)
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise TruncatedData(f"need {HEADER_SIZE} header bytes, got {len(raw)}")
    little = int.from_bytes(raw[:4], "little") == HEADER_SIZE
    big = int.from_bytes(raw[:4], "big") == HEADER_SIZE
    if not (little or big):
        raise NiftiError("sizeof_hdr is not 348 in either byte order")
    rec = np.frombuffer(raw[:HEADER_SIZE], dtype=_LE if little else _BE)[0]
    if bytes(rec["magic"]) != MAGIC.rstrip(b"\x00") and bytes(rec["magic"]) != MAGIC:
        raise BadMagic(f"magic {bytes(rec['magic'])!r} is not 'n+1\\0'")
    dim = tuple(int(d) for d in rec["dim"])
    if not 1 <= dim[0] <= 7:
        raise NiftiError(f"dim[0] = {dim[0]} outside [1, 7]")
    return NiftiHeader(
        sizeof_hdr=int(rec["sizeof_hdr"]),
        dim=dim,
        datatype=int(rec["datatype"]),
        bitpix=int(rec["bitpix"]),
        pixdim=tuple(float(p) for p in rec["pixdim"]),
        vox_offset=float(rec["vox_offset"]),
        scl_slope=float(rec["scl_slope"]),
        scl_inter=float(rec["scl_inter"]),
        qform_code=int(rec["qform_code"]),
        sform_code=int(rec["sform_code"]),
        quatern=(float(rec["quatern_b"]), float(rec["quatern_c"]), float(rec["quatern_d"])),
        qoffset=(float(rec["qoffset_x"]), float(rec["qoffset_y"]), float(rec["qoffset_z"])),
        srow=np.stack([rec["srow_x"], rec["srow_y"], rec["srow_z"]]).astype(np.float64),
        xyzt_units=int(rec["xyzt_units"]),
        descrip=bytes(rec["descrip"]),
        magic=MAGIC,
        little_endian=little,
    )


def _qform_affine(hdr: NiftiHeader) -> np.ndarray:
    b, c, d = hdr.quatern
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    qfac = -1.0 if hdr.pixdim[0] < 0 else 1.0
    zooms = np.array([hdr.pixdim[1], hdr.pixdim[2], hdr.pixdim[3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * zooms
    aff[:3, 3] = hdr.qoffset
    return aff


def header_affine(hdr: NiftiHeader) -> np.ndarray:
    if hdr.sform_code > 0:
        return np.vstack([hdr.srow, [0.0, 0.0, 0.0, 1.0]])
    if hdr.qform_code > 0:
        return _qform_affine(hdr)
    return np.diag([abs(hdr.pixdim[1]), abs(hdr.pixdim[2]), abs(hdr.pixdim[3]), 1.0])


def read_nifti(raw: bytes) -> tuple[NiftiHeader, Volume3D]:
    """Decode a single-file NIfTI-1 byte string (optionally gzip-wrapped)."""
    raw = _unwrap(raw)
    if len(raw) < VOX_OFFSET:
        raise TruncatedData(f"file is {len(raw)} bytes, shorter than the minimum {VOX_OFFSET}")
    hdr = parse_header(raw)
    if hdr.dim[0] != 3:
        # trailing singleton dimensions are not a rank-3 volume either
        raise RankNotThree(f"dim[0] = {hdr.dim[0]}")
    shape = hdr.shape
    if any(n < 1 for n in shape):
        raise NiftiError(f"non-positive extent in dim {hdr.dim}")
    if hdr.datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {hdr.datatype}")
    code, bitpix = DATATYPES[hdr.datatype]
    if hdr.bitpix != bitpix:
        raise NiftiError(f"bitpix {hdr.bitpix} inconsistent with datatype {hdr.datatype}")
    offset = int(hdr.vox_offset)
    if offset < VOX_OFFSET:
        raise NiftiError(f"vox_offset {hdr.vox_offset} < {VOX_OFFSET}")
    dtype = np.dtype(("<" if hdr.little_endian else ">") + code)
    n = int(np.prod(shape))
    need = offset + n * dtype.itemsize
    if len(raw) < need:
        raise TruncatedData(f"header promises {need} bytes, file has {len(raw)}")
    values = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
    if hdr.scl_slope != 0 and not (hdr.scl_slope == 1 and hdr.scl_inter == 0):
        values = values.astype(np.float64) * hdr.scl_slope + hdr.scl_inter
    data = values.astype(np.float32).reshape(shape, order="F")
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in hdr.pixdim[1:4])
    try:
        vol = Volume3D(data, spacing, header_affine(hdr))
    except ValueError as exc:
        raise NiftiError(str(exc)) from exc
    return hdr, vol


def write_nifti(vol: Volume3D, header_seed: NiftiHeader | None = None) -> bytes:
    """Encode ``vol`` as little-endian float32 NIfTI-1 with sform set from its affine."""
    rec = np.zeros((), dtype=_LE)
    if header_seed is not None:
        rec["descrip"] = header_seed.descrip[:80]
        rec["xyzt_units"] = header_seed.xyzt_units
        rec["qform_code"] = header_seed.qform_code
        rec["quatern_b"], rec["quatern_c"], rec["quatern_d"] = header_seed.quatern
        rec["qoffset_x"], rec["qoffset_y"], rec["qoffset_z"] = header_seed.qoffset
    else:
        rec["xyzt_units"] = 2
    rec["sizeof_hdr"] = HEADER_SIZE
    rec["regular"] = b"r"
    rec["dim"] = [3, *vol.extents, 1, 1, 1, 1]
    rec["datatype"] = FLOAT32
    rec["bitpix"] = 32
    rec["pixdim"] = [1.0, *vol.spacing, 1.0, 1.0, 1.0, 1.0]
    rec["vox_offset"] = VOX_OFFSET
    rec["scl_slope"] = 1.0
    rec["scl_inter"] = 0.0
    rec["sform_code"] = 1
    rec["srow_x"], rec["srow_y"], rec["srow_z"] = vol.affine[:3]
    rec["magic"] = MAGIC
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    return rec.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def load(path) -> Volume3D:
    return read_nifti(Path(path).read_bytes())[1]


def save(vol: Volume3D, path) -> None:
    """Write ``vol``; a ``.gz`` suffix produces a gzip stream with a zeroed mtime."""
    path = Path(path)
    raw = write_nifti(vol)
    if path.suffix == ".gz":
        raw = gzip.compress(raw, compresslevel=6, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
