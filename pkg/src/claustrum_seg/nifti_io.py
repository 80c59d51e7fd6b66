"""Minimal NIfTI-1 reader/writer and axial slice helpers.

Only single 3D volumes are handled. On disk, voxels are stored with the
first axis varying fastest (Fortran order); in memory ``Volume.data`` is a
numpy array indexed ``data[i, j, k]`` with ``k`` the axial slice index.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .utils import atomic_write_bytes

HEADER_SIZE = 348
# vox_offset used for everything we write: header + 4-byte empty extension flag
WRITE_VOX_OFFSET = 352

# (name, struct code) in on-disk order
_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "b"),
    ("dim_info", "b"),
    ("dim", "8h"),
    ("intent_p1", "f"),
    ("intent_p2", "f"),
    ("intent_p3", "f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "b"),
    ("xyzt_units", "b"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern_b", "f"),
    ("quatern_c", "f"),
    ("quatern_d", "f"),
    ("qoffset_x", "f"),
    ("qoffset_y", "f"),
    ("qoffset_z", "f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_FORMAT = "".join(code for _, code in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE

# byte offset of each field, used in error messages
_OFFSETS: dict[str, int] = {}
_pos = 0
for _name, _code in _FIELDS:
    _OFFSETS[_name] = _pos
    _pos += struct.calcsize("<" + _code)
del _pos

DATATYPES: dict[int, np.dtype] = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
DATATYPE_CODES = {dt: code for code, dt in DATATYPES.items()}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI data; ``offset`` is the byte position involved."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class NiftiHeader:
    """All 348-byte header fields, keyed by their standard names."""

    fields: dict
    byteorder: str = "<"

    @property
    def dims(self) -> tuple[int, ...]:
        dim = self.fields["dim"]
        return tuple(int(d) for d in dim[1 : dim[0] + 1])

    @property
    def datatype_code(self) -> int:
        return int(self.fields["datatype"])

    @property
    def voxel_sizes(self) -> tuple[float, ...]:
        n = self.fields["dim"][0]
        return tuple(float(p) for p in self.fields["pixdim"][1 : n + 1])

    @property
    def scl_slope(self) -> float:
        return float(self.fields["scl_slope"])

    @property
    def scl_inter(self) -> float:
        return float(self.fields["scl_inter"])

    @property
    def vox_offset(self) -> int:
        return int(self.fields["vox_offset"])

    @property
    def magic(self) -> bytes:
        return self.fields["magic"]

    def sform_affine(self) -> np.ndarray:
        f = self.fields
        aff = np.eye(4)
        aff[:3] = np.array([f["srow_x"], f["srow_y"], f["srow_z"]], dtype=np.float64)
        return aff

    def qform_affine(self) -> np.ndarray:
        f = self.fields
        b, c, d = (float(f[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
        a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
        rot = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ]
        )
        pix = f["pixdim"]
        qfac = -1.0 if pix[0] < 0 else 1.0
        zooms = np.array([pix[1], pix[2], pix[3] * qfac], dtype=np.float64)
        aff = np.eye(4)
        aff[:3, :3] = rot * zooms
        aff[:3, 3] = [f["qoffset_x"], f["qoffset_y"], f["qoffset_z"]]
        return aff

    def affine(self) -> np.ndarray:
        """sform if set, else qform if set, else a plain voxel-size scaling."""
        if self.fields["sform_code"] > 0:
            return self.sform_affine()
        if self.fields["qform_code"] > 0:
            return self.qform_affine()
        aff = np.eye(4)
        sizes = list(self.voxel_sizes[:3]) + [1.0] * (3 - len(self.voxel_sizes[:3]))
        aff[[0, 1, 2], [0, 1, 2]] = [s if s else 1.0 for s in sizes]
        return aff

    def pack(self, byteorder: str = "<") -> bytes:
        values = []
        for name, code in _FIELDS:
            v = self.fields[name]
            values.extend(v if code[0].isdigit() and not code.endswith("s") else [v])
        return struct.pack(byteorder + _FORMAT, *values)

    @classmethod
    def unpack(cls, raw: bytes) -> "NiftiHeader":
        if len(raw) < HEADER_SIZE:
            raise NiftiError(f"truncated header: {len(raw)} of {HEADER_SIZE} bytes", len(raw))
        (size_le,) = struct.unpack_from("<i", raw, 0)
        (size_be,) = struct.unpack_from(">i", raw, 0)
        if size_le == HEADER_SIZE:
            order = "<"
        elif size_be == HEADER_SIZE:
            order = ">"
        else:
            raise NiftiError(f"sizeof_hdr is {size_le}, expected {HEADER_SIZE}", 0)
        flat = list(struct.unpack_from(order + _FORMAT, raw, 0))
        fields = {}
        for name, code in _FIELDS:
            if code[0].isdigit() and not code.endswith("s"):
                n = int(code[:-1])
                fields[name] = tuple(flat[:n])
                del flat[:n]
            else:
                fields[name] = flat.pop(0)
        return cls(fields=fields, byteorder=order)

    @classmethod
    def default(cls) -> "NiftiHeader":
        fields = {}
        for name, code in _FIELDS:
            if code.endswith("s"):
                fields[name] = b""
            elif code[0].isdigit():
                fields[name] = (0,) * int(code[:-1])
            else:
                fields[name] = 0
        fields["sizeof_hdr"] = HEADER_SIZE
        fields["regular"] = ord("r")
        fields["pixdim"] = (1.0,) * 8
        fields["scl_slope"] = 1.0
        fields["xyzt_units"] = 2  # mm
        fields["magic"] = b"n+1\x00"
        return cls(fields=fields)


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    source_header: NiftiHeader | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class SliceSample:
    """One axial 2D slice with its optional binary label.

    ``provenance`` records the original shape and the transforms applied so far;
    ``provenance["augmented"]`` is the tag evaluation code checks for.
    """

    subject_id: str
    slice_index: int
    image: np.ndarray
    label: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label is not None and self.label.shape != self.image.shape:
            raise ValueError(f"image shape {self.image.shape} != label shape {self.label.shape}")
        self.provenance.setdefault("original_shape", tuple(self.image.shape))
        self.provenance.setdefault("transforms", [])
        self.provenance.setdefault("augmented", False)

    @property
    def augmented(self) -> bool:
        return bool(self.provenance.get("augmented", False))

    def derive(self, image=None, label=None, transform: str | None = None, **extra) -> "SliceSample":
        """Copy with new arrays and one more transform appended to provenance."""
        prov = dict(self.provenance)
        prov["transforms"] = list(prov["transforms"]) + ([transform] if transform else [])
        prov.update(extra)
        return replace(
            self,
            image=self.image if image is None else image,
            label=self.label if label is None else label,
            provenance=prov,
        )


def _open_bytes(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"corrupt gzip stream in {path}: {exc}", 0) from exc
    return raw


def read_nifti(path) -> Volume:
    raw = _open_bytes(Path(path))
    hdr = NiftiHeader.unpack(raw)
    f = hdr.fields
    if f["magic"] not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"bad magic {f['magic']!r}", _OFFSETS["magic"])
    rank = f["dim"][0]
    if not 1 <= rank <= 7:
        raise NiftiError(f"dim[0]={rank} outside 1..7", _OFFSETS["dim"])
    dims = list(hdr.dims)
    if any(d < 1 for d in dims):
        raise NiftiError(f"non-positive dimension in {dims}", _OFFSETS["dim"])
    if any(d != 1 for d in dims[3:]):
        raise NiftiError(f"only 3D volumes are supported, got dims {dims}", _OFFSETS["dim"])
    shape = tuple((dims + [1, 1, 1])[:3])
    code = hdr.datatype_code
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}", _OFFSETS["datatype"])
    dtype = DATATYPES[code].newbyteorder(hdr.byteorder)
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if nbytes > 2**40:
        raise NiftiError(f"dims {dims} overflow", _OFFSETS["dim"])

    if f["magic"] == b"ni1\x00":
        img_path = _pair_image_path(Path(path))
        payload = _open_bytes(img_path)
        start = hdr.vox_offset
    else:
        payload = raw
        start = hdr.vox_offset
        if start < HEADER_SIZE:
            raise NiftiError(f"vox_offset {start} inside header", _OFFSETS["vox_offset"])
    if len(payload) < start + nbytes:
        raise NiftiError(
            f"truncated voxel data: need {nbytes} bytes from {start}, file has {len(payload)}",
            len(payload),
        )
    arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=start)
    arr = arr.reshape(shape, order="F").astype(dtype.newbyteorder("="))

    slope, inter = hdr.scl_slope, hdr.scl_inter
    if slope != 0 and not (slope == 1 and inter == 0):
        arr = arr.astype(np.float64) * slope + inter
    elif arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NiftiError("non-finite voxel values after scaling", start)

    spacing = tuple(float(abs(s)) if s else 1.0 for s in (list(hdr.voxel_sizes) + [1.0] * 3)[:3])
    return Volume(data=arr, spacing=spacing, affine=hdr.affine(), source_header=hdr)


def _pair_image_path(hdr_path: Path) -> Path:
    name = hdr_path.name
    for suffix in (".hdr.gz", ".hdr"):
        if name.endswith(suffix):
            base = name[: -len(suffix)]
            for ext in (".img", ".img.gz"):
                cand = hdr_path.with_name(base + ext)
                if cand.exists():
                    return cand
    raise NiftiError(f"no .img file paired with {hdr_path}", None)


def write_nifti(volume: Volume, path, dtype=None) -> None:
    """Write ``volume`` as a single-file little-endian NIfTI-1 (gzip if ``.gz``).

    ``dtype`` defaults to the source header's datatype when integer-valued data
    fits it, else float32 (or float64 if the data is float64 and no header).
    The file is written to a temporary sibling and renamed into place.
    """
    data = np.asarray(volume.data)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {data.shape}")
    out_dtype = _choose_dtype(volume, dtype)
    if out_dtype.kind in "ui":
        info = np.iinfo(out_dtype)
        if not np.all(np.isfinite(data)) or data.min() < info.min or data.max() > info.max:
            raise ValueError(f"values outside the range of {out_dtype}")
        if not np.array_equal(np.round(data), data):
            raise ValueError(f"non-integer values cannot be stored as {out_dtype}")
    payload = data.astype(out_dtype.newbyteorder("<")).tobytes(order="F")

    hdr = NiftiHeader.default() if volume.source_header is None else NiftiHeader(
        fields=dict(volume.source_header.fields)
    )
    f = hdr.fields
    f["sizeof_hdr"] = HEADER_SIZE
    f["dim"] = (3, *data.shape, 1, 1, 1, 1)
    f["datatype"] = DATATYPE_CODES[out_dtype]
    f["bitpix"] = out_dtype.itemsize * 8
    f["vox_offset"] = float(WRITE_VOX_OFFSET)
    f["scl_slope"] = 1.0
    f["scl_inter"] = 0.0
    f["magic"] = b"n+1\x00"
    pix = list(f["pixdim"])
    pix[1:4] = volume.spacing
    f["pixdim"] = tuple(pix)
    if volume.source_header is None:
        aff = np.asarray(volume.affine, dtype=np.float64)
        f["sform_code"] = 2
        f["srow_x"], f["srow_y"], f["srow_z"] = (tuple(aff[i]) for i in range(3))
    blob = hdr.pack("<") + b"\x00" * (WRITE_VOX_OFFSET - HEADER_SIZE) + payload

    path = Path(path)
    if path.name.endswith(".gz"):
        blob = gzip.compress(blob, mtime=0)
    atomic_write_bytes(path, blob)


def _choose_dtype(volume: Volume, dtype) -> np.dtype:
    if dtype is not None:
        dt = np.dtype(dtype)
        if dt not in DATATYPE_CODES:
            raise ValueError(f"unsupported output dtype {dt}")
        return dt
    if volume.source_header is not None:
        return DATATYPES[volume.source_header.datatype_code]
    if volume.data.dtype == np.float64:
        return np.dtype(np.float64)
    if volume.data.dtype in DATATYPE_CODES:
        return volume.data.dtype
    return np.dtype(np.float32)


def axial_slices(volume: Volume, subject_id: str = "", label: Volume | None = None) -> list[SliceSample]:
    """One SliceSample per index of the third voxel axis, in order."""
    if volume.data.ndim != 3:
        raise ValueError(f"expected 3 spatial dims, got {volume.data.shape}")
    if label is not None and label.data.shape != volume.data.shape:
        raise ValueError("label volume shape differs from image volume")
    return [
        SliceSample(
            subject_id=subject_id,
            slice_index=k,
            image=volume.data[:, :, k],
            label=None if label is None else (label.data[:, :, k] > 0).astype(np.uint8),
        )
        for k in range(volume.data.shape[2])
    ]


def assemble_volume(slices, template: Volume, dtype=None) -> Volume:
    """Stack 2D grids (or SliceSamples) along the axial axis using ``template``'s geometry."""
    grids = [s.image if isinstance(s, SliceSample) else np.asarray(s) for s in slices]
    x, y, z = template.data.shape
    if len(grids) != z:
        raise ValueError(f"{len(grids)} slices given, template has {z}")
    for k, g in enumerate(grids):
        if g.shape != (x, y):
            raise ValueError(f"slice {k} has shape {g.shape}, expected {(x, y)}")
    data = np.stack(grids, axis=2)
    if dtype is not None:
        data = data.astype(dtype)
    return Volume(
        data=data,
        spacing=template.spacing,
        affine=np.array(template.affine, copy=True),
        source_header=template.source_header,
    )
