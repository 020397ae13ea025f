"""Minimal NIfTI-1 reader/writer.

Supports single-file images (magic ``n+1``), optionally gzip-compressed,
which is the only on-disk format the pipeline consumes or produces. Reading
returns the raw data array in file axis order (Fortran layout, first axis
fastest) together with the 4x4 voxel-to-physical affine; orientation
canonicalization is the volume module's job.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .errors import MalformedHeader

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

_DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype(
        [
            ("sizeof_hdr", f"{byteorder}i4"),
            ("data_type", "S10"),
            ("db_name", "S18"),
            ("extents", f"{byteorder}i4"),
            ("session_error", f"{byteorder}i2"),
            ("regular", "S1"),
            ("dim_info", "u1"),
            ("dim", f"{byteorder}i2", (8,)),
            ("intent_p1", f"{byteorder}f4"),
            ("intent_p2", f"{byteorder}f4"),
            ("intent_p3", f"{byteorder}f4"),
            ("intent_code", f"{byteorder}i2"),
            ("datatype", f"{byteorder}i2"),
            ("bitpix", f"{byteorder}i2"),
            ("slice_start", f"{byteorder}i2"),
            ("pixdim", f"{byteorder}f4", (8,)),
            ("vox_offset", f"{byteorder}f4"),
            ("scl_slope", f"{byteorder}f4"),
            ("scl_inter", f"{byteorder}f4"),
            ("slice_end", f"{byteorder}i2"),
            ("slice_code", "u1"),
            ("xyzt_units", "u1"),
            ("cal_max", f"{byteorder}f4"),
            ("cal_min", f"{byteorder}f4"),
            ("slice_duration", f"{byteorder}f4"),
            ("toffset", f"{byteorder}f4"),
            ("glmax", f"{byteorder}i4"),
            ("glmin", f"{byteorder}i4"),
            ("descrip", "S80"),
            ("aux_file", "S24"),
            ("qform_code", f"{byteorder}i2"),
            ("sform_code", f"{byteorder}i2"),
            ("quatern_b", f"{byteorder}f4"),
            ("quatern_c", f"{byteorder}f4"),
            ("quatern_d", f"{byteorder}f4"),
            ("qoffset_x", f"{byteorder}f4"),
            ("qoffset_y", f"{byteorder}f4"),
            ("qoffset_z", f"{byteorder}f4"),
            ("srow_x", f"{byteorder}f4", (4,)),
            ("srow_y", f"{byteorder}f4", (4,)),
            ("srow_z", f"{byteorder}f4", (4,)),
            ("intent_name", "S16"),
            ("magic", "S4"),
        ]
    )


def _quaternion_rotation(b: float, c: float, d: float) -> np.ndarray:
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a_sq, 0.0))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )


def _affine_from_header(hdr: np.void, ndim: int) -> np.ndarray:
    affine = np.eye(4)
    if int(hdr["sform_code"]) > 0:
        affine[0, :] = hdr["srow_x"]
        affine[1, :] = hdr["srow_y"]
        affine[2, :] = hdr["srow_z"]
        return affine
    pixdim = np.asarray(hdr["pixdim"], dtype=float)
    spacing = pixdim[1 : 1 + max(ndim, 3)]
    spacing = np.where(spacing == 0, 1.0, np.abs(spacing))[:3]
    if int(hdr["qform_code"]) > 0:
        rot = _quaternion_rotation(
            float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"])
        )
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        rot[:, 2] *= qfac
        affine[:3, :3] = rot * spacing
        affine[:3, 3] = (hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"])
        return affine
    affine[:3, :3] = np.diag(spacing)
    return affine


def read_nifti(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a NIfTI-1 file.

    Returns ``(data, affine)`` where ``data`` has the file's axis order and
    the affine maps voxel indices to physical millimetres. Intensity scaling
    (scl_slope/scl_inter) is applied. Raises FileNotFoundError or
    MalformedHeader; dimensionality policy is left to the caller.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return decode_nifti(path.read_bytes(), name=str(path))


def decode_nifti(raw: bytes, name: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Parse NIfTI-1 content from memory; gzip-compressed input is accepted."""
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise MalformedHeader(f"{name}: corrupt gzip stream ({exc})") from exc
    path = name
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"{path}: shorter than a NIfTI-1 header")

    byteorder = "<"
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype(byteorder))[0]
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        byteorder = ">"
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype(byteorder))[0]
        if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
            raise MalformedHeader(f"{path}: sizeof_hdr is not {HEADER_SIZE}")
    # numpy S4 strips trailing NULs, so compare the stripped form
    if bytes(hdr["magic"]).rstrip(b"\x00") != MAGIC_SINGLE.rstrip(b"\x00"):
        raise MalformedHeader(f"{path}: bad magic {bytes(hdr['magic'])!r}")

    dim = np.asarray(hdr["dim"], dtype=int)
    ndim = int(dim[0])
    if not 1 <= ndim <= 7:
        raise MalformedHeader(f"{path}: dim[0]={ndim} outside 1..7")
    shape = tuple(int(n) for n in dim[1 : 1 + ndim])
    if any(n < 1 for n in shape):
        raise MalformedHeader(f"{path}: nonpositive dimension in {shape}")

    code = int(hdr["datatype"])
    if code not in _DTYPE_CODES:
        raise MalformedHeader(f"{path}: unsupported datatype code {code}")
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder(byteorder)

    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    end = offset + count * dtype.itemsize
    if offset < HEADER_SIZE or end > len(raw):
        raise MalformedHeader(f"{path}: data extent {offset}..{end} exceeds file")

    data = np.frombuffer(raw[offset:end], dtype=dtype).reshape(shape, order="F")
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope not in (0.0, 1.0) or (slope == 1.0 and inter != 0.0):
        data = data.astype(np.float32) * slope + inter

    return data, _affine_from_header(hdr, ndim)


def encode_nifti(data: np.ndarray, affine: np.ndarray | None = None,
                 spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> bytes:
    """Serialize ``data`` to uncompressed single-file NIfTI-1 bytes.

    If ``affine`` is omitted, an axis-aligned affine is built from
    ``spacing`` and ``origin``. dtype must be one of the supported codes.
    """
    data = np.asarray(data)
    if data.dtype not in _CODE_FOR_DTYPE:
        raise ValueError(f"unsupported dtype for NIfTI output: {data.dtype}")
    if affine is None:
        affine = np.eye(4)
        affine[:3, :3] = np.diag(spacing)
        affine[:3, 3] = origin

    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = data.ndim
    dim[1 : 1 + data.ndim] = data.shape
    hdr["dim"] = dim
    hdr["datatype"] = _CODE_FOR_DTYPE[data.dtype]
    hdr["bitpix"] = data.dtype.itemsize * 8
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    col_norms = np.linalg.norm(affine[:3, :3], axis=0)
    pixdim[1:4] = np.where(col_norms == 0, 1.0, col_norms)
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = HEADER_SIZE + 4
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    hdr["srow_x"] = affine[0, :]
    hdr["srow_y"] = affine[1, :]
    hdr["srow_z"] = affine[2, :]
    hdr["magic"] = MAGIC_SINGLE

    return hdr.tobytes() + b"\x00\x00\x00\x00" + data.tobytes(order="F")


def write_nifti(path, data: np.ndarray, affine: np.ndarray | None = None,
                spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> None:
    """Write ``data`` as a single-file NIfTI-1 image (gzipped iff ``.gz``)."""
    path = Path(path)
    payload = encode_nifti(data, affine=affine, spacing=spacing, origin=origin)
    if path.suffix == ".gz":
        # mtime pinned so identical volumes produce identical bytes
        with open(path, "wb") as fh:
            with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        path.write_bytes(payload)
