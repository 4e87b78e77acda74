"""Volumetric data model and bit-exact VVOL file I/O.

Arrays are stored in (z, y, x) index order, C-contiguous, so that
``values.ravel()`` enumerates voxels x-fastest, then y, then z.  All
physical quantities (``spacing``, ``origin``, world coordinates) are in
millimetres and ordered (x, y, z).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

VVOL_MAGIC = b"VVOL0001"

KIND_CT = "ct-hu"
KIND_PET = "pet-suv"
KIND_PROBABILITY = "probability"
KIND_DISTANCE = "distance-mm"
KIND_GENERIC = "generic"
KIND_MASK = "mask"

SCALAR_KINDS = (KIND_CT, KIND_PET, KIND_PROBABILITY, KIND_DISTANCE, KIND_GENERIC)


class VvolError(ValueError):
    """Malformed VVOL file.  ``byte_offset`` locates the offending bytes."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


def _check_geometry(dims, spacing, origin):
    if len(dims) != 3 or any(int(d) <= 0 for d in dims):
        raise ValueError(f"dims must be 3 positive integers, got {dims!r}")
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive reals, got {spacing!r}")
    if len(origin) != 3 or any(not np.isfinite(o) for o in origin):
        raise ValueError(f"origin must be 3 finite reals, got {origin!r}")


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A dense 3D scalar field with physical spacing and origin.

    Attributes:
        values: float32 array of shape (nz, ny, nx).
        spacing: voxel size (sx, sy, sz) in mm.
        origin: world position of the center of voxel (0, 0, 0), in mm.
        kind: one of ct-hu, pet-suv, probability, distance-mm, generic.
    """

    values: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = KIND_GENERIC

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"values must be a 3D array, got shape {arr.shape}")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        _check_geometry(self.dims, self.spacing, self.origin)
        if self.kind not in SCALAR_KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.kind == KIND_PROBABILITY:
            lo, hi = float(arr.min()), float(arr.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(
                    f"probability grid values must lie in [0, 1], found [{lo}, {hi}]"
                )

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz) voxel counts."""
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    @property
    def geometry(self) -> tuple:
        return (self.dims, self.spacing, self.origin)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def same_geometry(self, other) -> bool:
        return self.geometry == other.geometry

    def with_values(self, values: np.ndarray, kind: str | None = None) -> "VoxelGrid":
        return VoxelGrid(values, self.spacing, self.origin, kind or self.kind)

    def world_coords(self, zyx_indices: np.ndarray) -> np.ndarray:
        """Map (N, 3) integer voxel indices in (z, y, x) order to (N, 3) world mm (x, y, z)."""
        idx = np.atleast_2d(zyx_indices)[:, ::-1].astype(np.float64)
        sp = np.asarray(self.spacing)
        return np.asarray(self.origin) + idx * sp


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """A dense boolean volume sharing the VoxelGrid geometry conventions."""

    bits: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.bits)
        if arr.dtype != np.bool_:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("mask payload contains values other than 0/1")
            arr = arr.astype(np.bool_)
        if arr.ndim != 3:
            raise ValueError(f"bits must be a 3D array, got shape {arr.shape}")
        object.__setattr__(self, "bits", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        _check_geometry(self.dims, self.spacing, self.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.bits.shape
        return (nx, ny, nz)

    @property
    def geometry(self) -> tuple:
        return (self.dims, self.spacing, self.origin)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def same_geometry(self, other) -> bool:
        return self.geometry == other.geometry

    def with_bits(self, bits: np.ndarray) -> "BinaryMask":
        return BinaryMask(bits, self.spacing, self.origin)

    def world_coords(self, zyx_indices: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(zyx_indices)[:, ::-1].astype(np.float64)
        sp = np.asarray(self.spacing)
        return np.asarray(self.origin) + idx * sp


def require_same_geometry(*grids) -> None:
    """Raise ValueError unless every grid/mask shares dims, spacing and origin."""
    ref = grids[0].geometry
    for g in grids[1:]:
        if g.geometry != ref:
            raise ValueError(f"geometry mismatch: {ref} vs {g.geometry}")


# ---------------------------------------------------------------------------
# VVOL format
#
# magic "VVOL0001" + \n + one JSON header line + \n + raw little-endian
# payload, x-fastest.  f32 payloads are scalar grids, u8 payloads with
# values {0,1} are masks.
# ---------------------------------------------------------------------------

_HEADER_KEYS = ("dims", "spacing_mm", "origin_mm", "dtype", "kind")


def write_volume(grid: VoxelGrid | BinaryMask, path) -> None:
    """Write a grid or mask as a VVOL file.  Output bytes are deterministic."""
    if isinstance(grid, BinaryMask):
        dtype, kind = "u8", KIND_MASK
        payload = grid.bits.astype("<u1").tobytes()
    elif isinstance(grid, VoxelGrid):
        dtype, kind = "f32", grid.kind
        payload = grid.values.astype("<f4").tobytes()
    else:
        raise TypeError(f"expected VoxelGrid or BinaryMask, got {type(grid)!r}")
    header = {
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing),
        "origin_mm": list(grid.origin),
        "dtype": dtype,
        "kind": kind,
    }
    header_line = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(VVOL_MAGIC)
        fh.write(b"\n")
        fh.write(header_line)
        fh.write(b"\n")
        fh.write(payload)


def read_volume(path) -> VoxelGrid | BinaryMask:
    """Read a VVOL file; u8 payloads come back as BinaryMask."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(VVOL_MAGIC) + 1 or raw[: len(VVOL_MAGIC)] != VVOL_MAGIC:
        raise VvolError(f"bad magic, expected {VVOL_MAGIC!r}", 0)
    if raw[len(VVOL_MAGIC)] != ord(b"\n"):
        raise VvolError("missing newline after magic", len(VVOL_MAGIC))
    header_start = len(VVOL_MAGIC) + 1
    header_end = raw.find(b"\n", header_start)
    if header_end < 0:
        raise VvolError("unterminated header line", header_start)
    try:
        header = json.loads(raw[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VvolError(f"header is not valid JSON: {exc}", header_start) from exc
    if not isinstance(header, dict) or set(header) != set(_HEADER_KEYS):
        raise VvolError(
            f"header must contain exactly the keys {_HEADER_KEYS}", header_start
        )
    dims = header["dims"]
    spacing = header["spacing_mm"]
    origin = header["origin_mm"]
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or any(not isinstance(d, int) or d <= 0 for d in dims)
    ):
        raise VvolError(f"bad dims {dims!r}", header_start)
    if (
        not isinstance(spacing, list)
        or len(spacing) != 3
        or any(not isinstance(s, (int, float)) or s <= 0 for s in spacing)
    ):
        raise VvolError(f"non-positive or malformed spacing {spacing!r}", header_start)
    if (
        not isinstance(origin, list)
        or len(origin) != 3
        or any(not isinstance(o, (int, float)) for o in origin)
    ):
        raise VvolError(f"malformed origin {origin!r}", header_start)
    dtype = header["dtype"]
    if dtype not in ("f32", "u8"):
        raise VvolError(f"unknown dtype {dtype!r}", header_start)

    payload_start = header_end + 1
    nx, ny, nz = dims
    count = nx * ny * nz
    itemsize = 4 if dtype == "f32" else 1
    expected = count * itemsize
    actual = len(raw) - payload_start
    if actual != expected:
        raise VvolError(
            f"payload length mismatch: expected {expected} bytes for dims {dims}, got {actual}",
            payload_start,
        )
    buf = raw[payload_start:]
    if dtype == "u8":
        arr = np.frombuffer(buf, dtype="<u1").reshape(nz, ny, nx)
        if not np.isin(arr, (0, 1)).all():
            raise VvolError("u8 payload contains values other than 0/1", payload_start)
        return BinaryMask(arr.astype(bool), tuple(spacing), tuple(origin))
    arr = np.frombuffer(buf, dtype="<f4").reshape(nz, ny, nx)
    kind = header["kind"]
    if kind not in SCALAR_KINDS:
        raise VvolError(f"unknown scalar kind {kind!r}", header_start)
    return VoxelGrid(arr.copy(), tuple(spacing), tuple(origin), kind)
