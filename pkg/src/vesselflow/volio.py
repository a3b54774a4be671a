"""Raw volume file format and legacy-ASCII VTK export.

The raw format is deliberately minimal so any language can implement it
bit-exactly: a fixed 768-byte ASCII header (twelve 64-byte lines, space
padded, newline terminated) followed by a little-endian float32 payload
in x-fastest order, one component block after another.

    vesselflow-volume 1
    dims <nx> <ny> <nz>
    spacing_x <hx>              (meters; one value per line so that
    spacing_y <hy>               full 17-digit round-trip reprs fit)
    spacing_z <hz>
    origin_x <ox>
    origin_y <oy>
    origin_z <oz>
    components <n>
    dtype f32
    timestep <t>
    end

All writers go through a temp-file-then-rename so an output file is
either complete or absent.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .grid import ScalarField, SurfaceMesh, VelocityField, VolumeGrid, classify_voxels

MAGIC = "vesselflow-volume 1"
HEADER_LINES = 12
LINE_BYTES = 64
HEADER_BYTES = HEADER_LINES * LINE_BYTES
DTYPE_TAGS = ("f32",)


@dataclass(frozen=True)
class VolumeHeader:
    """Metadata of one raw volume file."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    n_components: int
    dtype_tag: str = "f32"
    timestep: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ParameterError("component count must be >= 1")
        if self.dtype_tag not in DTYPE_TAGS:
            raise DataError(f"unsupported scalar tag {self.dtype_tag!r}")

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def payload_bytes(self) -> int:
        return self.n_components * self.n_voxels * 4

    def grid(self) -> VolumeGrid:
        return VolumeGrid(self.dims, self.spacing, self.origin)

    @classmethod
    def for_grid(cls, grid: VolumeGrid, n_components: int, timestep: int = 0):
        return cls(grid.dims, grid.spacing, grid.origin, n_components, "f32", timestep)


def _atomic_write(path, write_fn):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            write_fn(handle)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _pad_line(text: str) -> bytes:
    if len(text) > LINE_BYTES - 1:
        raise DataError(f"header line too long: {text!r}")
    return (text + " " * (LINE_BYTES - 1 - len(text))).encode("ascii") + b"\n"


def _encode_header(header: VolumeHeader) -> bytes:
    lines = [MAGIC, "dims %d %d %d" % header.dims]
    for axis, value in zip("xyz", header.spacing):
        lines.append("spacing_%s %.17g" % (axis, value))
    for axis, value in zip("xyz", header.origin):
        lines.append("origin_%s %.17g" % (axis, value))
    lines += [
        "components %d" % header.n_components,
        "dtype %s" % header.dtype_tag,
        "timestep %d" % header.timestep,
        "end",
    ]
    return b"".join(_pad_line(line) for line in lines)


def _parse_header(blob: bytes, path) -> VolumeHeader:
    if len(blob) < HEADER_BYTES:
        raise DataError(f"{path}: truncated header ({len(blob)} of {HEADER_BYTES} bytes)")
    try:
        lines = [
            blob[i * LINE_BYTES : (i + 1) * LINE_BYTES].decode("ascii").rstrip()
            for i in range(HEADER_LINES)
        ]
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: header is not ASCII") from exc
    if lines[0] != MAGIC:
        raise DataError(f"{path}: bad magic {lines[0]!r}")
    if lines[11] != "end":
        raise DataError(f"{path}: malformed header terminator {lines[11]!r}")

    def fields(line, key, count, cast):
        parts = line.split()
        if len(parts) != count + 1 or parts[0] != key:
            raise DataError(f"{path}: malformed header line {line!r}")
        try:
            return tuple(cast(p) for p in parts[1:])
        except ValueError as exc:
            raise DataError(f"{path}: malformed header line {line!r}") from exc

    dims = fields(lines[1], "dims", 3, int)
    spacing = tuple(
        fields(lines[2 + a], f"spacing_{axis}", 1, float)[0] for a, axis in enumerate("xyz")
    )
    origin = tuple(
        fields(lines[5 + a], f"origin_{axis}", 1, float)[0] for a, axis in enumerate("xyz")
    )
    (n_comp,) = fields(lines[8], "components", 1, int)
    (dtype_tag,) = fields(lines[9], "dtype", 1, str)
    (timestep,) = fields(lines[10], "timestep", 1, int)
    return VolumeHeader(dims, spacing, origin, n_comp, dtype_tag, timestep)


def write_volume(path, header: VolumeHeader, data: np.ndarray) -> None:
    """Write components shaped (n_components, nz, ny, nx) as one file."""
    nx, ny, nz = header.dims
    expected = (header.n_components, nz, ny, nx)
    arr = np.asarray(data)
    if arr.shape != expected:
        raise ParameterError(f"data shape {arr.shape} does not match header {expected}")
    payload = np.ascontiguousarray(arr, dtype="<f4")

    def emit(handle):
        handle.write(_encode_header(header))
        handle.write(payload.tobytes())

    _atomic_write(path, emit)


def read_volume(path) -> tuple[VolumeHeader, np.ndarray]:
    """Read a raw volume; returns (header, float32 array (n_comp, nz, ny, nx))."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such file") from exc
    header = _parse_header(blob, path)
    payload = blob[HEADER_BYTES:]
    if len(payload) != header.payload_bytes:
        raise DataError(
            f"{path}: payload size mismatch: expected {header.payload_bytes} bytes "
            f"({header.n_components} components x {header.n_voxels} voxels x 4), "
            f"found {len(payload)}"
        )
    nx, ny, nz = header.dims
    data = np.frombuffer(payload, dtype="<f4").reshape(header.n_components, nz, ny, nx)
    return header, data


# ---------------------------------------------------------------------------
# field adapters


def write_velocity_volume(path, field: VelocityField, timestep: int = 0) -> None:
    header = VolumeHeader.for_grid(field.grid, 3, timestep)
    write_volume(path, header, np.stack(field.components()))


def write_scalar_volume(path, field: ScalarField, timestep: int = 0) -> None:
    header = VolumeHeader.for_grid(field.grid, 1, timestep)
    write_volume(path, header, field.values[None])


def write_mask_volume(path, grid: VolumeGrid, mask: np.ndarray) -> None:
    header = VolumeHeader.for_grid(grid, 1)
    write_volume(path, header, np.asarray(mask, dtype=float)[None])


def read_velocity_volume(path, mask=None, weight=None) -> VelocityField:
    """Load a 3-component volume; classification comes from the mask.

    Without a mask every voxel is treated as in-vessel open-boundary-free
    interior as far as storage goes; smoothing requires a real mask.
    """
    header, data = read_volume(path)
    if header.n_components != 3:
        raise DataError(f"{path}: expected 3 components, found {header.n_components}")
    grid = header.grid()
    if mask is None:
        voxel_class = classify_voxels(np.ones(grid.shape, dtype=bool))
    else:
        voxel_class = classify_voxels(np.asarray(mask, dtype=bool))
    return VelocityField.from_components(
        grid, data[0].astype(float), data[1].astype(float), data[2].astype(float),
        voxel_class, weight,
    )


def read_mask_volume(path) -> tuple[VolumeGrid, np.ndarray]:
    header, data = read_volume(path)
    if header.n_components != 1:
        raise DataError(f"{path}: expected 1 component, found {header.n_components}")
    return header.grid(), data[0] > 0.5


# ---------------------------------------------------------------------------
# legacy VTK export


def _fmt(value: float) -> str:
    return "%.9g" % float(value)


def write_vtk_volume(path, grid, scalars=None, vectors=None, title="volume"):
    """Legacy-ASCII STRUCTURED_POINTS file with point data.

    grid needs dims / spacing / origin attributes (a VolumeGrid, or any
    stand-in; unlike the stencil code this writer has no minimum size).
    scalars: {name: (nz, ny, nx) array}; vectors: {name: (3, nz, ny, nx)}.
    """
    scalars = scalars or {}
    vectors = vectors or {}
    if not scalars and not vectors:
        raise ParameterError("nothing to export")
    nx, ny, nz = grid.dims
    shape = (nz, ny, nx)
    for name, arr in scalars.items():
        if arr.shape != shape:
            raise ParameterError(f"scalar {name!r} shape does not match grid")
    for name, arr in vectors.items():
        if arr.shape != (3,) + shape:
            raise ParameterError(f"vector {name!r} shape does not match grid")

    def emit(handle):
        def w(text):
            handle.write((text + "\n").encode("ascii"))

        w("# vtk DataFile Version 3.0")
        w(title)
        w("ASCII")
        w("DATASET STRUCTURED_POINTS")
        w("DIMENSIONS %d %d %d" % (nx, ny, nz))
        w("ORIGIN %s %s %s" % tuple(_fmt(o) for o in grid.origin))
        w("SPACING %s %s %s" % tuple(_fmt(h) for h in grid.spacing))
        w("POINT_DATA %d" % (nx * ny * nz))
        for name, arr in scalars.items():
            w("SCALARS %s float 1" % name)
            w("LOOKUP_TABLE default")
            for value in arr.ravel():  # x fastest
                w(_fmt(value))
        for name, arr in vectors.items():
            w("VECTORS %s float" % name)
            flat = arr.reshape(3, -1)
            for i in range(flat.shape[1]):
                w("%s %s %s" % (_fmt(flat[0, i]), _fmt(flat[1, i]), _fmt(flat[2, i])))

    _atomic_write(path, emit)


def write_vtk_mesh(path, mesh: SurfaceMesh, point_scalars=None, point_vectors=None, title="surface"):
    """Legacy-ASCII POLYDATA file with per-vertex data."""
    point_scalars = point_scalars or {}
    point_vectors = point_vectors or {}
    n = mesh.n_vertices
    for name, arr in point_scalars.items():
        if arr.shape != (n,):
            raise ParameterError(f"scalar {name!r} must have one value per vertex")
    for name, arr in point_vectors.items():
        if arr.shape != (n, 3):
            raise ParameterError(f"vector {name!r} must have one triple per vertex")

    def emit(handle):
        def w(text):
            handle.write((text + "\n").encode("ascii"))

        w("# vtk DataFile Version 3.0")
        w(title)
        w("ASCII")
        w("DATASET POLYDATA")
        w("POINTS %d float" % n)
        for p in mesh.vertices:
            w("%s %s %s" % (_fmt(p[0]), _fmt(p[1]), _fmt(p[2])))
        tris = mesh.triangles
        w("POLYGONS %d %d" % (tris.shape[0], 4 * tris.shape[0]))
        for t in tris:
            w("3 %d %d %d" % (t[0], t[1], t[2]))
        if point_scalars or point_vectors:
            w("POINT_DATA %d" % n)
            for name, arr in point_scalars.items():
                w("SCALARS %s float 1" % name)
                w("LOOKUP_TABLE default")
                for value in arr:
                    w(_fmt(value))
            for name, arr in point_vectors.items():
                w("VECTORS %s float" % name)
                for v in arr:
                    w("%s %s %s" % (_fmt(v[0]), _fmt(v[1]), _fmt(v[2])))

    _atomic_write(path, emit)
