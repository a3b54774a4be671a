import os
from types import SimpleNamespace

import numpy as np
import pytest

import vesselflow as vf
from vesselflow import DataError, ParameterError
from vesselflow.volio import (
    HEADER_BYTES,
    VolumeHeader,
    read_mask_volume,
    read_velocity_volume,
    read_volume,
    write_mask_volume,
    write_velocity_volume,
    write_vtk_mesh,
    write_vtk_volume,
    write_volume,
)

from conftest import make_tube


class TestHeader:
    def test_payload_arithmetic(self):
        header = VolumeHeader((32, 32, 32), (1e-3,) * 3, (0.0,) * 3, 3)
        assert header.payload_bytes == 32**3 * 3 * 4

    def test_unsupported_dtype_tag(self):
        with pytest.raises(DataError):
            VolumeHeader((4, 4, 4), (1.0,) * 3, (0.0,) * 3, 1, dtype_tag="f64")


class TestRawVolume:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        header = VolumeHeader((6, 5, 4), (2.1e-3, 2.4e-3, 2.2e-3), (0.1, -0.2, 0.3), 3, timestep=7)
        data = rng.normal(size=(3, 4, 5, 6)).astype("<f4")
        path = tmp_path / "field.vesvol"
        write_volume(path, header, data)
        header2, data2 = read_volume(path)
        assert header2 == header
        assert data2.tobytes() == data.tobytes()

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        header = VolumeHeader((4, 4, 4), (1.0,) * 3, (0.0,) * 3, 1)
        path = tmp_path / "vol.vesvol"
        write_volume(path, header, np.zeros((1, 4, 4, 4)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-9])
        with pytest.raises(DataError) as err:
            read_volume(path)
        assert str(4 * 4 * 4 * 4) in str(err.value)  # expected bytes
        assert str(4 * 4 * 4 * 4 - 9) in str(err.value)  # actual bytes

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.vesvol"
        path.write_bytes(b"not a volume" + b" " * HEADER_BYTES)
        with pytest.raises(DataError, match="magic"):
            read_volume(path)

    def test_missing_file_is_data_error(self, tmp_path):
        with pytest.raises(DataError, match="no such file"):
            read_volume(tmp_path / "absent.vesvol")

    def test_failed_write_leaves_no_file(self, tmp_path):
        header = VolumeHeader((4, 4, 4), (1.0,) * 3, (0.0,) * 3, 1)
        path = tmp_path / "out.vesvol"
        with pytest.raises(ParameterError):
            write_volume(path, header, np.zeros((1, 3, 3, 3)))  # wrong shape
        assert not path.exists()
        assert list(tmp_path.iterdir()) == []  # no temp litter either

    def test_velocity_round_trip_through_mask(self, tmp_path):
        field, _ = make_tube(n=8, seed=5)
        vel_path = tmp_path / "vel.vesvol"
        mask_path = tmp_path / "mask.vesvol"
        write_velocity_volume(vel_path, field)
        write_mask_volume(mask_path, field.grid, field.vessel_mask)
        grid, mask = read_mask_volume(mask_path)
        assert np.array_equal(mask, field.vessel_mask)
        back = read_velocity_volume(vel_path, mask=mask)
        assert np.array_equal(back.voxel_class, field.voxel_class)
        assert np.allclose(back.u, field.u, atol=1e-7)  # float32 payload


def parse_legacy_vtk(path):
    """Strict reference parser for the legacy ASCII subset we write."""
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# vtk DataFile Version")
    assert lines[2] == "ASCII"
    dataset = lines[3].split()[1]
    out = {"dataset": dataset, "arrays": {}}
    idx = 4
    if dataset == "STRUCTURED_POINTS":
        dims = tuple(int(v) for v in lines[idx].split()[1:])
        assert lines[idx].startswith("DIMENSIONS")
        assert lines[idx + 1].startswith("ORIGIN")
        assert lines[idx + 2].startswith("SPACING")
        out["dims"] = dims
        out["origin"] = tuple(float(v) for v in lines[idx + 1].split()[1:])
        out["spacing"] = tuple(float(v) for v in lines[idx + 2].split()[1:])
        idx += 3
    elif dataset == "POLYDATA":
        assert lines[idx].startswith("POINTS")
        n_points = int(lines[idx].split()[1])
        points = []
        idx += 1
        while len(points) < n_points:
            points.append([float(v) for v in lines[idx].split()])
            idx += 1
        out["points"] = np.array(points)
        assert lines[idx].startswith("POLYGONS")
        n_poly, n_ints = (int(v) for v in lines[idx].split()[1:])
        idx += 1
        polys = []
        for _ in range(n_poly):
            parts = [int(v) for v in lines[idx].split()]
            assert parts[0] == 3 and len(parts) == 4
            polys.append(parts[1:])
            idx += 1
        assert n_ints == 4 * n_poly
        out["polygons"] = np.array(polys)
    else:
        raise AssertionError(f"unexpected dataset {dataset}")

    if idx < len(lines) and lines[idx].startswith("POINT_DATA"):
        n_data = int(lines[idx].split()[1])
        out["n_point_data"] = n_data
        idx += 1
        while idx < len(lines) and lines[idx].strip():
            kind, name = lines[idx].split()[:2]
            if kind == "SCALARS":
                assert lines[idx + 1] == "LOOKUP_TABLE default"
                idx += 2
                values = [float(lines[idx + k]) for k in range(n_data)]
                idx += n_data
                out["arrays"][name] = np.array(values)
            elif kind == "VECTORS":
                idx += 1
                values = [[float(v) for v in lines[idx + k].split()] for k in range(n_data)]
                idx += n_data
                out["arrays"][name] = np.array(values)
            else:
                raise AssertionError(f"unexpected point-data kind {kind}")
    return out


class TestVtkVolume:
    def test_tiny_constant_volume_conforms(self, tmp_path):
        grid = SimpleNamespace(dims=(2, 2, 2), spacing=(0.5, 0.5, 0.5), origin=(1.0, 2.0, 3.0))
        path = tmp_path / "tiny.vtk"
        write_vtk_volume(path, grid, scalars={"speed": np.full((2, 2, 2), 4.25)})
        parsed = parse_legacy_vtk(path)
        assert parsed["dims"] == (2, 2, 2)
        assert parsed["origin"] == (1.0, 2.0, 3.0)
        assert parsed["spacing"] == (0.5, 0.5, 0.5)
        assert parsed["n_point_data"] == 8
        assert np.all(parsed["arrays"]["speed"] == 4.25)

    def test_values_written_x_fastest(self, tmp_path):
        grid = vf.VolumeGrid((3, 3, 3), (1.0, 1.0, 1.0))
        x, _, _ = grid.meshgrid()
        path = tmp_path / "ramp.vtk"
        write_vtk_volume(path, grid, scalars={"x": x})
        parsed = parse_legacy_vtk(path)
        assert np.array_equal(parsed["arrays"]["x"][:3], [0.0, 1.0, 2.0])

    def test_vector_data(self, tmp_path):
        grid = vf.VolumeGrid((3, 3, 3), (1.0, 1.0, 1.0))
        vecs = np.stack([np.full(grid.shape, v) for v in (1.0, 2.0, 3.0)])
        path = tmp_path / "vec.vtk"
        write_vtk_volume(path, grid, vectors={"velocity": vecs})
        parsed = parse_legacy_vtk(path)
        assert parsed["arrays"]["velocity"].shape == (27, 3)
        assert np.all(parsed["arrays"]["velocity"] == [1.0, 2.0, 3.0])


class TestVtkMesh:
    def test_mesh_with_wss_scalars(self, tmp_path):
        from vesselflow.bench import PhantomKind, PhantomSpec, generate_phantom

        grid = vf.VolumeGrid((12, 12, 12), (0.03 / 12,) * 3)
        phantom = generate_phantom(PhantomSpec(PhantomKind.POISEUILLE_PIPE, grid, radius=0.01))
        mesh = phantom.geometry.surface
        wss = np.linspace(0.0, 1.0, mesh.n_vertices)
        path = tmp_path / "mesh.vtk"
        write_vtk_mesh(path, mesh, point_scalars={"wss": wss})
        parsed = parse_legacy_vtk(path)
        assert parsed["points"].shape == (mesh.n_vertices, 3)
        assert parsed["arrays"]["wss"].size == mesh.n_vertices
        assert parsed["polygons"].shape == (mesh.triangles.shape[0], 3)
        assert parsed["polygons"].max() < mesh.n_vertices
