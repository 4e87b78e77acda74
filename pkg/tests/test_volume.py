import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from lndetect.volume import (
    VVOL_MAGIC,
    BinaryMask,
    VoxelGrid,
    VvolError,
    read_volume,
    write_volume,
)


def grid_from(values, spacing=(1.0, 1.0, 1.0), kind="generic"):
    return VoxelGrid(np.asarray(values, dtype=np.float32), spacing, kind=kind)


class TestInvariants:
    def test_probability_range_enforced(self):
        with pytest.raises(ValueError, match="probability"):
            grid_from(np.full((2, 2, 2), 1.5), kind="probability")

    def test_non_positive_spacing_rejected(self):
        with pytest.raises(ValueError, match="spacing"):
            grid_from(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))

    def test_mask_rejects_non_binary(self):
        with pytest.raises(ValueError, match="0/1"):
            BinaryMask(np.array([[[0, 2]]]), (1, 1, 1))

    def test_dims_are_xyz(self):
        g = grid_from(np.zeros((4, 3, 2)))  # (nz, ny, nx)
        assert g.dims == (2, 3, 4)


class TestRoundTrip:
    def test_write_read_identity(self, tmp_path):
        g = grid_from(np.arange(8).reshape(2, 2, 2), spacing=(1, 2, 3))
        path = tmp_path / "g.vvol"
        write_volume(g, path)
        back = read_volume(path)
        assert isinstance(back, VoxelGrid)
        assert back.dims == g.dims
        assert back.spacing == g.spacing
        assert back.kind == g.kind
        np.testing.assert_array_equal(back.values, g.values)

    def test_mask_round_trip(self, tmp_path, rng):
        m = BinaryMask(rng.random((3, 4, 5)) < 0.5, (1.0, 1.0, 2.5), (1.0, -2.0, 3.5))
        path = tmp_path / "m.vvol"
        write_volume(m, path)
        back = read_volume(path)
        assert isinstance(back, BinaryMask)
        np.testing.assert_array_equal(back.bits, m.bits)
        assert back.origin == m.origin

    def test_same_grid_written_twice_identical_bytes(self, tmp_path, rng):
        g = grid_from(rng.random((3, 3, 3)), spacing=(0.5, 0.5, 1.25))
        write_volume(g, tmp_path / "a.vvol")
        write_volume(g, tmp_path / "b.vvol")
        assert (tmp_path / "a.vvol").read_bytes() == (tmp_path / "b.vvol").read_bytes()

    def test_round_trip_fuzz_byte_identical(self, tmp_path, rng):
        # write -> read -> write must reproduce the file byte for byte
        for i in range(100):
            dims = rng.integers(1, 7, size=3)
            if rng.random() < 0.3:
                vol = BinaryMask(
                    rng.random((dims[2], dims[1], dims[0])) < 0.5,
                    tuple(rng.uniform(0.3, 3.0, 3)),
                    tuple(rng.normal(0, 50, 3)),
                )
            else:
                kind = ("generic", "ct-hu", "pet-suv", "distance-mm")[rng.integers(0, 4)]
                vol = VoxelGrid(
                    rng.normal(0, 100, (dims[2], dims[1], dims[0])).astype(np.float32),
                    tuple(rng.uniform(0.3, 3.0, 3)),
                    tuple(rng.normal(0, 50, 3)),
                    kind,
                )
            p1 = tmp_path / f"fuzz_{i}_a.vvol"
            p2 = tmp_path / f"fuzz_{i}_b.vvol"
            write_volume(vol, p1)
            write_volume(read_volume(p1), p2)
            assert p1.read_bytes() == p2.read_bytes()

    @settings(
        max_examples=30,
        deadline=None,
        suppress_health_check=[HealthCheck.function_scoped_fixture],
    )
    @given(
        nx=st.integers(1, 5),
        ny=st.integers(1, 5),
        nz=st.integers(1, 5),
        data=st.data(),
    )
    def test_round_trip_values_hypothesis(self, tmp_path, nx, ny, nz, data):
        values = data.draw(
            st.lists(
                st.floats(-1e6, 1e6, width=32),
                min_size=nx * ny * nz,
                max_size=nx * ny * nz,
            )
        )
        g = VoxelGrid(
            np.array(values, dtype=np.float32).reshape(nz, ny, nx), (1.0, 1.0, 1.0)
        )
        path = tmp_path / "h.vvol"
        write_volume(g, path)
        np.testing.assert_array_equal(read_volume(path).values, g.values)

    def test_file_size_arithmetic(self, tmp_path, rng):
        g = grid_from(rng.random((4, 5, 6)))
        path = tmp_path / "size.vvol"
        write_volume(g, path)
        raw = path.read_bytes()
        header_end = raw.find(b"\n", len(VVOL_MAGIC) + 1)
        assert len(raw) == header_end + 1 + 4 * 5 * 6 * 4


class TestErrors:
    def _valid_bytes(self, tmp_path):
        g = grid_from(np.zeros((4, 4, 4)))
        path = tmp_path / "v.vvol"
        write_volume(g, path)
        return path.read_bytes()

    def test_bad_magic_offset_zero(self, tmp_path):
        path = tmp_path / "bad.vvol"
        path.write_bytes(b"NOPE0001\n{}\n")
        with pytest.raises(VvolError) as exc:
            read_volume(path)
        assert exc.value.byte_offset == 0

    def test_payload_length_mismatch(self, tmp_path):
        raw = self._valid_bytes(tmp_path)
        path = tmp_path / "short.vvol"
        path.write_bytes(raw[:-4])  # drop one f32: 63 of 64 elements
        with pytest.raises(VvolError, match="payload length mismatch"):
            read_volume(path)

    def test_header_not_json(self, tmp_path):
        path = tmp_path / "hdr.vvol"
        path.write_bytes(VVOL_MAGIC + b"\nnot-json\n")
        with pytest.raises(VvolError, match="JSON"):
            read_volume(path)
        try:
            read_volume(path)
        except VvolError as e:
            assert e.byte_offset == len(VVOL_MAGIC) + 1

    def test_non_positive_spacing_in_header(self, tmp_path):
        header = {
            "dims": [1, 1, 1],
            "spacing_mm": [0.0, 1.0, 1.0],
            "origin_mm": [0, 0, 0],
            "dtype": "f32",
            "kind": "generic",
        }
        path = tmp_path / "sp.vvol"
        path.write_bytes(
            VVOL_MAGIC + b"\n" + json.dumps(header).encode() + b"\n" + b"\x00" * 4
        )
        with pytest.raises(VvolError, match="spacing"):
            read_volume(path)

    def test_write_invalid_probability_refused(self, tmp_path):
        g = grid_from(np.full((2, 2, 2), 0.5), kind="probability")
        bad = np.full((2, 2, 2), 1.5, dtype=np.float32)
        with pytest.raises(ValueError):
            write_volume(g.with_values(bad), tmp_path / "p.vvol")
