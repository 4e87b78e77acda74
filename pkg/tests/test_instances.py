import numpy as np
import pytest

from lndetect.distance import SignedDistanceMap
from lndetect.instances import (
    InstanceCandidate,
    binarize,
    connected_components,
    equivalent_radius_mm,
    extract_candidates,
    gt_instances,
    rasterize_sphere,
    read_candidates_csv,
    read_gt_csv,
    write_candidates_csv,
    write_gt_csv,
)
from lndetect.volume import BinaryMask, VoxelGrid

from conftest import random_mask
from reference import bfs_components, propagation_components


def prob(values, spacing=(1.0, 1.0, 1.0)):
    return VoxelGrid(np.asarray(values, np.float32), spacing, kind="probability")


class TestBinarize:
    def test_tie_counts_as_foreground(self):
        m = binarize(prob([[[0.5, 0.49]]]), 0.5)
        assert m.bits[0, 0, 0]
        assert not m.bits[0, 0, 1]

    def test_tau_zero_everything_foreground(self, rng):
        m = binarize(prob(rng.random((3, 3, 3))), 0.0)
        assert m.bits.all()

    def test_matches_per_voxel_comparison(self, rng):
        p = prob(rng.random((4, 5, 6)))
        m = binarize(p, 0.3)
        np.testing.assert_array_equal(m.bits, p.values >= 0.3)

    def test_tau_out_of_range(self, rng):
        with pytest.raises(ValueError, match="tau"):
            binarize(prob([[[0.5]]]), 1.5)

    def test_monotone_in_tau(self, rng):
        p = prob(rng.random((5, 5, 5)))
        counts = [binarize(p, t).bits.sum() for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))


class TestConnectedComponents:
    def test_two_separated_voxels(self):
        bits = np.array([[[True, False, True]]])
        comps = connected_components(BinaryMask(bits, (1, 1, 1)), 6)
        assert len(comps) == 2
        assert comps[0].tolist() == [0]
        assert comps[1].tolist() == [2]

    def test_corner_touch_depends_on_connectivity(self):
        bits = np.zeros((2, 2, 2), bool)
        bits[0, 0, 0] = True
        bits[1, 1, 1] = True  # shares only a corner
        m = BinaryMask(bits, (1, 1, 1))
        assert len(connected_components(m, 26)) == 1
        assert len(connected_components(m, 6)) == 2

    def test_edge_touch_18_vs_6(self):
        bits = np.zeros((2, 2, 1), bool)
        bits[0, 0, 0] = True
        bits[1, 1, 0] = True  # shares an edge
        m = BinaryMask(bits, (1, 1, 1))
        assert len(connected_components(m, 18)) == 1
        assert len(connected_components(m, 6)) == 2

    def test_empty_mask(self):
        assert connected_components(BinaryMask(np.zeros((2, 2, 2), bool), (1, 1, 1))) == []

    @pytest.mark.parametrize("connectivity", [6, 18, 26])
    def test_matches_bfs_flood_fill_small(self, rng, connectivity):
        for _ in range(10):
            m = random_mask(rng, (6, 7, 8), density=0.35, spacing=(1, 1, 1))
            got = connected_components(m, connectivity)
            want = bfs_components(m.bits, connectivity)
            assert len(got) == len(want)
            for a, b in zip(got, want):
                np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("connectivity", [6, 26])
    def test_matches_propagation_reference_32cubed(self, rng, connectivity):
        for _ in range(5):
            m = random_mask(rng, (32, 32, 32), density=0.3, spacing=(1, 1, 1))
            got = connected_components(m, connectivity)
            want = propagation_components(m.bits, connectivity)
            assert len(got) == len(want)
            for a, b in zip(got, want):
                np.testing.assert_array_equal(a, b)

    def test_partition_property(self, rng):
        m = random_mask(rng, (10, 10, 10), density=0.4, spacing=(1, 1, 1))
        comps = connected_components(m, 26)
        allv = np.concatenate(comps) if comps else np.empty(0, np.int64)
        np.testing.assert_array_equal(np.sort(allv), np.flatnonzero(m.bits.ravel()))
        assert len(np.unique(allv)) == allv.size

    def test_bad_connectivity(self, rng):
        with pytest.raises(ValueError, match="connectivity"):
            connected_components(random_mask(rng, (3, 3, 3)), 10)


class TestExtractCandidates:
    def test_four_voxel_measurement(self):
        vals = np.zeros((2, 4, 4), np.float32)
        vals[0, 1, 1] = vals[0, 1, 2] = vals[0, 2, 1] = vals[0, 2, 2] = 0.8
        p = prob(vals, spacing=(1.0, 1.0, 2.5))
        cands = extract_candidates(p, tau=0.5, min_voxels=1)
        assert len(cands) == 1
        c = cands[0]
        assert c.volume_mm3 == pytest.approx(10.0)
        assert c.radius_mm == pytest.approx(1.3365046175719757, abs=1e-9)
        assert c.score == pytest.approx(0.8, abs=1e-6)
        assert c.centroid_mm == pytest.approx((1.5, 1.5, 0.0))

    def test_min_voxels_filter(self):
        vals = np.zeros((2, 4, 4), np.float32)
        vals[0, 1, 1:3] = 0.9
        vals[0, 2, 1:3] = 0.9
        p = prob(vals, spacing=(1.0, 1.0, 2.5))
        assert extract_candidates(p, min_voxels=5) == []
        assert len(extract_candidates(p, min_voxels=4)) == 1

    def test_ids_deterministic_order(self, rng):
        p = prob(rng.random((8, 8, 8)))
        cands = extract_candidates(p, tau=0.6, min_voxels=1)
        assert [c.id for c in cands] == list(range(1, len(cands) + 1))
        firsts = [c.voxel_indices.min() for c in cands]
        assert firsts == sorted(firsts)

    def test_exclusion_of_tumor_interior(self):
        vals = np.full((1, 1, 4), 0.9, np.float32)
        p = prob(vals)
        dvals = np.array([[[-1.0, -0.5, 1.0, 2.0]]], np.float32)
        dmap = SignedDistanceMap(
            VoxelGrid(dvals, (1, 1, 1), kind="distance-mm"), 1
        )
        cands = extract_candidates(p, min_voxels=1, exclude_interior_of=dmap)
        assert len(cands) == 1
        assert cands[0].voxel_indices.tolist() == [2, 3]

    def test_volume_sum_equals_foreground(self, rng):
        p = prob(rng.random((6, 6, 6)), spacing=(1.0, 1.0, 2.5))
        cands = extract_candidates(p, tau=0.5, min_voxels=1)
        total = sum(c.volume_mm3 for c in cands)
        fg = (p.values >= 0.5).sum()
        assert total == pytest.approx(fg * 2.5)

    def test_radius_increases_with_volume(self):
        vols = [1.0, 5.0, 20.0, 100.0]
        radii = [equivalent_radius_mm(v) for v in vols]
        assert radii == sorted(radii)
        assert all(b > a for a, b in zip(radii, radii[1:]))


class TestGtInstances:
    def test_two_disjoint_spheres(self):
        bits = np.zeros((3, 8, 8), bool)
        bits[1, 1:3, 1:3] = True
        bits[1, 5:7, 5:7] = True
        gts = gt_instances(BinaryMask(bits, (1, 1, 1)))
        assert len(gts) == 2
        assert gts[0].id == 1 and gts[1].id == 2

    def test_empty_mask_empty_list(self):
        assert gt_instances(BinaryMask(np.zeros((2, 2, 2), bool), (1, 1, 1))) == []


class TestRasterizeSphere:
    def test_count_close_to_analytic_volume(self):
        g = prob(np.zeros((40, 40, 40), np.float32))
        lin = rasterize_sphere((20.0, 20.0, 20.0), 8.0, g)
        vol = lin.size * 1.0
        analytic = 4 / 3 * np.pi * 8.0**3
        assert abs(vol - analytic) / analytic < 0.05

    def test_clipped_at_volume_edge(self):
        g = prob(np.zeros((4, 4, 4), np.float32))
        lin = rasterize_sphere((0.0, 0.0, 0.0), 2.0, g)
        assert lin.size > 0
        assert lin.min() >= 0


class TestCsv:
    def test_candidate_round_trip(self, tmp_path):
        cands = [
            InstanceCandidate(1, None, (1.0, 2.0, 3.0), 10.0, 1.3365, 0.75, None),
            InstanceCandidate(2, None, (-4.5, 0.25, 8.0), 24.0, 1.79, 0.5, True),
        ]
        path = tmp_path / "c.csv"
        write_candidates_csv(path, {"pA": cands})
        back = read_candidates_csv(path)
        assert list(back) == ["pA"]
        for orig, got in zip(cands, back["pA"]):
            assert got.id == orig.id
            assert got.centroid_mm == orig.centroid_mm
            assert got.volume_mm3 == orig.volume_mm3
            assert got.radius_mm == orig.radius_mm
            assert got.score == orig.score
            assert got.label == orig.label

    def test_lf_line_endings_and_header(self, tmp_path):
        path = tmp_path / "c.csv"
        write_candidates_csv(
            path, {"p": [InstanceCandidate(1, None, (0, 0, 0), 1.0, 0.62, 0.5, False)]}
        )
        raw = path.read_bytes()
        assert b"\r" not in raw
        assert raw.startswith(
            b"patient_id,candidate_id,cx_mm,cy_mm,cz_mm,volume_mm3,radius_mm,score,label\n"
        )
        assert raw.endswith(b",0\n")

    def test_gt_round_trip(self, tmp_path):
        from lndetect.instances import GroundTruthInstance

        gts = [GroundTruthInstance(1, None, (5.0, 6.0, 7.0), 33.5, 2.0)]
        path = tmp_path / "g.csv"
        write_gt_csv(path, {"p0": gts})
        back = read_gt_csv(path)
        assert back["p0"][0].radius_mm == 2.0
        assert back["p0"][0].centroid_mm == (5.0, 6.0, 7.0)
