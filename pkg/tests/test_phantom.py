import numpy as np
import pytest

from lndetect.distance import signed_edt
from lndetect.evaluate import froc_curve, match_instances
from lndetect.instances import extract_candidates
from lndetect.phantom import (
    Ellipsoid,
    OracleSpec,
    PhantomSpec,
    SphereNode,
    cohort_spec,
    derive_patient_seed,
    generate_phantom,
    load_oracle_spec,
    load_phantom_spec,
    oracle_probmap,
    phantom_spec_from_dict,
    phantom_spec_to_dict,
)


def base_spec(**overrides):
    kwargs = dict(
        dims=(64, 64, 40),
        spacing_mm=(1.0, 1.0, 2.5),
        tumor=Ellipsoid((16.0, 16.0, 50.0), (6.0, 6.0, 8.0), 60.0),
        nodes=(
            SphereNode((44.0, 20.0, 30.0), 4.0, 30.0, 5.0),
            SphereNode((50.0, 44.0, 70.0), 5.0, 30.0, 5.0),
            SphereNode((20.0, 48.0, 20.0), 4.5, 30.0, 5.0),
        ),
        background_hu=0.0,
        noise_std_hu=10.0,
        noise_std_pet=0.1,
        seed=5,
    )
    kwargs.update(overrides)
    return PhantomSpec(**kwargs)


def pair_gt_to_nodes(gt, nodes):
    pairs = []
    for g in gt:
        node = min(nodes, key=lambda n: np.linalg.norm(np.subtract(n.center_mm, g.centroid_mm)))
        pairs.append((g, node))
    return pairs


class TestGeneratePhantom:
    def test_planted_nodes_recovered_with_radii(self):
        spec = base_spec()
        ph = generate_phantom(spec)
        assert len(ph.gt) == len(spec.nodes)
        half_voxel = max(spec.spacing_mm) / 2
        for g, node in pair_gt_to_nodes(ph.gt, spec.nodes):
            assert abs(g.radius_mm - node.radius_mm) <= half_voxel
            assert np.linalg.norm(np.subtract(g.centroid_mm, node.center_mm)) <= half_voxel

    def test_noise_free_volumes_piecewise_constant(self):
        ph = generate_phantom(base_spec(noise_std_hu=0.0, noise_std_pet=0.0))
        levels = set(np.unique(ph.ct.values).tolist())
        assert levels <= {0.0, 30.0, 60.0}
        assert set(np.unique(ph.pet.values).tolist()) <= {0.0, 5.0}

    def test_same_seed_byte_identical(self):
        a = generate_phantom(base_spec())
        b = generate_phantom(base_spec())
        assert a.ct.values.tobytes() == b.ct.values.tobytes()
        assert a.pet.values.tobytes() == b.pet.values.tobytes()
        assert a.ln.bits.tobytes() == b.ln.bits.tobytes()

    def test_different_seed_differs(self):
        a = generate_phantom(base_spec(seed=5))
        b = generate_phantom(base_spec(seed=6))
        assert a.ct.values.tobytes() != b.ct.values.tobytes()

    def test_masks_invariant_to_noise(self):
        quiet = generate_phantom(base_spec(noise_std_hu=0.0, noise_std_pet=0.0))
        loud = generate_phantom(base_spec(noise_std_hu=80.0, noise_std_pet=3.0))
        np.testing.assert_array_equal(quiet.tumor.bits, loud.tumor.bits)
        np.testing.assert_array_equal(quiet.ln.bits, loud.ln.bits)

    def test_overlapping_nodes_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            base_spec(
                nodes=(
                    SphereNode((30.0, 30.0, 30.0), 5.0, 30.0, 5.0),
                    SphereNode((33.0, 30.0, 30.0), 5.0, 30.0, 5.0),
                )
            )

    def test_node_outside_volume_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            base_spec(nodes=(SphereNode((500.0, 30.0, 30.0), 5.0, 30.0, 5.0),))

    def test_planted_distance_agrees_with_edt(self):
        # node center 100 mm past the tumor surface along x
        spec = PhantomSpec(
            dims=(128, 64, 48),
            spacing_mm=(1.0, 1.0, 2.5),
            tumor=Ellipsoid((14.0, 32.0, 60.0), (6.0, 6.0, 6.0), 60.0),
            nodes=(SphereNode((120.0, 32.0, 60.0), 4.0, 30.0, 5.0),),
            seed=1,
        )
        ph = generate_phantom(spec)
        dmap = signed_edt(ph.tumor)
        cz, cy, cx = 24, 32, 120  # node center voxel (z=60mm / 2.5)
        voxel_diag = float(np.linalg.norm(spec.spacing_mm))
        assert abs(dmap.values[cz, cy, cx] - 100.0) <= voxel_diag

    def test_spec_dict_round_trip(self):
        spec = base_spec()
        again = phantom_spec_from_dict(phantom_spec_to_dict(spec))
        assert again == spec

    def test_spec_json_files(self, tmp_path):
        import json

        spec = base_spec()
        p = tmp_path / "spec.json"
        p.write_text(json.dumps(phantom_spec_to_dict(spec)))
        assert load_phantom_spec(p) == spec
        o = tmp_path / "oracle.json"
        o.write_text(json.dumps({"p_detect": 0.8, "fp_rate_lambda": 3.0, "seed": 2}))
        assert load_oracle_spec(o).p_detect == 0.8

    def test_unknown_spec_keys_rejected(self):
        d = phantom_spec_to_dict(base_spec())
        d["wobble"] = 1
        with pytest.raises(ValueError, match="unknown"):
            phantom_spec_from_dict(d)


class TestOracle:
    def test_perfect_oracle_recovers_exactly_the_nodes(self):
        spec = base_spec()
        ph = generate_phantom(spec)
        prob = oracle_probmap(ph, OracleSpec(p_detect=1.0, fp_rate_lambda=0.0, seed=3))
        dmap = signed_edt(ph.tumor)
        cands = extract_candidates(prob, exclude_interior_of=dmap)
        assert len(cands) == len(spec.nodes)
        res = match_instances(cands, list(ph.gt))
        assert len(res.pairs) == len(spec.nodes)
        assert res.unmatched_candidates == ()
        curve = froc_curve([(cands, list(ph.gt))], budgets=(0.0,))
        assert curve.recall_at_budget[0.0] == 1.0

    def test_blind_oracle_empty_map(self):
        ph = generate_phantom(base_spec())
        prob = oracle_probmap(ph, OracleSpec(p_detect=0.0, fp_rate_lambda=0.0, seed=3))
        assert (prob.values == 0).all()

    def test_oracle_deterministic_under_seed(self):
        ph = generate_phantom(base_spec())
        spec = OracleSpec(p_detect=0.7, fp_rate_lambda=2.0, seed=11)
        a = oracle_probmap(ph, spec)
        b = oracle_probmap(ph, spec)
        assert a.values.tobytes() == b.values.tobytes()
        c = oracle_probmap(ph, spec, seed=12)
        assert a.values.tobytes() != c.values.tobytes()

    def test_fp_blobs_do_not_touch_nodes(self):
        spec = base_spec()
        ph = generate_phantom(spec)
        prob = oracle_probmap(
            ph, OracleSpec(p_detect=0.0, fp_rate_lambda=4.0, seed=9)
        )
        # with no detections painted, all foreground is spurious and must
        # stay clear of every ground-truth node
        fg = prob.values >= 0.5
        assert fg.any()
        assert not (fg & ph.ln.bits).any()

    def test_detection_rate_statistics(self):
        spec = base_spec()
        ph = generate_phantom(spec)
        hits = 0
        trials = 120
        for s in range(trials):
            prob = oracle_probmap(ph, OracleSpec(p_detect=0.7, fp_rate_lambda=0.0, seed=1000 + s))
            cands = extract_candidates(prob)
            hits += len(cands)
        rate = hits / (trials * len(spec.nodes))
        assert 0.63 <= rate <= 0.77  # ~3 sigma around 0.7 for 360 events

    def test_detection_events_independent_across_nodes(self):
        spec = base_spec()
        ph = generate_phantom(spec)
        events = []
        for s in range(300):
            prob = oracle_probmap(ph, OracleSpec(p_detect=0.5, fp_rate_lambda=0.0, seed=s))
            fg = prob.values >= 0.5
            events.append(
                [bool((fg & (ph.ln.bits & _near(ph, n))).any()) for n in spec.nodes]
            )
        ev = np.array(events, dtype=float)
        for i in range(ev.shape[1]):
            for j in range(i + 1, ev.shape[1]):
                corr = np.corrcoef(ev[:, i], ev[:, j])[0, 1]
                assert abs(corr) < 0.2

    def test_poisson_fp_count_statistics(self):
        spec = base_spec()
        ph = generate_phantom(spec)
        total = 0
        trials = 100
        for s in range(trials):
            prob = oracle_probmap(ph, OracleSpec(p_detect=0.0, fp_rate_lambda=3.0, seed=2000 + s))
            total += len(extract_candidates(prob))
        mean = total / trials
        assert 2.5 <= mean <= 3.5  # ~3 sigma band for Poisson(3), n=100

    def test_level_clamp_keeps_blobs_above_tau(self):
        ph = generate_phantom(base_spec())
        prob = oracle_probmap(
            ph, OracleSpec(p_detect=1.0, fp_rate_lambda=0.0, score_noise_std=5.0, seed=4)
        )
        cands = extract_candidates(prob)
        assert len(cands) == len(ph.gt)

    def test_invalid_oracle_specs(self):
        with pytest.raises(ValueError, match="p_detect"):
            OracleSpec(p_detect=1.5, fp_rate_lambda=0.0)
        with pytest.raises(ValueError, match="fp_rate_lambda"):
            OracleSpec(p_detect=0.5, fp_rate_lambda=-1.0)
        with pytest.raises(ValueError, match="radius"):
            OracleSpec(p_detect=0.5, fp_rate_lambda=1.0, fp_radius_mm=(4.0, 2.0))


def _near(ph, node):
    bits = np.zeros(ph.ln.bits.shape, bool)
    sx, sy, sz = ph.spec.spacing_mm
    cx, cy, cz = node.center_mm
    ix, iy, iz = int(cx / sx), int(cy / sy), int(cz / sz)
    r = int(node.radius_mm / min(sx, sy)) + 2
    bits[
        max(iz - r, 0) : iz + r, max(iy - r, 0) : iy + r, max(ix - r, 0) : ix + r
    ] = True
    return bits


class TestSeedDerivation:
    def test_deterministic_and_distinct(self):
        a = derive_patient_seed(7, 3, 1)
        assert a == derive_patient_seed(7, 3, 1)
        assert a != derive_patient_seed(7, 4, 1)
        assert a != derive_patient_seed(7, 3, 2)
        assert a != derive_patient_seed(8, 3, 1)

    def test_cohort_spec_varies_seed_only(self):
        template = base_spec()
        s0 = cohort_spec(template, 1, 0)
        s1 = cohort_spec(template, 1, 1)
        assert s0.seed != s1.seed
        assert s0.nodes == template.nodes
