import numpy as np
import pytest

from battdiag.data_model import LABEL_ABNORMAL, LABEL_NORMAL
from battdiag.features import featurize_segments
from battdiag.knowledge import FaultType
from battdiag.synth import FleetSpec, generate_fleet


class TestFleetSpec:
    def test_fault_mix_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            FleetSpec(fault_mix={FaultType.ISC: 0.5, FaultType.TR: 0.2})

    def test_from_dict_with_fault_codes(self):
        spec = FleetSpec.from_dict(
            {"n_vehicles": 4, "abnormal_fraction": 0.5, "seed": 9,
             "fault_mix": {"ISC": 0.5, "TM": 0.5}}
        )
        assert spec.fault_mix == {FaultType.ISC: 0.5, FaultType.TM: 0.5}
        assert spec.seed == 9

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            FleetSpec(abnormal_fraction=1.5)


class TestGenerateFleet:
    def test_all_segments_pass_invariants(self):
        # segment construction validates every invariant; building the fleet
        # without raising is the check
        spec = FleetSpec(n_vehicles=8, abnormal_fraction=0.5, segments_per_vehicle=4, seed=11)
        ds, faults = generate_fleet(spec)
        assert len(ds.segments) == 8 * 4
        assert set(faults) == set(ds.vehicle_labels)

    def test_labels_are_vehicle_coarse(self):
        spec = FleetSpec(n_vehicles=6, abnormal_fraction=0.5, segments_per_vehicle=3, seed=2)
        ds, faults = generate_fleet(spec)
        for seg in ds.segments:
            expected = LABEL_ABNORMAL if faults[seg.vehicle_id] is not None else LABEL_NORMAL
            assert seg.label == expected

    def test_abnormal_fraction_respected(self):
        spec = FleetSpec(n_vehicles=20, abnormal_fraction=0.25, segments_per_vehicle=1, seed=3)
        _, faults = generate_fleet(spec)
        assert sum(1 for f in faults.values() if f is not None) == 5

    def test_healthy_fleet_feature_contract(self):
        spec = FleetSpec(n_vehicles=6, abnormal_fraction=0.0, segments_per_vehicle=5, seed=3)
        ds, _ = generate_fleet(spec)
        rows = featurize_segments(ds.segments)
        assert all(r.features.f_corr >= 0.99 for r in rows)
        assert all(r.features.f_cc >= 0.6 for r in rows)

    def test_isc_signature_direction(self):
        spec = FleetSpec(
            n_vehicles=10, abnormal_fraction=0.5, segments_per_vehicle=8,
            fault_mix={FaultType.ISC: 1.0}, seed=5,
        )
        ds, _ = generate_fleet(spec)
        rows = featurize_segments(ds.segments)
        faulty = [r.features for r in rows if r.label == LABEL_ABNORMAL]
        healthy = [r.features for r in rows if r.label == LABEL_NORMAL]
        assert len(faulty) >= 30 and len(healthy) >= 30
        assert np.mean([f.f_corr for f in faulty]) < np.mean([f.f_corr for f in healthy])
        assert np.mean([f.f_dT for f in faulty]) > np.mean([f.f_dT for f in healthy])

    def test_capacity_fade_signature_direction(self):
        spec = FleetSpec(
            n_vehicles=10, abnormal_fraction=0.5, segments_per_vehicle=6,
            fault_mix={FaultType.CF: 1.0}, seed=6,
        )
        ds, _ = generate_fleet(spec)
        rows = featurize_segments(ds.segments)
        faulty = [r.features for r in rows if r.label == LABEL_ABNORMAL]
        healthy = [r.features for r in rows if r.label == LABEL_NORMAL]
        assert np.mean([f.f_cc for f in faulty]) < np.mean([f.f_cc for f in healthy])
        assert np.mean([f.f_cyc for f in faulty]) > np.mean([f.f_cyc for f in healthy])

    def test_thermal_runaway_signature_direction(self):
        spec = FleetSpec(
            n_vehicles=10, abnormal_fraction=0.5, segments_per_vehicle=6,
            fault_mix={FaultType.TR: 1.0}, seed=7,
        )
        ds, _ = generate_fleet(spec)
        rows = featurize_segments(ds.segments)
        faulty = [r.features for r in rows if r.label == LABEL_ABNORMAL]
        healthy = [r.features for r in rows if r.label == LABEL_NORMAL]
        assert np.mean([f.f_Tend for f in faulty]) > np.mean([f.f_Tend for f in healthy])
        assert np.mean([f.f_soc for f in faulty]) > np.mean([f.f_soc for f in healthy])

    def test_same_seed_bit_identical(self):
        spec = FleetSpec(n_vehicles=6, abnormal_fraction=0.5, segments_per_vehicle=3, seed=13)
        a, faults_a = generate_fleet(spec)
        b, faults_b = generate_fleet(spec)
        assert faults_a == faults_b
        for sa, sb in zip(a.segments, b.segments):
            np.testing.assert_array_equal(sa.cell_voltages, sb.cell_voltages)
            np.testing.assert_array_equal(sa.temperatures, sb.temperatures)
            np.testing.assert_array_equal(sa.current, sb.current)
            np.testing.assert_array_equal(sa.soc, sb.soc)
            assert sa.cycle_count == sb.cycle_count

    def test_different_seeds_differ(self):
        a, _ = generate_fleet(FleetSpec(n_vehicles=2, segments_per_vehicle=1, seed=1))
        b, _ = generate_fleet(FleetSpec(n_vehicles=2, segments_per_vehicle=1, seed=2))
        assert not np.array_equal(a.segments[0].cell_voltages, b.segments[0].cell_voltages)
