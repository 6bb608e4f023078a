"""Phase detection and the ten mechanism-driven features.

Each charging segment collapses to ten numbers with physical meaning:
usage history (cycles, CC-phase share, max SOC), voltage consistency
(pack-to-cell ratio, inter-cell correlation, initial minimum, slope)
and thermal behaviour (probe spread, peak heating rate, terminal
temperature). Healthy and faulty segments separate visibly already at
this level.
"""

import numpy as np

from battdiag import (
    FEATURE_NAMES,
    FaultType,
    FleetSpec,
    detect_phase_boundary,
    extract_features,
    featurize_segments,
    generate_fleet,
)

spec = FleetSpec(
    n_vehicles=10, abnormal_fraction=0.5, segments_per_vehicle=6,
    fault_mix={FaultType.ISC: 1.0}, seed=7,
)
dataset, injected = generate_fleet(spec)

seg = dataset.segments[0]
boundary = detect_phase_boundary(seg)
print(f"phase boundary of {seg.vehicle_id} segment {seg.segment_index}:")
print(f"  CV starts at sample {boundary.cv_start_index} of {seg.n_samples}")
print(f"  t_cc = {boundary.t_cc:.0f} s, t_cv = {boundary.t_cv:.0f} s "
      f"-> CC share {boundary.t_cc / (boundary.t_cc + boundary.t_cv):.3f}")

fv = extract_features(seg, boundary)
print("\nfeature vector:")
for name in FEATURE_NAMES:
    print(f"  {name:8s} = {getattr(fv, name):10.4f}")

rows = featurize_segments(dataset.segments)
healthy = np.array([r.features.to_array() for r in rows if r.label == "Normal"])
faulty = np.array([r.features.to_array() for r in rows if r.label == "Abnormal"])

print("\nmean feature by class (internal-short fleet):")
print(f"  {'feature':8s} {'healthy':>10s} {'faulty':>10s}")
for i, name in enumerate(FEATURE_NAMES):
    print(f"  {name:8s} {healthy[:, i].mean():10.4f} {faulty[:, i].mean():10.4f}")

print("\nnote how the short shows up exactly where the mechanism predicts:")
print("  lower f_corr / f_vr / f_v0 (one cell sagging out of step)")
print("  higher f_dT (localized hot spot around the shorted cell)")
