"""Full diagnosis: gating, calibration, structured reports, and cost.

Confident classifier calls are accepted as-is and the reasoning
provider only writes the report body. Boundary calls (|p - 0.5| below
the gate margin) are escalated: the provider's Abnormal/Normal token
likelihoods are normalized into a calibrated probability that can
override the classifier, including into the intermediate Warning class.
The bundled mock provider is deterministic and fully offline.
"""

import numpy as np

from battdiag import (
    CostParams,
    DiagnoseConfig,
    FleetSpec,
    MockProvider,
    TrainConfig,
    TreeShapExplainer,
    average_cost,
    diagnose_batch,
    featurize_segments,
    generate_fleet,
    load_knowledge_base,
    partition_by_vehicle,
    tally_outcomes,
    train,
)

spec = FleetSpec(seed=19)
dataset, injected = generate_fleet(spec)
rows = featurize_segments(dataset.segments)
split = partition_by_vehicle(dataset, 0.4, spec.seed)
train_rows = [r for r in rows if r.vehicle_id in split.train_vehicles]
val_rows = [r for r in rows if r.vehicle_id in split.validation_vehicles]

model = train([(r.features, r.label) for r in train_rows], TrainConfig(seed=spec.seed))
explainer = TreeShapExplainer(model, np.array([r.features.to_array() for r in train_rows]))
kb = load_knowledge_base()
provider = MockProvider(kb=kb)

reports = diagnose_batch(
    [r.features for r in val_rows], model, explainer, kb, provider, DiagnoseConfig()
)
labels = [r.label for r in val_rows]
escalated = [(row, rep) for row, rep in zip(val_rows, reports) if rep.provenance.escalated]
print(f"diagnosed {len(reports)} validation segments; gate escalated {len(escalated)}")

row, rep = escalated[0]
fault = injected[row.vehicle_id]
print(f"\none escalated case: {row.vehicle_id} segment {row.segment_index} "
      f"(injected: {fault.display_name if fault else 'none'})")
print(f"  classifier probability: {rep.provenance.gbdt_probability:.4f}")
print(f"  calibrated probability: {rep.calibrated_probability:.4f}")
print(f"  result:   {rep.result}")
print(f"  severity: {rep.severity}")
print(f"  cause:    {rep.cause}")
print(f"  advice:   {rep.advice}")

# the three-way tally and what the reasoning layer bought us
gbdt_results = ["Abnormal" if model.predict_proba(r.features) >= 0.5 else "Normal"
                for r in val_rows]
for name, results in (("classifier alone", gbdt_results), ("full pipeline", reports)):
    tally, q_tp, q_fp = tally_outcomes(results, labels, "WarningAsAbnormal")
    cost = average_cost(q_tp, q_fp, CostParams())
    errors = (tally.counts["Abnormal"]["Normal"]
              + tally.counts["Normal"]["Abnormal"] + tally.counts["Normal"]["Warning"])
    print(f"\n{name}:")
    print(f"  tally: {tally.to_dict()}")
    print(f"  q_tp = {q_tp:.3f}, q_fp = {q_fp:.3f}, "
          f"expected direct cost = {cost:.2f} CNY/vehicle, errors = {errors}")

# per-vehicle severity profile of one faulty vehicle across its segments
faulty_vids = sorted(v for v, f in injected.items()
                     if f is not None and v in split.validation_vehicles)
vid = faulty_vids[0]
vehicle_reports = [rep for row, rep in zip(val_rows, reports) if row.vehicle_id == vid]
print(f"\nseverity profile of {vid} ({injected[vid].display_name}) over "
      f"{len(vehicle_reports)} segments (mean of 0-5 ratings):")
for code in ("ISC", "TR", "CF", "CD", "TM", "BMS"):
    vals = [rep.severity[code] for rep in vehicle_reports]
    bar = "#" * int(round(2 * float(np.mean(vals))))
    print(f"  {code:4s} {np.mean(vals):4.2f}  {bar}")
