"""Generate a synthetic EV fleet and look at what a charging segment holds.

The generator builds CC-CV charging segments per vehicle: a constant
current plateau while the mean cell voltage ramps up, then an
exponential current tail at pinned voltage. Abnormal vehicles get one
of six fault signatures injected into exactly the channels that fault
physically disturbs.
"""

from battdiag import FleetSpec, FaultType, generate_fleet, write_fleet

spec = FleetSpec(
    n_vehicles=12,
    abnormal_fraction=0.5,
    segments_per_vehicle=3,
    n_cells=6,
    n_probes=4,
    seed=42,
)
dataset, injected = generate_fleet(spec)

print(f"fleet: {len(dataset.vehicle_labels)} vehicles, {len(dataset.segments)} segments")
print("\ninjected fault per vehicle:")
for vid in sorted(injected):
    fault = injected[vid]
    print(f"  {vid}: {fault.display_name if fault else 'healthy'}")

seg = dataset.segments[0]
print(f"\nfirst segment of {seg.vehicle_id} (label {seg.label}):")
print(f"  samples:        {seg.n_samples} at ~10 s spacing")
print(f"  duration:       {seg.timestamps[-1] - seg.timestamps[0]:.0f} s")
print(f"  pack voltage:   {seg.pack_voltage.min():.1f} .. {seg.pack_voltage.max():.1f} V")
print(f"  current:        {seg.current.min():.1f} .. {seg.current.max():.1f} A")
print(f"  soc:            {seg.soc[0]:.1f} -> {seg.soc[-1]:.1f} %")
print(f"  cells:          {seg.n_cells} x {seg.n_samples} in "
      f"[{seg.cell_voltages.min():.3f}, {seg.cell_voltages.max():.3f}] V")
print(f"  probes:         {seg.n_probes} x {seg.n_samples} in "
      f"[{seg.temperatures.min():.1f}, {seg.temperatures.max():.1f}] C")
print(f"  cycle count:    {seg.cycle_count}")

# an ISC vehicle, if one was drawn, shows a depressed victim cell
isc = [vid for vid, f in injected.items() if f is FaultType.ISC]
if isc:
    seg = dataset.segments_for(isc[:1])[0]
    spread = seg.cell_voltages.max(axis=0) - seg.cell_voltages.min(axis=0)
    print(f"\n{isc[0]} carries an internal short: "
          f"cell spread grows to {spread.max() * 1000:.0f} mV "
          f"(healthy packs stay near {6 * 2:.0f} mV)")

out = write_fleet(dataset.segments, dataset.vehicle_labels, "demo_fleet")
print(f"\nwrote the fleet as segment CSVs + manifest: {out}")
