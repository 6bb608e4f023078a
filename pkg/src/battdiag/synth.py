"""Synthetic EV fleet generator with per-fault charging signatures.

Healthy segments follow a canonical CC-CV profile: constant current with
the mean cell voltage ramping to its plateau, then an exponential
current tail at pinned voltage, with ohmic-heating temperature rise.
Each fault type perturbs exactly the channels that drive its strongly
correlated features: an internal short depresses and decorrelates one
cell and adds a hotspot, thermal-runaway precursors add a late heating
burst at high SOC, capacity fade shortens the CC phase on a high-cycle
pack, consistency degradation spreads and wobbles the cells, thermal
management faults sustain a probe gradient, and BMS faults distort
SOC/current/pack telemetry. Perturbation magnitude is drawn per
segment, so a slice of faulty segments sits near the decision boundary
on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_model import ChargingSegment, FleetDataset, LABEL_ABNORMAL, LABEL_NORMAL
from .knowledge import FaultType


def _uniform_mix() -> dict[FaultType, float]:
    return {fault: 1.0 / len(FaultType) for fault in FaultType}


@dataclass(frozen=True)
class FleetSpec:
    n_vehicles: int = 60
    abnormal_fraction: float = 0.3
    fault_mix: dict[FaultType, float] = field(default_factory=_uniform_mix)
    segments_per_vehicle: int = 16
    n_cells: int = 8
    n_probes: int = 4
    voltage_noise: float = 0.002
    temperature_noise: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.n_vehicles < 1 or self.segments_per_vehicle < 1:
            raise ValueError("n_vehicles and segments_per_vehicle must be >= 1")
        if not 0.0 <= self.abnormal_fraction <= 1.0:
            raise ValueError("abnormal_fraction must lie in [0, 1]")
        if self.n_cells < 1 or self.n_probes < 1:
            raise ValueError("n_cells and n_probes must be >= 1")
        if min(self.voltage_noise, self.temperature_noise) < 0:
            raise ValueError("noise levels must be non-negative")
        total = sum(self.fault_mix.values())
        if self.fault_mix and abs(total - 1.0) > 1e-9:
            raise ValueError(f"fault_mix must sum to 1, got {total}")

    @classmethod
    def from_dict(cls, doc: dict) -> "FleetSpec":
        doc = dict(doc)
        if "fault_mix" in doc:
            doc["fault_mix"] = {
                FaultType[name]: float(p) for name, p in doc["fault_mix"].items()
            }
        return cls(**doc)


def _vehicle_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, index)))


def _pick_fault(mix: dict[FaultType, float], u: float) -> FaultType:
    acc = 0.0
    for fault in FaultType:
        acc += mix.get(fault, 0.0)
        if u < acc:
            return fault
    return [f for f in FaultType if mix.get(f, 0.0) > 0][-1]


def generate_fleet(spec: FleetSpec) -> tuple[FleetDataset, dict[str, FaultType | None]]:
    """Generate a labeled fleet plus the injected per-vehicle fault truth.

    Deterministic per seed; vehicles draw from independent child streams
    so per-vehicle generation order cannot leak across vehicles.
    """
    assign_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(0,))
    )
    n_abnormal = int(round(spec.abnormal_fraction * spec.n_vehicles))
    abnormal_set = set(assign_rng.permutation(spec.n_vehicles)[:n_abnormal].tolist())
    faults: dict[str, FaultType | None] = {}
    labels: dict[str, str] = {}
    segments: list[ChargingSegment] = []

    for i in range(spec.n_vehicles):
        vid = f"v{i:03d}"
        fault = _pick_fault(spec.fault_mix, float(assign_rng.random())) if i in abnormal_set else None
        faults[vid] = fault
        labels[vid] = LABEL_ABNORMAL if fault is not None else LABEL_NORMAL
        rng = _vehicle_rng(spec.seed, i)
        segments.extend(_generate_vehicle(spec, vid, fault, rng))

    return FleetDataset(tuple(segments), labels), faults


def _generate_vehicle(spec: FleetSpec, vid: str, fault: FaultType | None,
                      rng: np.random.Generator) -> list[ChargingSegment]:
    label = LABEL_ABNORMAL if fault is not None else LABEL_NORMAL
    cell_offsets = rng.normal(0.0, 0.003, spec.n_cells)
    probe_offsets = rng.normal(0.0, 0.2, spec.n_probes)
    ambient = rng.uniform(18.0, 28.0)
    if fault is FaultType.CF:
        base_cycles = int(rng.integers(800, 1600))
    elif fault is FaultType.CD:
        base_cycles = int(rng.integers(500, 1200))
    else:
        base_cycles = int(rng.integers(50, 400))

    out = []
    for s in range(spec.segments_per_vehicle):
        out.append(
            _generate_segment(spec, vid, s, fault, label,
                              cell_offsets, probe_offsets, ambient,
                              base_cycles + s, rng)
        )
    return out


def _generate_segment(spec, vid, seg_idx, fault, label, cell_offsets,
                      probe_offsets, ambient, cycle_count, rng) -> ChargingSegment:
    n = int(rng.integers(280, 380))
    t = 10.0 * np.arange(n)
    u = np.arange(n) / (n - 1)

    cc_frac = rng.uniform(0.72, 0.84)
    i0 = rng.uniform(45.0, 55.0)
    v_start = rng.uniform(3.48, 3.58)
    v_plateau = 4.18 + rng.uniform(-0.005, 0.005)
    soc0 = rng.uniform(8.0, 25.0)
    soc_end = rng.uniform(86.0, 97.0)
    rise = rng.uniform(2.5, 5.0)
    # most faulty segments carry a clear signature; a small slice is kept
    # deliberately mild so it lands near the decision boundary
    sev = 0.0
    stress_kind = -1
    if fault is not None:
        mild = rng.random() < 0.12
        sev = rng.uniform(0.05, 0.30) if mild else rng.uniform(0.45, 1.0)
    else:
        # benign single-channel stress events (sensor drift, hot spot on one
        # probe, estimator bias) that mimic a mild fault on one feature only
        if rng.random() < 0.05:
            stress_kind = int(rng.integers(4))
    stress_amp = rng.uniform(0.3, 1.0) if stress_kind >= 0 else 0.0
    if stress_kind == 1:
        soc_end = rng.uniform(97.0, 99.8)

    if fault is FaultType.CF:
        cc_frac -= sev * 0.22
        soc_end = rng.uniform(90.0, 99.0)
        v_start -= sev * 0.03
    elif fault is FaultType.TR:
        soc_end = rng.uniform(96.0, 99.5)
    elif fault is FaultType.BMS:
        soc_end = rng.uniform(98.5, 100.0)
        cc_frac -= sev * 0.12

    k_cv = min(n, int(round(cc_frac * n)))

    # current: CC plateau then exponential CV tail
    current = np.full(n, i0)
    if k_cv < n:
        tail = np.arange(n - k_cv) / max(1, n - k_cv - 1)
        current[k_cv:] = i0 * np.exp(-3.0 * tail)
    if fault is FaultType.BMS:
        current = current + sev * 2.5 * np.sin(2.0 * np.pi * 6.0 * u)
    current = current + rng.normal(0.0, 0.15, n)

    # SOC follows the delivered charge, plus small estimator jitter
    charge = np.cumsum(np.clip(current, 0.0, None))
    soc = soc0 + (soc_end - soc0) * charge / charge[-1]
    soc = np.clip(soc + rng.normal(0.0, 0.05, n), 0.0, 100.0)

    # mean cell voltage: concave ramp to the plateau, then pinned
    v_mean = np.full(n, v_plateau)
    if k_cv > 0:
        ramp = np.minimum(1.0, np.arange(n) / max(1, k_cv))
        v_mean = v_start + (v_plateau - v_start) * ramp ** 0.85
        v_mean[k_cv:] = v_plateau
    if fault is FaultType.BMS:
        v_mean = v_mean + sev * 0.012 * np.sin(2.0 * np.pi * 2.0 * u)

    cells = v_mean[None, :] + cell_offsets[:, None]
    if fault is FaultType.CD:
        cells = v_mean[None, :] + (1.0 + 4.0 * sev) * cell_offsets[:, None]
        phases = rng.uniform(0.0, 2.0 * np.pi, spec.n_cells)
        gains = rng.uniform(0.5, 1.0, spec.n_cells)
        cells = cells + sev * 0.010 * gains[:, None] * np.sin(
            2.0 * np.pi * 1.5 * u[None, :] + phases[:, None]
        )
    elif fault is FaultType.CF:
        cells = v_mean[None, :] + (1.0 + 0.8 * sev) * cell_offsets[:, None]
        wobble_cell = int(rng.integers(spec.n_cells))
        cells[wobble_cell] += sev * 0.004 * np.sin(2.0 * np.pi * 2.0 * u)
    elif fault is FaultType.ISC:
        victim = int(rng.integers(spec.n_cells))
        drift = sev * (0.020 + 0.035 * u ** 1.5)
        wobble = sev * 0.025 * np.sin(2.0 * np.pi * 4.0 * u + rng.uniform(0, 2 * np.pi))
        cells[victim] = cells[victim] - drift - wobble

    cells = cells + rng.normal(0.0, spec.voltage_noise, (spec.n_cells, n))
    pack = cells.sum(axis=0) + rng.normal(0.0, 0.01, n)
    if fault is FaultType.BMS:
        pack = pack - sev * 0.008 * spec.n_cells

    # ohmic heating: temperature rise tracks delivered I^2
    heat = np.cumsum(current.clip(0.0) ** 2)
    t_mean = ambient + rise * heat / heat[-1]
    temps = t_mean[None, :] + probe_offsets[:, None]
    if fault is FaultType.ISC:
        hot = int(rng.integers(spec.n_probes))
        temps[hot] += sev * (1.2 + 2.2 * u ** 2)
    elif fault is FaultType.TR:
        burst = np.clip((np.arange(n) - (n - 24)) / 16.0, 0.0, 1.0)
        temps += sev * 5.0 * burst[None, :]
        hot = int(rng.integers(spec.n_probes))
        temps[hot] += sev * 2.0 * burst
    elif fault is FaultType.TM:
        hot = int(rng.integers(spec.n_probes))
        temps[hot] += sev * (1.5 + 3.0 * u ** 1.2)
        temps += sev * 2.0 * u[None, :]
    if stress_kind == 0:
        # transient hot spot: raises the probe spread mid-charge but decays
        # before completion, so the terminal temperature stays clean
        bumped = int(rng.integers(spec.n_probes))
        temps[bumped] += stress_amp * 1.2 * np.exp(-(((u - 0.45) / 0.18) ** 2))
    elif stress_kind == 2:
        pack = pack - stress_amp * 0.004 * spec.n_cells
    elif stress_kind == 3:
        cooled = int(rng.integers(spec.n_probes))
        temps[cooled] -= stress_amp * (0.4 + 0.8 * u)
    temps = temps + rng.normal(0.0, spec.temperature_noise, (spec.n_probes, n))

    return ChargingSegment(
        vehicle_id=vid,
        segment_index=seg_idx,
        timestamps=t,
        pack_voltage=pack,
        current=current,
        soc=soc,
        cell_voltages=cells,
        temperatures=temps,
        cycle_count=cycle_count,
        label=label,
    )
