"""Mechanism-driven feature extraction from charging segments.

Each segment is reduced to ten physically interpretable quantities
covering usage history (cycle count, CC-phase ratio, max SOC), voltage
behaviour (pack-to-cell ratio, inter-cell correlation, initial minimum,
slope) and thermal behaviour (max probe spread, peak heating rate,
terminal temperature).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import ChargingSegment

FEATURE_NAMES = (
    "f_cyc",
    "f_cc",
    "f_soc",
    "f_vr",
    "f_corr",
    "f_v0",
    "f_beta",
    "f_dT",
    "f_dTdt",
    "f_Tend",
)
N_FEATURES = len(FEATURE_NAMES)

DEFAULT_VOLTAGE_EPS = 0.01   # V below the segment's peak cell voltage
DEFAULT_CURRENT_DROP = 0.05  # fractional decay off the CC plateau current

# below this variance a voltage trace is treated as flat (no divergence signal)
ZERO_VARIANCE_GUARD = 1e-12


@dataclass(frozen=True)
class PhaseBoundary:
    """CC/CV switch point of a segment.

    ``cv_start_index`` is N_samples when the segment never enters CV.
    Durations treat each sample as owning the interval that starts at it,
    so t_cc + t_cv covers the segment plus one trailing sample interval.
    """

    cv_start_index: int
    t_cc: float
    t_cv: float


@dataclass(frozen=True)
class FeatureVector:
    """The ten mechanism-driven features of one charging segment."""

    f_cyc: float
    f_cc: float
    f_soc: float
    f_vr: float
    f_corr: float
    f_v0: float
    f_beta: float
    f_dT: float
    f_dTdt: float
    f_Tend: float

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        arr = self.to_array()
        if not np.all(np.isfinite(arr)):
            raise ValueError("all features must be finite")
        if not 0.0 <= self.f_cc <= 1.0:
            raise ValueError("f_cc must lie in [0, 1]")
        if not -1.0 <= self.f_corr <= 1.0:
            raise ValueError("f_corr must lie in [-1, 1]")
        if self.f_dT < 0.0:
            raise ValueError("f_dT must be non-negative")

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "FeatureVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} feature values, got shape {values.shape}")
        return cls(**{name: float(v) for name, v in zip(FEATURE_NAMES, values)})


def detect_phase_boundary(
    segment: ChargingSegment,
    voltage_eps: float = DEFAULT_VOLTAGE_EPS,
    current_drop: float = DEFAULT_CURRENT_DROP,
) -> PhaseBoundary:
    """Locate the CC-to-CV transition of a charging segment.

    The CV phase starts at the first sample where the max cell voltage has
    reached the segment's voltage plateau (within ``voltage_eps``) AND the
    current has decayed by at least ``current_drop`` relative to the CC
    plateau current (median current over the first quartile of samples).
    Voltage and current conditions are required jointly so noise on either
    channel alone cannot fake a transition; if they never hold the segment
    is all-CC.
    """
    t = segment.timestamps
    n = segment.n_samples
    vmax_per_sample = segment.cell_voltages.max(axis=0)
    v_pin = vmax_per_sample.max() - voltage_eps

    q = max(1, n // 4)
    plateau_current = float(np.median(segment.current[:q]))
    i_limit = (1.0 - current_drop) * plateau_current

    in_cv = (vmax_per_sample >= v_pin) & (segment.current <= i_limit)
    hits = np.flatnonzero(in_cv)
    cv_start = int(hits[0]) if hits.size else n

    dt_last = float(t[-1] - t[-2])
    end_time = float(t[-1]) + dt_last
    if cv_start >= n:
        return PhaseBoundary(n, end_time - float(t[0]), 0.0)
    t_cc = float(t[cv_start]) - float(t[0])
    return PhaseBoundary(cv_start, t_cc, end_time - float(t[cv_start]))


def _pearson_vs_mean(cell_voltages: np.ndarray) -> float:
    """Mean Pearson correlation of each cell trace against the cell-mean trace.

    Flat traces (variance below the guard) contribute 1.0: a cell that does
    not move carries no divergence signal.
    """
    mean_trace = cell_voltages.mean(axis=0)
    m_centered = mean_trace - mean_trace.mean()
    m_var = float(m_centered @ m_centered) / mean_trace.size
    terms = []
    for cell in cell_voltages:
        c_centered = cell - cell.mean()
        c_var = float(c_centered @ c_centered) / cell.size
        if c_var < ZERO_VARIANCE_GUARD or m_var < ZERO_VARIANCE_GUARD:
            terms.append(1.0)
            continue
        r = float(c_centered @ m_centered) / (
            np.sqrt(c_centered @ c_centered) * np.sqrt(m_centered @ m_centered)
        )
        terms.append(min(1.0, max(-1.0, r)))
    return float(np.mean(terms))


def _ols_slope(t: np.ndarray, v: np.ndarray) -> float:
    """Least-squares slope of v against t; 0 for a degenerate time span."""
    tc = t - t.mean()
    denom = float(tc @ tc)
    if denom < ZERO_VARIANCE_GUARD:
        return 0.0
    return float(tc @ (v - v.mean())) / denom


def extract_features(segment: ChargingSegment, boundary: PhaseBoundary) -> FeatureVector:
    """Map one segment (with its phase boundary) to the ten-feature vector."""
    t = segment.timestamps
    cells = segment.cell_voltages
    temps = segment.temperatures

    f_cyc = float(segment.cycle_count if segment.cycle_count is not None
                  else segment.segment_index)
    f_cc = boundary.t_cc / (boundary.t_cc + boundary.t_cv)
    f_soc = float(segment.soc.max())

    vmax_per_sample = cells.max(axis=0)
    f_vr = float(np.mean(segment.pack_voltage / (segment.n_cells * vmax_per_sample)))

    f_corr = _pearson_vs_mean(cells)
    f_v0 = float(cells[:, 0].min())
    f_beta = _ols_slope(t, cells.mean(axis=0))

    t_spread = temps.max(axis=0) - temps.min(axis=0)
    f_dT = float(t_spread.max())

    tmax = temps.max(axis=0)
    rates = np.diff(tmax) / np.diff(t) * 60.0  # degC per minute
    f_dTdt = float(rates.max())
    f_Tend = float(temps[:, -1].max())

    return FeatureVector(
        f_cyc=f_cyc, f_cc=f_cc, f_soc=f_soc, f_vr=f_vr, f_corr=f_corr,
        f_v0=f_v0, f_beta=f_beta, f_dT=f_dT, f_dTdt=f_dTdt, f_Tend=f_Tend,
    )


def featurize_segment(
    segment: ChargingSegment,
    voltage_eps: float = DEFAULT_VOLTAGE_EPS,
    current_drop: float = DEFAULT_CURRENT_DROP,
) -> FeatureVector:
    return extract_features(
        segment, detect_phase_boundary(segment, voltage_eps, current_drop)
    )


@dataclass(frozen=True)
class FeatureRow:
    """One featurized segment as written to / read from features.csv."""

    vehicle_id: str
    segment_index: int
    features: FeatureVector
    label: str | None


def featurize_segments(
    segments,
    voltage_eps: float = DEFAULT_VOLTAGE_EPS,
    current_drop: float = DEFAULT_CURRENT_DROP,
    jobs: int = 1,
) -> list[FeatureRow]:
    """Featurize segments in input order; extraction is pure per segment."""
    def one(seg: ChargingSegment) -> FeatureRow:
        return FeatureRow(
            seg.vehicle_id,
            seg.segment_index,
            featurize_segment(seg, voltage_eps, current_drop),
            seg.label,
        )

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, segments))
    return [one(seg) for seg in segments]


FEATURES_CSV_HEADER = ("vehicle_id", "segment_index", *FEATURE_NAMES, "label")


def write_features_csv(rows, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(FEATURES_CSV_HEADER)
        for row in rows:
            writer.writerow(
                [row.vehicle_id, row.segment_index]
                + [repr(float(v)) for v in row.features.to_array()]
                + [row.label if row.label is not None else ""]
            )


def read_features_csv(path) -> list[FeatureRow]:
    path = Path(path)
    out: list[FeatureRow] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != FEATURES_CSV_HEADER:
            raise ValueError(f"{path}: unexpected features.csv header {header}")
        for i, row in enumerate(reader):
            if len(row) != len(FEATURES_CSV_HEADER):
                raise ValueError(f"{path} row {i + 1}: wrong field count")
            fv = FeatureVector.from_array([float(x) for x in row[2:2 + N_FEATURES]])
            label = row[-1] or None
            out.append(FeatureRow(row[0], int(row[1]), fv, label))
    return out
