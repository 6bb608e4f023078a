"""Charging segments, fleets, file ingestion, and vehicle-level data splits.

A charging segment is one charge cycle of one vehicle: pack-level and
cell-level voltage, current, temperature and SOC channels sampled on a
common (nominally 10 s) time base. Fleets are flat collections of
segments with a per-vehicle Normal/Abnormal label map. Partitioning is
always at the vehicle level so no vehicle contributes segments to both
sides of a split.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LABEL_NORMAL = "Normal"
LABEL_ABNORMAL = "Abnormal"
VALID_LABELS = (LABEL_NORMAL, LABEL_ABNORMAL)

MIN_SAMPLES = 8
SOC_MONOTONIC_TOLERANCE = 0.5  # percent points of BMS estimator jitter


class ValidationError(ValueError):
    """An input violated a domain invariant; the message names it."""


def _as_readonly(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ChargingSegment:
    """One charging cycle's multichannel time series plus vehicle metadata.

    Channels are sample-aligned: ``timestamps``, ``pack_voltage``,
    ``current`` and ``soc`` have shape (N,); ``cell_voltages`` is
    (n_cells, N) and ``temperatures`` is (n_probes, N).
    """

    vehicle_id: str
    segment_index: int
    timestamps: np.ndarray
    pack_voltage: np.ndarray
    current: np.ndarray
    soc: np.ndarray
    cell_voltages: np.ndarray
    temperatures: np.ndarray
    cycle_count: int | None = None
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "timestamps", _as_readonly(self.timestamps))
        object.__setattr__(self, "pack_voltage", _as_readonly(self.pack_voltage))
        object.__setattr__(self, "current", _as_readonly(self.current))
        object.__setattr__(self, "soc", _as_readonly(self.soc))
        object.__setattr__(self, "cell_voltages", _as_readonly(self.cell_voltages))
        object.__setattr__(self, "temperatures", _as_readonly(self.temperatures))
        self.validate()

    @property
    def n_samples(self) -> int:
        return self.timestamps.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cell_voltages.shape[0]

    @property
    def n_probes(self) -> int:
        return self.temperatures.shape[0]

    def validate(self) -> None:
        n = self.n_samples
        if self.segment_index < 0:
            raise ValidationError("segment_index must be non-negative")
        if n < MIN_SAMPLES:
            raise ValidationError(
                f"N_samples >= {MIN_SAMPLES} required, got {n}"
            )
        if self.cell_voltages.ndim != 2 or self.temperatures.ndim != 2:
            raise ValidationError("cell_voltages and temperatures must be 2-D")
        if self.n_cells < 1:
            raise ValidationError("n_cells >= 1 required")
        if self.n_probes < 1:
            raise ValidationError("n_probes >= 1 required")
        for name, ch in (
            ("pack_voltage", self.pack_voltage),
            ("current", self.current),
            ("soc", self.soc),
        ):
            if ch.shape != (n,):
                raise ValidationError(f"channel lengths must equal N_samples ({name})")
        if self.cell_voltages.shape[1] != n or self.temperatures.shape[1] != n:
            raise ValidationError("channel lengths must equal N_samples (matrix channels)")
        for name, ch in (
            ("timestamps", self.timestamps),
            ("pack_voltage", self.pack_voltage),
            ("current", self.current),
            ("soc", self.soc),
            ("cell_voltages", self.cell_voltages),
            ("temperatures", self.temperatures),
        ):
            if not np.all(np.isfinite(ch)):
                raise ValidationError(f"non-finite value in {name}")
        if not np.all(np.diff(self.timestamps) > 0):
            raise ValidationError("timestamps strictly increasing")
        if np.any(self.cell_voltages <= 0.0) or np.any(self.cell_voltages >= 6.0):
            raise ValidationError("cell voltages in (0, 6) V")
        if np.any(self.temperatures <= -40.0) or np.any(self.temperatures >= 150.0):
            raise ValidationError("temperatures in (-40, 150) C")
        if np.any(self.soc < 0.0) or np.any(self.soc > 100.0):
            raise ValidationError("soc in [0, 100]")
        if np.any(np.diff(self.soc) < -SOC_MONOTONIC_TOLERANCE):
            raise ValidationError(
                f"soc monotonic non-decreasing within tolerance {SOC_MONOTONIC_TOLERANCE}"
            )
        if self.label is not None and self.label not in VALID_LABELS:
            raise ValidationError(f"label must be one of {VALID_LABELS}")


@dataclass(frozen=True)
class FleetDataset:
    """Segments plus the per-vehicle label map they were collected under."""

    segments: tuple[ChargingSegment, ...]
    vehicle_labels: dict[str, str]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        for seg in self.segments:
            lbl = self.vehicle_labels.get(seg.vehicle_id)
            if lbl is None:
                raise ValidationError(
                    f"segment vehicle {seg.vehicle_id!r} missing from vehicle_labels"
                )
            if seg.label is not None and seg.label != lbl:
                raise ValidationError(
                    f"segment label {seg.label!r} disagrees with vehicle label {lbl!r}"
                    f" for vehicle {seg.vehicle_id!r}"
                )
        for vid, lbl in self.vehicle_labels.items():
            if lbl not in VALID_LABELS:
                raise ValidationError(f"vehicle {vid!r} label must be one of {VALID_LABELS}")

    @property
    def vehicle_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.vehicle_labels))

    def segments_for(self, vehicle_ids) -> tuple[ChargingSegment, ...]:
        wanted = set(vehicle_ids)
        return tuple(s for s in self.segments if s.vehicle_id in wanted)


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/validation vehicle sets covering the whole fleet."""

    train_vehicles: frozenset[str]
    validation_vehicles: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "train_vehicles", frozenset(self.train_vehicles))
        object.__setattr__(self, "validation_vehicles", frozenset(self.validation_vehicles))
        if self.train_vehicles & self.validation_vehicles:
            raise ValidationError("train and validation vehicle sets must be disjoint")


def partition_by_vehicle(
    dataset: FleetDataset, validation_fraction: float, seed: int
) -> SplitAssignment:
    """Stratified vehicle-level split; every vehicle lands in exactly one side.

    Vehicles are sampled per label class so the rare Abnormal class is
    represented proportionally. Deterministic for a fixed seed.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise ValidationError("validation_fraction must be in (0, 1)")
    labels = dataset.vehicle_labels
    if len(labels) < 2:
        raise ValidationError("dataset must contain at least 2 vehicles")
    classes = {lbl: sorted(v for v, l in labels.items() if l == lbl) for lbl in VALID_LABELS}
    if not classes[LABEL_NORMAL] or not classes[LABEL_ABNORMAL]:
        raise ValidationError("both label classes must be present")

    rng = np.random.default_rng(seed)
    validation: set[str] = set()
    for lbl in VALID_LABELS:
        vids = classes[lbl]
        n_val = int(round(validation_fraction * len(vids)))
        order = rng.permutation(len(vids))
        validation.update(vids[i] for i in order[:n_val])
    train = set(labels) - validation
    if not validation or not train:
        raise ValidationError(
            f"validation_fraction {validation_fraction} yields an empty split"
        )
    return SplitAssignment(frozenset(train), frozenset(validation))


# ---------------------------------------------------------------------------
# Segment CSV format:
#   header  t,pack_v,current,soc,cell_v_1..cell_v_n,temp_1..temp_m[,cycle_count]
#   one row per sample, UTF-8, plain decimal point
# Manifest: JSON object {vehicle_id: {"label": "Normal"|"Abnormal", "files": [...]}}
# ---------------------------------------------------------------------------

FIXED_COLUMNS = ("t", "pack_v", "current", "soc")
CYCLE_COUNT_COLUMN = "cycle_count"


@dataclass(frozen=True)
class CsvSchema:
    """Column-name conventions of the segment CSV format."""

    cell_prefix: str = "cell_v_"
    temp_prefix: str = "temp_"
    fixed: tuple[str, ...] = FIXED_COLUMNS


DEFAULT_SCHEMA = CsvSchema()


def _parse_header(header: list[str], schema: CsvSchema, path: Path):
    stripped = [h.strip() for h in header]
    if tuple(stripped[: len(schema.fixed)]) != schema.fixed:
        raise ValidationError(
            f"{path}: header must start with {','.join(schema.fixed)}"
        )
    rest = stripped[len(schema.fixed):]
    has_cycle = bool(rest) and rest[-1] == CYCLE_COUNT_COLUMN
    if has_cycle:
        rest = rest[:-1]
    n_cells = sum(1 for h in rest if h.startswith(schema.cell_prefix))
    n_probes = sum(1 for h in rest if h.startswith(schema.temp_prefix))
    expected = (
        [f"{schema.cell_prefix}{i}" for i in range(1, n_cells + 1)]
        + [f"{schema.temp_prefix}{i}" for i in range(1, n_probes + 1)]
    )
    if rest != expected or n_cells < 1 or n_probes < 1:
        raise ValidationError(
            f"{path}: expected contiguous {schema.cell_prefix}1..n then "
            f"{schema.temp_prefix}1..m columns, got {rest}"
        )
    return n_cells, n_probes, has_cycle


def read_segment_csv(
    path,
    vehicle_id: str,
    segment_index: int,
    label: str | None = None,
    schema: CsvSchema = DEFAULT_SCHEMA,
) -> ChargingSegment:
    """Parse one segment file; raises ValidationError naming file and row."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        n_cells, n_probes, has_cycle = _parse_header(header, schema, path)
        width = len(schema.fixed) + n_cells + n_probes + (1 if has_cycle else 0)
        rows = []
        for i, row in enumerate(reader):
            if len(row) != width:
                raise ValidationError(
                    f"{path} row {i + 1}: expected {width} fields, got {len(row)}"
                )
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise ValidationError(f"{path} row {i + 1}: {exc}") from None
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    nf = len(schema.fixed)
    cycle_count = int(data[0, -1]) if has_cycle else None
    try:
        return ChargingSegment(
            vehicle_id=vehicle_id,
            segment_index=segment_index,
            timestamps=data[:, 0],
            pack_voltage=data[:, 1],
            current=data[:, 2],
            soc=data[:, 3],
            cell_voltages=data[:, nf:nf + n_cells].T,
            temperatures=data[:, nf + n_cells:nf + n_cells + n_probes].T,
            cycle_count=cycle_count,
            label=label,
        )
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def write_segment_csv(segment: ChargingSegment, path, schema: CsvSchema = DEFAULT_SCHEMA) -> None:
    """Write a segment in the standard CSV layout (round-trips exactly)."""
    path = Path(path)
    header = list(schema.fixed)
    header += [f"{schema.cell_prefix}{i}" for i in range(1, segment.n_cells + 1)]
    header += [f"{schema.temp_prefix}{i}" for i in range(1, segment.n_probes + 1)]
    if segment.cycle_count is not None:
        header.append(CYCLE_COUNT_COLUMN)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(segment.n_samples):
            row = [
                repr(float(segment.timestamps[k])),
                repr(float(segment.pack_voltage[k])),
                repr(float(segment.current[k])),
                repr(float(segment.soc[k])),
            ]
            row += [repr(float(v)) for v in segment.cell_voltages[:, k]]
            row += [repr(float(v)) for v in segment.temperatures[:, k]]
            if segment.cycle_count is not None:
                row.append(str(segment.cycle_count))
            writer.writerow(row)


def load_segments(path, schema: CsvSchema = DEFAULT_SCHEMA) -> FleetDataset:
    """Load a fleet from a manifest (or a directory containing manifest.json).

    Segment files are read in manifest order per vehicle; the position in a
    vehicle's file list is its segment_index. Vehicles are merged in sorted
    id order so the result is deterministic.
    """
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise ValidationError(f"manifest not found: {manifest_path}")
    with manifest_path.open(encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = manifest_path.parent

    segments: list[ChargingSegment] = []
    labels: dict[str, str] = {}
    for vid in sorted(manifest):
        entry = manifest[vid]
        label = entry.get("label")
        if label not in VALID_LABELS:
            raise ValidationError(f"vehicle {vid!r}: missing or invalid label {label!r}")
        labels[vid] = label
        for idx, rel in enumerate(entry.get("files", [])):
            segments.append(
                read_segment_csv(base / rel, vid, idx, label=label, schema=schema)
            )
    return FleetDataset(tuple(segments), labels)


def write_fleet(
    segments,
    vehicle_labels: dict[str, str],
    out_dir,
    schema: CsvSchema = DEFAULT_SCHEMA,
) -> Path:
    """Write segment CSVs plus manifest.json under out_dir; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, dict] = {
        vid: {"label": lbl, "files": []} for vid, lbl in sorted(vehicle_labels.items())
    }
    for seg in sorted(segments, key=lambda s: (s.vehicle_id, s.segment_index)):
        fname = f"{seg.vehicle_id}_seg{seg.segment_index:04d}.csv"
        write_segment_csv(seg, out_dir / fname, schema=schema)
        manifest[seg.vehicle_id]["files"].append(fname)
    manifest_path = out_dir / "manifest.json"
    with manifest_path.open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
