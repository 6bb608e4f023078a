"""Evaluation: AUROC, expected direct cost, three-way outcome tallies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .agent import RESULT_ABNORMAL, RESULT_NORMAL, RESULT_WARNING
from .data_model import LABEL_ABNORMAL, LABEL_NORMAL

WARNING_AS_ABNORMAL = "WarningAsAbnormal"
WARNING_AS_NORMAL = "WarningAsNormal"
SEPARATE_CLASS = "SeparateClass"
WARNING_POLICIES = (WARNING_AS_ABNORMAL, WARNING_AS_NORMAL, SEPARATE_CLASS)


@dataclass(frozen=True)
class CostParams:
    """Cost model constants: fault prevalence, miss cost, inspection cost."""

    p: float = 0.00038
    c_f: float = 5_000_000.0
    c_r: float = 8_000.0

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("prevalence p must lie in (0, 1)")
        if self.c_f < 0.0 or self.c_r < 0.0:
            raise ValueError("costs must be non-negative")


def auroc(scores) -> float:
    """Mann-Whitney AUROC of (score, label) pairs; ties count one half.

    Labels may be "Normal"/"Abnormal" strings or 0/1.
    """
    s, y = [], []
    for score, label in scores:
        s.append(float(score))
        y.append(1.0 if label in (LABEL_ABNORMAL, 1, 1.0, True) else 0.0)
    s = np.asarray(s)
    y = np.asarray(y)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC requires both classes present")
    ranks = rankdata(s)  # average ranks handle ties as 0.5
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_cost(q_tp: float, q_fp: float, params: CostParams = CostParams()) -> float:
    """Expected per-vehicle cost of misses plus inspections.

    Misses cost prevalence x (1 - q_tp) x c_f; every flagged vehicle
    (true or false positive) incurs the inspection cost c_r.
    """
    if not (0.0 <= q_tp <= 1.0 and 0.0 <= q_fp <= 1.0):
        raise ValueError("rates must lie in [0, 1]")
    p, c_f, c_r = params.p, params.c_f, params.c_r
    return p * (1.0 - q_tp) * c_f + (p * q_tp + (1.0 - p) * q_fp) * c_r


@dataclass(frozen=True)
class OutcomeTally:
    """Predicted-class counts per ground-truth class (three-way)."""

    counts: dict[str, dict[str, int]]

    def __post_init__(self):
        for truth in (LABEL_ABNORMAL, LABEL_NORMAL):
            row = self.counts.get(truth)
            if row is None or set(row) != set((RESULT_ABNORMAL, RESULT_WARNING, RESULT_NORMAL)):
                raise ValueError(f"tally row malformed for truth class {truth!r}")
            if any(v < 0 for v in row.values()):
                raise ValueError("tally counts must be non-negative")

    def row_total(self, truth: str) -> int:
        return sum(self.counts[truth].values())

    def to_dict(self) -> dict:
        return {t: dict(sorted(r.items())) for t, r in sorted(self.counts.items())}


def _predicted_result(report) -> str:
    result = getattr(report, "result", report)
    if result not in (RESULT_ABNORMAL, RESULT_WARNING, RESULT_NORMAL):
        raise ValueError(f"unknown predicted result {result!r}")
    return result


def tally_outcomes(reports, truth_labels, warning_policy: str = WARNING_AS_ABNORMAL):
    """Build the three-way tally and collapse it to (q_tp, q_fp).

    ``reports`` may be DiagnosisReport objects or plain result strings.
    Under SeparateClass, warnings count toward neither rate. Returns
    (OutcomeTally, q_tp, q_fp).
    """
    reports = list(reports)
    truth_labels = list(truth_labels)
    if len(reports) != len(truth_labels):
        raise ValueError(
            f"length mismatch: {len(reports)} reports vs {len(truth_labels)} labels"
        )
    if warning_policy not in WARNING_POLICIES:
        raise ValueError(f"unknown warning policy {warning_policy!r}")

    counts = {
        LABEL_ABNORMAL: {RESULT_ABNORMAL: 0, RESULT_WARNING: 0, RESULT_NORMAL: 0},
        LABEL_NORMAL: {RESULT_ABNORMAL: 0, RESULT_WARNING: 0, RESULT_NORMAL: 0},
    }
    for report, truth in zip(reports, truth_labels):
        if truth not in counts:
            raise ValueError(f"unknown truth label {truth!r}")
        counts[truth][_predicted_result(report)] += 1

    def flagged(row) -> float:
        if warning_policy == WARNING_AS_ABNORMAL:
            return row[RESULT_ABNORMAL] + row[RESULT_WARNING]
        return row[RESULT_ABNORMAL]

    tally = OutcomeTally(counts)
    n_abn = tally.row_total(LABEL_ABNORMAL)
    n_norm = tally.row_total(LABEL_NORMAL)
    q_tp = flagged(counts[LABEL_ABNORMAL]) / n_abn if n_abn else 0.0
    q_fp = flagged(counts[LABEL_NORMAL]) / n_norm if n_norm else 0.0
    return tally, q_tp, q_fp


_RESULT_RANK = {RESULT_NORMAL: 0, RESULT_WARNING: 1, RESULT_ABNORMAL: 2}


def per_vehicle_scores(vehicle_ids, scores) -> dict[str, float]:
    """Vehicle score = max of its segment scores."""
    out: dict[str, float] = {}
    for vid, s in zip(vehicle_ids, scores):
        out[vid] = max(out.get(vid, -np.inf), float(s))
    return out


def per_vehicle_results(vehicle_ids, results) -> dict[str, str]:
    """Vehicle outcome = worst segment outcome (Abnormal > Warning > Normal)."""
    out: dict[str, str] = {}
    for vid, r in zip(vehicle_ids, results):
        r = _predicted_result(r)
        if vid not in out or _RESULT_RANK[r] > _RESULT_RANK[out[vid]]:
            out[vid] = r
    return out
