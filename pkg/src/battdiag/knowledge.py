"""Fault taxonomy and the feature-fault knowledge base.

This is the bridge from numeric attributions to physical fault
semantics: a fixed six-fault taxonomy, a Strong/Weak correlation cell
for every (feature, fault) pair, and per-feature interpretation text.
The data ships as an embedded JSON document and can be overridden from
disk for domain customization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .features import FEATURE_NAMES

STRONG = "Strong"
WEAK = "Weak"


class FaultType(Enum):
    """The six diagnostic fault dimensions. Enum order breaks score ties."""

    ISC = "Internal Short Circuit"
    TR = "Thermal Runaway"
    CF = "Capacity Fade"
    CD = "Consistency Degradation"
    TM = "Thermal Management"
    BMS = "BMS Fault"

    @property
    def display_name(self) -> str:
        return self.value


@dataclass(frozen=True)
class KnowledgeBase:
    """Per-feature interpretations plus the 10x6 feature-fault matrix."""

    version: str
    interpretations: dict[str, str]
    correlation: dict[str, dict[str, str]]
    direction_hints: dict[str, str]

    def __post_init__(self):
        missing = [f for f in FEATURE_NAMES if f not in self.interpretations]
        if missing:
            raise ValueError(f"interpretations missing for {missing}")
        for feat in FEATURE_NAMES:
            row = self.correlation.get(feat)
            if row is None or set(row) != {ft.name for ft in FaultType}:
                raise ValueError(f"correlation row incomplete for {feat}")
            bad = [v for v in row.values() if v not in (STRONG, WEAK)]
            if bad:
                raise ValueError(f"correlation cells must be Strong/Weak, got {bad}")

    def checksum(self) -> str:
        """SHA-256 over the canonical serialization of the correlation matrix."""
        canon = json.dumps(
            {f: self.correlation[f] for f in FEATURE_NAMES}, sort_keys=True
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def load_knowledge_base(path=None) -> KnowledgeBase:
    """Load the embedded knowledge base, or a replacement JSON document."""
    if path is None:
        doc = json.loads(
            resources.files("battdiag.resources")
            .joinpath("knowledge_base.json")
            .read_text(encoding="utf-8")
        )
    else:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return KnowledgeBase(
        version=str(doc.get("version", "?")),
        interpretations=dict(doc["interpretations"]),
        correlation={f: dict(row) for f, row in doc["correlation"].items()},
        direction_hints=dict(doc.get("direction_hints", {})),
    )


def lookup(kb: KnowledgeBase, feature: str, fault: FaultType) -> str:
    """The Strong/Weak correlation cell for one (feature, fault) pair."""
    row = kb.correlation.get(feature)
    if row is None:
        raise KeyError(f"unknown feature symbol {feature!r}")
    return row[fault.name]


STRONG_SCORE = 2.0
WEAK_SCORE = 1.0


def candidate_faults(kb: KnowledgeBase, weighted_features) -> list[tuple[FaultType, float]]:
    """Rank fault types by correlation-weighted attribution mass.

    ``weighted_features`` is a sequence of (feature symbol, weight) pairs;
    each feature adds 2x its weight to faults it correlates strongly with
    and 1x to the rest. Ties resolve in enum order.
    """
    pairs = list(weighted_features)
    if not pairs:
        raise ValueError("weighted_features must be non-empty")
    scores = {fault: 0.0 for fault in FaultType}
    for feature, weight in pairs:
        if feature not in kb.correlation:
            raise KeyError(f"unknown feature symbol {feature!r}")
        for fault in FaultType:
            mult = STRONG_SCORE if lookup(kb, feature, fault) == STRONG else WEAK_SCORE
            scores[fault] += mult * float(weight)
    enum_pos = {fault: i for i, fault in enumerate(FaultType)}
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], enum_pos[kv[0]]))
    return ranked
