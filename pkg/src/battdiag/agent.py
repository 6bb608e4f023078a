"""Reasoning layer: structured prompts, calibration, gating, diagnosis.

A diagnosis starts from the classifier probability and the Shapley
attribution of one segment. Confident predictions are accepted and the
reasoning provider only writes the report body; boundary predictions
are escalated, the provider's diagnostic-token likelihoods are
normalized into a calibrated fault probability, and that probability
decides the outcome (including the intermediate Warning class). A
provider failure always degrades to a locally rendered report rather
than aborting the pipeline.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum

from .attribution import Attribution, TreeShapExplainer, select_top_k
from .features import FEATURE_NAMES
from .gbdt import TreeEnsemble
from .knowledge import FaultType, KnowledgeBase, candidate_faults, lookup

RESULT_NORMAL = "Normal"
RESULT_WARNING = "Warning"
RESULT_ABNORMAL = "Abnormal"
VALID_RESULTS = (RESULT_NORMAL, RESULT_WARNING, RESULT_ABNORMAL)

TOKEN_ABNORMAL = "Abnormal"
TOKEN_NORMAL = "Normal"

LIKELIHOOD_CLAMP = 1e-9
SEVERITY_MAX = 5.0

# one contributor line of the prompt's evidence section; the mock provider
# parses these back out, so format and regex live side by side
CONTRIBUTOR_LINE = "- {feature} phi={phi:+.6g} weight={weight:.6g} :: {meaning}"
CONTRIBUTOR_RE = re.compile(
    r"^- (?P<feature>f_\w+) phi=(?P<phi>[+-][0-9.eE+-]+) weight=(?P<weight>[0-9.eE+-]+) ::",
    re.MULTILINE,
)
PROBABILITY_RE = re.compile(r"^probability: (?P<p>[0-9.eE+-]+)$", re.MULTILINE)


class ParseFailure(ValueError):
    """The completion text carried no usable fenced JSON report."""


class NoLikelihoods(ValueError):
    """The provider response lacks the diagnostic token likelihoods."""


class ProviderError(RuntimeError):
    """Transport or payload failure of a reasoning provider."""


class GateDecision(Enum):
    ACCEPT = "Accept"
    ESCALATE = "Escalate"


@dataclass(frozen=True)
class Prediction:
    label: str
    probability: float


@dataclass(frozen=True)
class ProviderResponse:
    """Raw completion text plus optional diagnostic-token likelihoods."""

    text: str
    token_likelihoods: dict[str, float] | None = None

    def __post_init__(self):
        if self.token_likelihoods is not None:
            for tok, v in self.token_likelihoods.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"likelihood for {tok!r} outside [0, 1]: {v}")


@dataclass(frozen=True)
class DiagnosticPrompt:
    rules_section: str
    shap_section: str
    template_section: str

    @property
    def rendered(self) -> str:
        return "\n\n".join((self.rules_section, self.shap_section, self.template_section))


@dataclass(frozen=True)
class Provenance:
    gbdt_probability: float
    escalated: bool
    provider: str
    degraded: bool = False


@dataclass(frozen=True)
class DiagnosisReport:
    result: str
    cause: str
    advice: str
    severity: dict[str, float]
    calibrated_probability: float | None
    provenance: Provenance
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "result": self.result,
            "cause": self.cause,
            "advice": self.advice,
            "severity": {k: float(v) for k, v in sorted(self.severity.items())},
            "calibrated_probability": (
                None if self.calibrated_probability is None
                else float(self.calibrated_probability)
            ),
            "provenance": {
                "gbdt_probability": float(self.provenance.gbdt_probability),
                "escalated": self.provenance.escalated,
                "provider": self.provenance.provider,
                "degraded": self.provenance.degraded,
            },
            "warnings": list(self.warnings),
        }


def build_prompt(kb: KnowledgeBase, prediction: Prediction, attr: Attribution) -> DiagnosticPrompt:
    """Assemble the rules / evidence / template prompt for one segment.

    Rendering is deterministic: fixed section order, fixed feature and
    fault ordering, six significant digits on every number.
    """
    if not attr.top_k:
        raise ValueError("attribution has no selected top-k contributors")

    lines = ["[Rules]", "Fault taxonomy:"]
    for fault in FaultType:
        lines.append(f"- {fault.name}: {fault.display_name}")
    lines.append("Feature guide:")
    for feat in FEATURE_NAMES:
        strong = ", ".join(f.name for f in FaultType if lookup(kb, feat, f) == "Strong")
        hint = kb.direction_hints.get(feat, "")
        lines.append(
            f"- {feat}: {kb.interpretations[feat]}. {hint}"
            f" Strongly correlated faults: {strong}."
        )
    rules = "\n".join(lines)

    lines = [
        "[SHAP]",
        f"prediction: {prediction.label}",
        f"probability: {prediction.probability:.6g}",
        "contributors (margin space, strongest first):",
    ]
    for t in attr.top_k:
        lines.append(
            CONTRIBUTOR_LINE.format(
                feature=t.feature, phi=t.phi, weight=t.weight,
                meaning=kb.interpretations.get(t.feature, ""),
            )
        )
    shap = "\n".join(lines)

    fault_keys = ", ".join(f'"{f.name}": 0-5' for f in FaultType)
    template = (
        "[Template]\n"
        "Write a short root-cause analysis, then emit exactly one fenced JSON block:\n"
        "```json\n"
        '{"result": "Normal|Warning|Abnormal", "cause": "...", "advice": "...",\n'
        f' "severity": {{{fault_keys}}}}}\n'
        "```\n"
        "Severity is a per-fault risk rating from 0 (no indication) to 5 (critical)."
    )
    return DiagnosticPrompt(rules, shap, template)


def calibrate(response: ProviderResponse) -> float:
    """Normalize the two diagnostic-token likelihoods into P(abnormal).

    Zero likelihoods are clamped to 1e-9; a missing token raises
    NoLikelihoods so the caller can fall back to the classifier decision.
    """
    likes = response.token_likelihoods or {}
    by_token = {k.strip().casefold(): float(v) for k, v in likes.items()}
    if "abnormal" not in by_token or "normal" not in by_token:
        raise NoLikelihoods("response carries no Abnormal/Normal token likelihoods")
    p_abn = max(by_token["abnormal"], LIKELIHOOD_CLAMP)
    p_norm = max(by_token["normal"], LIKELIHOOD_CLAMP)
    return p_abn / (p_abn + p_norm)


def refinement_gate(
    gbdt_probability: float,
    margin_threshold: float = 0.05,
    mode: str = "boundary",
) -> GateDecision:
    """Decide whether a prediction needs reasoning-layer re-evaluation.

    "boundary" escalates predictions within margin_threshold of the 0.5
    decision boundary (strict inequality). "tail" is the alternative
    reading where min(p, 1-p) below the threshold escalates instead.
    """
    p = float(gbdt_probability)
    if not 0.0 < p < 1.0:
        raise ValueError("probability must lie in (0, 1)")
    # strict inequality, with a guard so values that are exactly on the
    # margin up to float representation (e.g. p = 0.45) never escalate
    guard = 1e-12
    if mode == "boundary":
        escalate = abs(p - 0.5) < margin_threshold - guard
    elif mode == "tail":
        escalate = min(p, 1.0 - p) < margin_threshold - guard
    else:
        raise ValueError(f"unknown gate mode {mode!r}")
    return GateDecision.ESCALATE if escalate else GateDecision.ACCEPT


_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class ParsedReport:
    result: str
    cause: str
    advice: str
    severity: dict[str, float]
    warnings: tuple[str, ...]


def parse_report(text: str) -> ParsedReport:
    """Extract result/cause/advice/severity from the fenced JSON block.

    Tolerates surrounding prose and multiple fences; the first block that
    parses to an object with a valid result wins. Severity values outside
    [0, 5] are clamped and flagged rather than rejected.
    """
    doc = None
    for block in _FENCE_RE.findall(text):
        try:
            candidate = json.loads(block)
        except json.JSONDecodeError:
            continue
        if isinstance(candidate, dict) and candidate.get("result") in VALID_RESULTS:
            doc = candidate
            break
    if doc is None:
        raise ParseFailure("no fenced JSON block with a valid result")

    warnings: list[str] = []
    cause = doc.get("cause")
    advice = doc.get("advice")
    if not isinstance(cause, str):
        cause = ""
        warnings.append("cause missing from report block")
    if not isinstance(advice, str):
        advice = ""
        warnings.append("advice missing from report block")

    severity: dict[str, float] = {}
    raw = doc.get("severity")
    if not isinstance(raw, dict):
        raw = {}
        warnings.append("severity missing from report block")
    for fault in FaultType:
        v = raw.get(fault.name)
        if v is None:
            severity[fault.name] = 0.0
            warnings.append(f"severity missing for {fault.name}")
            continue
        v = float(v)
        if v < 0.0 or v > SEVERITY_MAX:
            warnings.append(f"severity for {fault.name} clamped from {v:g}")
            v = min(SEVERITY_MAX, max(0.0, v))
        severity[fault.name] = v
    unknown = sorted(set(raw) - {f.name for f in FaultType})
    if unknown:
        warnings.append(f"unknown severity keys ignored: {unknown}")
    return ParsedReport(doc["result"], cause, advice, severity, tuple(warnings))


@dataclass(frozen=True)
class DiagnoseConfig:
    top_k: int = 8
    gate_margin: float = 0.05
    gate_mode: str = "boundary"
    threshold: float = 0.5


def three_way_result(probability: float, margin: float) -> str:
    """Map a calibrated probability onto Normal/Warning/Abnormal.

    The Warning band is the open interval (0.5 - margin, 0.5 + margin):
    cases the reasoning layer still cannot settle stay flagged as an
    intermediate class instead of being forced to a side.
    """
    if probability >= 0.5 + margin:
        return RESULT_ABNORMAL
    if probability > 0.5 - margin:
        return RESULT_WARNING
    return RESULT_NORMAL


def positive_fault_scores(kb: KnowledgeBase, top_k) -> dict[FaultType, float]:
    """Correlation-weighted mass of abnormal-direction contributors only."""
    pos = [(t.feature, t.weight) for t in top_k if t.phi > 0]
    if not pos:
        return {fault: 0.0 for fault in FaultType}
    return dict(candidate_faults(kb, pos))


def severity_from_scores(scores: dict[FaultType, float]) -> dict[str, float]:
    """Rate each fault 0..5 from its normalized positive-evidence score.

    The raw score tops out at 2 (all attribution weight on strongly
    correlated features), so score/2 is the normalized rating; rounding
    is half-up for determinism.
    """
    out = {}
    for fault in FaultType:
        normalized = scores.get(fault, 0.0) / 2.0
        out[fault.name] = float(min(SEVERITY_MAX, int(5.0 * normalized + 0.5)))
    return out


def render_fallback_cause(kb: KnowledgeBase, attr: Attribution) -> str:
    """Local cause text used when the reasoning provider is unavailable."""
    ranked = candidate_faults(kb, [(t.feature, t.weight) for t in attr.top_k])
    feats = ", ".join(
        f"{t.feature} (phi {t.phi:+.3g}, weight {t.weight:.3g})" for t in attr.top_k[:3]
    )
    faults = "; ".join(
        f"{fault.display_name} (score {score:.3g})" for fault, score in ranked[:3]
    )
    return (
        f"Classifier-only analysis. Leading contributors: {feats}. "
        f"Correlation-ranked fault candidates: {faults}."
    )


FALLBACK_ADVICE_ABNORMAL = (
    "Schedule a workshop inspection; review the flagged channels before the next fast charge."
)
FALLBACK_ADVICE_NORMAL = "No action required; continue routine monitoring."


def diagnose(
    x,
    model: TreeEnsemble,
    explainer: TreeShapExplainer,
    kb: KnowledgeBase,
    provider,
    config: DiagnoseConfig = DiagnoseConfig(),
) -> DiagnosisReport:
    """Run predict -> attribute -> gate -> report for one feature vector.

    Accepted predictions keep the classifier decision and take the report
    body from the provider in report-only mode. Escalated predictions are
    re-decided from the calibrated token-likelihood probability. Provider
    errors and unparseable completions degrade to a locally rendered
    report; this function never raises for a valid input.
    """
    p = model.predict_proba(x)
    attr = select_top_k(explainer.explain(x), config.top_k)
    yhat = RESULT_ABNORMAL if p >= config.threshold else RESULT_NORMAL
    prompt = build_prompt(kb, Prediction(yhat, p), attr)
    decision = refinement_gate(p, config.gate_margin, config.gate_mode)
    escalated = decision is GateDecision.ESCALATE

    provider_id = getattr(provider, "id", provider.__class__.__name__)
    warnings: list[str] = []
    try:
        response = provider.complete(prompt.rendered, capture_likelihoods=escalated)
        parsed = parse_report(response.text)
        warnings.extend(parsed.warnings)
        calibrated = None
        result = yhat
        if escalated:
            try:
                calibrated = calibrate(response)
                result = three_way_result(calibrated, config.gate_margin)
            except NoLikelihoods:
                warnings.append("calibration unavailable; kept classifier decision")
        return DiagnosisReport(
            result=result,
            cause=parsed.cause,
            advice=parsed.advice,
            severity=parsed.severity,
            calibrated_probability=calibrated,
            provenance=Provenance(p, escalated, provider_id),
            warnings=tuple(warnings),
        )
    except (ProviderError, ParseFailure) as exc:
        warnings.append(f"provider degraded: {exc}")
        scores = positive_fault_scores(kb, attr.top_k)
        return DiagnosisReport(
            result=yhat,
            cause=render_fallback_cause(kb, attr),
            advice=(FALLBACK_ADVICE_ABNORMAL if yhat == RESULT_ABNORMAL
                    else FALLBACK_ADVICE_NORMAL),
            severity=severity_from_scores(scores),
            calibrated_probability=None,
            provenance=Provenance(p, escalated, provider_id, degraded=True),
            warnings=tuple(warnings),
        )


def diagnose_batch(xs, model, explainer, kb, provider,
                   config: DiagnoseConfig = DiagnoseConfig(), jobs: int = 1):
    """Diagnose many segments; results come back in input order."""
    def one(x):
        return diagnose(x, model, explainer, kb, provider, config)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, xs))
    return [one(x) for x in xs]
