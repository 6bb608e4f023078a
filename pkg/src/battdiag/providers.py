"""Reasoning providers: a deterministic offline mock and an HTTP adapter.

A provider exposes ``complete(prompt, capture_likelihoods) ->
ProviderResponse``. The mock re-reads the evidence section of the
prompt, scores it against the knowledge base, and writes a report that
exercises every pipeline path without network access. The HTTP adapter
targets a chat-completions style JSON endpoint with optional per-token
log-probability capture.
"""

from __future__ import annotations

import json
import math
import os

import requests

from .agent import (
    CONTRIBUTOR_RE,
    PROBABILITY_RE,
    TOKEN_ABNORMAL,
    TOKEN_NORMAL,
    ProviderError,
    ProviderResponse,
    severity_from_scores,
    three_way_result,
)
from .knowledge import (
    STRONG,
    FaultType,
    KnowledgeBase,
    candidate_faults,
    load_knowledge_base,
    lookup,
)

# weight of knowledge-coherence evidence relative to the classifier margin,
# and the neutral pivot below which an attribution pattern reads as benign
MOCK_EVIDENCE_GAIN = 6.0
MOCK_EVIDENCE_PIVOT = 0.25
MOCK_MARGIN = 0.05
# emitted token likelihoods are scaled down to resemble real token
# probabilities; the calibration ratio is scale-invariant anyway
MOCK_LIKELIHOOD_SCALE = 0.1

ADVICE_BY_FAULT = {
    FaultType.ISC: (
        "Take the pack out of fast-charge service and measure per-cell insulation "
        "resistance; a micro-short is plausible in the flagged cell group."
    ),
    FaultType.TR: (
        "Stop charging above 80% SOC, verify cooling operation, and inspect the "
        "hottest probe location before the vehicle returns to service."
    ),
    FaultType.CF: (
        "Plan a capacity test at the next service; expect longer charge tails and "
        "consider rebalancing or module replacement."
    ),
    FaultType.CD: (
        "Run a balancing cycle and re-check cell voltage spread; persistent "
        "dispersion calls for module-level screening."
    ),
    FaultType.TM: (
        "Inspect coolant flow, fans and thermal interfaces; the pack is shedding "
        "heat unevenly."
    ),
    FaultType.BMS: (
        "Audit BMS sensor calibration and charge-control firmware; telemetry is "
        "inconsistent with healthy charge control."
    ),
}

ROUTINE_ADVICE = "No intervention needed; keep the vehicle under routine monitoring."


def _logit(p: float) -> float:
    p = min(1.0 - 1e-9, max(1e-9, p))
    return math.log(p / (1.0 - p))


class MockProvider:
    """Deterministic offline reasoner driven entirely by the prompt text.

    The abnormality belief blends the classifier probability with a
    knowledge-coherence term: attribution weight pushing abnormal counts
    for the fault type it lines up with best, weight pushing normal counts
    against. Identical prompts always produce identical responses.
    """

    id = "mock"

    def __init__(self, kb: KnowledgeBase | None = None,
                 evidence_gain: float = MOCK_EVIDENCE_GAIN,
                 evidence_pivot: float = MOCK_EVIDENCE_PIVOT,
                 margin: float = MOCK_MARGIN):
        self.kb = kb if kb is not None else load_knowledge_base()
        self.evidence_gain = evidence_gain
        self.evidence_pivot = evidence_pivot
        self.margin = margin

    # -- prompt parsing ----------------------------------------------------
    def _read_evidence(self, prompt: str):
        m = PROBABILITY_RE.search(prompt)
        if m is None:
            raise ProviderError("mock: prompt carries no probability line")
        probability = float(m.group("p"))
        contributors = [
            (hit["feature"], float(hit["phi"]), float(hit["weight"]))
            for hit in (c.groupdict() for c in CONTRIBUTOR_RE.finditer(prompt))
        ]
        if not contributors:
            raise ProviderError("mock: prompt carries no contributor lines")
        return probability, contributors

    # -- rubric ------------------------------------------------------------
    def _mechanism_evidence(self, contributors) -> float:
        """How strongly the attribution pattern matches one fault mechanism.

        A genuine fault moves several of one fault's strongly correlated
        features in the abnormal direction at once. For each fault, the
        aligned abnormal-direction weight mass is discounted when fewer
        than three of its strong features appear, and contradicted by the
        same mechanism's features pushing in the normal direction. The
        best fault's net score, centered on a neutral pivot, is the
        evidence; single-channel excursions land at or below the pivot.
        """
        pos = [(f, w) for f, phi, w in contributors if phi > 0]
        neg = [(f, w) for f, phi, w in contributors if phi < 0]
        best = 0.0
        for fault in FaultType:
            aligned = 0.0
            distinct: set[str] = set()
            for feature, weight in pos:
                if lookup(self.kb, feature, fault) == STRONG:
                    aligned += weight
                    distinct.add(feature)
            if not distinct:
                continue
            contradicted = sum(
                w for f, w in neg if lookup(self.kb, f, fault) == STRONG
            )
            score = aligned * min(1.0, len(distinct) / 3.0) - contradicted
            best = max(best, score)
        return best - self.evidence_pivot

    def complete(self, prompt: str, capture_likelihoods: bool = False) -> ProviderResponse:
        probability, contributors = self._read_evidence(prompt)
        evidence = self._mechanism_evidence(contributors)
        belief = 1.0 / (1.0 + math.exp(-(_logit(probability)
                                         + self.evidence_gain * evidence)))

        likelihoods = None
        p_eff = probability
        if capture_likelihoods:
            likelihoods = {
                TOKEN_ABNORMAL: MOCK_LIKELIHOOD_SCALE * belief + 1e-7,
                TOKEN_NORMAL: MOCK_LIKELIHOOD_SCALE * (1.0 - belief) + 1e-7,
            }
            p_eff = likelihoods[TOKEN_ABNORMAL] / (
                likelihoods[TOKEN_ABNORMAL] + likelihoods[TOKEN_NORMAL]
            )
        result = three_way_result(p_eff, self.margin)

        pos = [(f, w) for f, phi, w in contributors if phi > 0]
        pos_scores = (
            dict(candidate_faults(self.kb, pos)) if pos
            else {fault: 0.0 for fault in FaultType}
        )
        severity = severity_from_scores(pos_scores)
        ranked = sorted(pos_scores.items(), key=lambda kv: (-kv[1], kv[0].name))
        cause = self._cause_text(result, contributors, ranked, evidence)
        advice = self._advice_text(result, ranked)

        body = {
            "result": result,
            "cause": cause,
            "advice": advice,
            "severity": {k: int(v) for k, v in severity.items()},
        }
        text = (
            "Assessment of the supplied attribution evidence follows.\n"
            f"{cause}\n"
            "```json\n" + json.dumps(body, sort_keys=True) + "\n```\n"
        )
        return ProviderResponse(text=text, token_likelihoods=likelihoods)

    def _cause_text(self, result, contributors, ranked, evidence) -> str:
        top = [c for c in contributors if c[1] > 0][:3]
        if result == "Normal" or not top:
            return (
                "Attribution mass does not line up with any fault mechanism "
                f"(net evidence {evidence:+.3g}); the charge profile reads as healthy."
            )
        feats = ", ".join(
            f"{f} ({self.kb.interpretations.get(f, f)}; weight {w:.3g})"
            for f, _, w in top
        )
        faults = " and ".join(
            f"{fault.display_name} (score {score:.3g})" for fault, score in ranked[:2]
        )
        return (
            f"Abnormal-direction contributors dominate: {feats}. "
            f"The pattern is most consistent with {faults}."
        )

    def _advice_text(self, result, ranked) -> str:
        if result == "Normal":
            return ROUTINE_ADVICE
        top_fault = ranked[0][0]
        return ADVICE_BY_FAULT[top_fault]


class HttpProvider:
    """Chat-completions style HTTP adapter with optional logprob capture.

    Auth comes from an environment variable so tokens never appear in
    configs or manifests. temperature is pinned to 0 for reproducibility.
    """

    id = "http"

    def __init__(
        self,
        url: str,
        model: str,
        token_env: str = "BATTDIAG_API_TOKEN",
        timeout: float = 30.0,
        temperature: float = 0.0,
        top_logprobs: int = 5,
        session=None,
    ):
        self.url = url
        self.model = model
        self.token_env = token_env
        self.timeout = timeout
        self.temperature = temperature
        self.top_logprobs = top_logprobs
        self.session = session or requests.Session()

    def complete(self, prompt: str, capture_likelihoods: bool = False) -> ProviderResponse:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        if capture_likelihoods:
            payload["logprobs"] = True
            payload["top_logprobs"] = self.top_logprobs
        try:
            resp = self.session.post(
                self.url, json=payload, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise ProviderError(f"transport failure: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderError(f"http status {resp.status_code}: {resp.text[:200]}")
        try:
            choice = resp.json()["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed completion payload: {exc}") from exc
        likes = self._extract_likelihoods(choice) if capture_likelihoods else None
        return ProviderResponse(text=text, token_likelihoods=likes)

    @staticmethod
    def _extract_likelihoods(choice) -> dict[str, float] | None:
        """Find the first generated position mentioning a diagnostic token.

        The counterpart token missing from that position's top-k list is
        recorded as zero likelihood (the calibration clamp handles it).
        """
        content = (choice.get("logprobs") or {}).get("content") or []
        for position in content:
            found: dict[str, float] = {}
            alternatives = [position, *(position.get("top_logprobs") or [])]
            for alt in alternatives:
                tok = str(alt.get("token", "")).strip().casefold()
                lp = alt.get("logprob")
                if lp is None:
                    continue
                if tok == "abnormal":
                    found[TOKEN_ABNORMAL] = max(found.get(TOKEN_ABNORMAL, 0.0), math.exp(lp))
                elif tok == "normal":
                    found[TOKEN_NORMAL] = max(found.get(TOKEN_NORMAL, 0.0), math.exp(lp))
            if found:
                found.setdefault(TOKEN_ABNORMAL, 0.0)
                found.setdefault(TOKEN_NORMAL, 0.0)
                return found
        return None
