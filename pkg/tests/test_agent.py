import numpy as np
import pytest

from battdiag.agent import (
    DiagnoseConfig,
    GateDecision,
    NoLikelihoods,
    ParseFailure,
    Prediction,
    ProviderError,
    ProviderResponse,
    build_prompt,
    calibrate,
    diagnose,
    parse_report,
    refinement_gate,
    three_way_result,
)
from battdiag.attribution import Attribution, TreeShapExplainer, select_top_k
from battdiag.gbdt import TreeEnsemble, TreeNode
from battdiag.knowledge import FaultType, load_knowledge_base
from battdiag.providers import MockProvider


@pytest.fixture(scope="module")
def kb():
    return load_knowledge_base()


def make_attr(phi=None, k=8):
    if phi is None:
        phi = np.array([0.1, -0.4, 0.0, 0.2, -0.9, 0.0, 0.05, 1.4, 0.3, 0.6])
    return select_top_k(Attribution(base_value=-0.8, phi=np.asarray(phi, float)), k)


class TestBuildPrompt:
    def test_rendering_is_deterministic(self, kb):
        attr = make_attr()
        pred = Prediction("Abnormal", 0.731234567)
        a = build_prompt(kb, pred, attr).rendered
        b = build_prompt(kb, pred, attr).rendered
        assert a == b

    def test_section_order(self, kb):
        prompt = build_prompt(kb, Prediction("Normal", 0.2), make_attr()).rendered
        assert prompt.index("[Rules]") < prompt.index("[SHAP]") < prompt.index("[Template]")

    def test_top_k_line_count(self, kb):
        prompt = build_prompt(kb, Prediction("Normal", 0.2), make_attr(k=8))
        lines = [l for l in prompt.shap_section.splitlines() if l.startswith("- f_")]
        assert len(lines) == 8

    def test_numbers_rendered_six_significant_digits(self, kb):
        attr = make_attr()
        prompt = build_prompt(kb, Prediction("Abnormal", 0.123456789), attr).rendered
        assert "probability: 0.123457" in prompt

    def test_requires_top_k(self, kb):
        bare = Attribution(base_value=0.0, phi=np.zeros(10))
        with pytest.raises(ValueError, match="top-k"):
            build_prompt(kb, Prediction("Normal", 0.2), bare)


class TestCalibrate:
    def test_normalization(self):
        resp = ProviderResponse("x", {"Abnormal": 0.08, "Normal": 0.02})
        assert calibrate(resp) == pytest.approx(0.8)

    def test_symmetry(self):
        resp = ProviderResponse("x", {"Abnormal": 0.3, "Normal": 0.3})
        assert calibrate(resp) == pytest.approx(0.5)

    def test_zero_clamped(self):
        resp = ProviderResponse("x", {"Abnormal": 0.9, "Normal": 0.0})
        assert calibrate(resp) == pytest.approx(1.0, abs=1e-8)

    def test_scale_invariance(self, rng):
        for _ in range(100):
            a, n = rng.uniform(1e-6, 1.0, 2)
            scale = rng.uniform(1e-3, 1.0 / max(a, n))
            base = calibrate(ProviderResponse("x", {"Abnormal": a, "Normal": n}))
            scaled = calibrate(
                ProviderResponse("x", {"Abnormal": a * scale, "Normal": n * scale})
            )
            assert scaled == pytest.approx(base, rel=1e-9, abs=1e-12)

    def test_missing_token_raises(self):
        with pytest.raises(NoLikelihoods):
            calibrate(ProviderResponse("x", {"Abnormal": 0.5}))
        with pytest.raises(NoLikelihoods):
            calibrate(ProviderResponse("x", None))

    def test_case_insensitive_tokens(self):
        resp = ProviderResponse("x", {"abnormal": 0.06, " Normal ": 0.02})
        assert calibrate(resp) == pytest.approx(0.75)

    def test_likelihood_range_validated(self):
        with pytest.raises(ValueError, match="outside"):
            ProviderResponse("x", {"Abnormal": 1.2, "Normal": 0.5})


class TestRefinementGate:
    def test_boundary_cases(self):
        assert refinement_gate(0.52) is GateDecision.ESCALATE
        assert refinement_gate(0.90) is GateDecision.ACCEPT
        # margin exactly at the threshold: strict inequality accepts
        assert refinement_gate(0.55) is GateDecision.ACCEPT
        assert refinement_gate(0.45) is GateDecision.ACCEPT

    def test_monotone_in_boundary_distance(self, rng):
        for _ in range(200):
            p1, p2 = rng.uniform(0.01, 0.99, 2)
            if abs(p1 - 0.5) <= abs(p2 - 0.5) and refinement_gate(p2) is GateDecision.ESCALATE:
                assert refinement_gate(p1) is GateDecision.ESCALATE

    def test_tail_mode(self):
        assert refinement_gate(0.97, mode="tail") is GateDecision.ESCALATE
        assert refinement_gate(0.52, mode="tail") is GateDecision.ACCEPT

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            refinement_gate(0.0)
        with pytest.raises(ValueError):
            refinement_gate(1.0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="gate mode"):
            refinement_gate(0.5, mode="nope")


class TestThreeWay:
    def test_bands(self):
        assert three_way_result(0.80, 0.05) == "Abnormal"
        assert three_way_result(0.55, 0.05) == "Abnormal"
        assert three_way_result(0.52, 0.05) == "Warning"
        assert three_way_result(0.48, 0.05) == "Warning"
        assert three_way_result(0.45, 0.05) == "Normal"
        assert three_way_result(0.10, 0.05) == "Normal"


class TestParseReport:
    def test_well_formed_block(self):
        text = (
            "Some analysis first.\n```json\n"
            '{"result": "Abnormal", "cause": "c", "advice": "a",'
            ' "severity": {"ISC": 4, "TR": 2, "CF": 0, "CD": 1, "TM": 0, "BMS": 0}}'
            "\n```\ntrailing prose"
        )
        parsed = parse_report(text)
        assert parsed.result == "Abnormal"
        assert parsed.cause == "c"
        assert parsed.severity["ISC"] == 4.0
        assert parsed.warnings == ()

    def test_severity_clamped_with_warning(self):
        text = (
            "```json\n"
            '{"result": "Warning", "cause": "c", "advice": "a",'
            ' "severity": {"ISC": 7, "TR": -1, "CF": 0, "CD": 0, "TM": 0, "BMS": 0}}'
            "\n```"
        )
        parsed = parse_report(text)
        assert parsed.severity["ISC"] == 5.0
        assert parsed.severity["TR"] == 0.0
        assert any("clamped" in w for w in parsed.warnings)

    def test_free_prose_raises(self):
        with pytest.raises(ParseFailure):
            parse_report("no structured content at all")

    def test_bad_result_value_raises(self):
        with pytest.raises(ParseFailure):
            parse_report('```json\n{"result": "Broken"}\n```')

    def test_missing_severity_defaults_with_warning(self):
        parsed = parse_report('```json\n{"result": "Normal", "cause": "c", "advice": "a"}\n```')
        assert all(parsed.severity[f.name] == 0.0 for f in FaultType)
        assert any("severity missing" in w for w in parsed.warnings)

    def test_first_valid_fence_wins(self):
        text = (
            "```json\nnot json at all\n```\n"
            '```json\n{"result": "Normal", "cause": "c", "advice": "a", "severity": {}}\n```'
        )
        assert parse_report(text).result == "Normal"


class _FailingProvider:
    id = "failing"

    def complete(self, prompt, capture_likelihoods=False):
        raise ProviderError("synthetic outage")


class _JunkProvider:
    id = "junk"

    def complete(self, prompt, capture_likelihoods=False):
        return ProviderResponse("here is prose with no structure")


class _SilentLikelihoodProvider(MockProvider):
    id = "silent"

    def complete(self, prompt, capture_likelihoods=False):
        resp = super().complete(prompt, capture_likelihoods=False)
        return ProviderResponse(resp.text, None)


def _pipeline_pieces(kb, margin_value):
    """Stump model and explainer with a controllable probability."""
    stump = TreeNode(feature_index=7, threshold=5.0,
                     left=TreeNode(value=-margin_value), right=TreeNode(value=margin_value))
    model = TreeEnsemble(base_score=0.0, learning_rate=1.0, trees=[stump])
    background = np.zeros((2, 10))
    background[1, 7] = 10.0
    explainer = TreeShapExplainer(model, background)
    x = np.zeros(10)
    x[7] = 7.0
    return model, explainer, x


class TestDiagnose:
    def test_accept_path_keeps_classifier_decision(self, kb):
        model, explainer, x = _pipeline_pieces(kb, 2.0)  # p = sigmoid(2) = 0.88
        rep = diagnose(x, model, explainer, kb, MockProvider(kb=kb))
        assert rep.result == "Abnormal"
        assert rep.calibrated_probability is None
        assert rep.provenance.escalated is False
        assert rep.provenance.degraded is False
        assert rep.provenance.provider == "mock"
        assert 0.0 <= min(rep.severity.values()) <= max(rep.severity.values()) <= 5.0

    def test_escalate_path_overrides_with_calibration(self, kb):
        model, explainer, x = _pipeline_pieces(kb, 0.08)  # p = sigmoid(0.08) ~ 0.52
        rep = diagnose(x, model, explainer, kb, MockProvider(kb=kb))
        assert rep.provenance.escalated is True
        assert rep.calibrated_probability is not None
        assert rep.result == three_way_result(rep.calibrated_probability, 0.05)

    def test_provider_failure_degrades(self, kb):
        model, explainer, x = _pipeline_pieces(kb, 2.0)
        rep = diagnose(x, model, explainer, kb, _FailingProvider())
        assert rep.provenance.degraded is True
        assert rep.result == "Abnormal"  # classifier decision survives
        assert "f_dT" in rep.cause
        assert rep.advice

    def test_unparseable_completion_degrades(self, kb):
        model, explainer, x = _pipeline_pieces(kb, -2.0)
        rep = diagnose(x, model, explainer, kb, _JunkProvider())
        assert rep.provenance.degraded is True
        assert rep.result == "Normal"

    def test_missing_likelihoods_on_escalation_falls_back(self, kb):
        model, explainer, x = _pipeline_pieces(kb, 0.08)
        rep = diagnose(x, model, explainer, kb, _SilentLikelihoodProvider(kb=kb))
        assert rep.provenance.escalated is True
        assert rep.calibrated_probability is None
        assert rep.result == "Abnormal"  # p ~ 0.52 >= threshold
        assert any("calibration unavailable" in w for w in rep.warnings)

    def test_totality_over_random_inputs(self, kb, rng):
        from conftest import random_ensemble

        providers = [MockProvider(kb=kb), _FailingProvider(), _JunkProvider()]
        for _ in range(15):
            model = random_ensemble(rng)
            background = rng.normal(size=(6, 10))
            explainer = TreeShapExplainer(model, background)
            x = rng.normal(size=10)
            for provider in providers:
                rep = diagnose(x, model, explainer, kb, provider)
                assert rep.result in ("Normal", "Warning", "Abnormal")
                assert set(rep.severity) == {f.name for f in FaultType}

    def test_report_dict_layout(self, kb):
        model, explainer, x = _pipeline_pieces(kb, 2.0)
        doc = diagnose(x, model, explainer, kb, MockProvider(kb=kb)).to_dict()
        assert set(doc) == {
            "result", "cause", "advice", "severity",
            "calibrated_probability", "provenance", "warnings",
        }
        assert set(doc["provenance"]) == {
            "gbdt_probability", "escalated", "provider", "degraded",
        }

    def test_config_threshold_respected(self, kb):
        model, explainer, x = _pipeline_pieces(kb, 0.9)  # p ~ 0.71
        rep = diagnose(x, model, explainer, kb, MockProvider(kb=kb),
                       DiagnoseConfig(threshold=0.9))
        assert rep.result == "Normal"

    def test_boundary_calibration_fixture(self, kb):
        class CannedLikelihoodProvider(MockProvider):
            id = "canned"

            def complete(self, prompt, capture_likelihoods=False):
                resp = super().complete(prompt, capture_likelihoods=False)
                likes = {"Abnormal": 0.08, "Normal": 0.02} if capture_likelihoods else None
                return ProviderResponse(resp.text, likes)

        model, explainer, x = _pipeline_pieces(kb, 0.08)  # p = sigmoid(0.08) ~ 0.52
        rep = diagnose(x, model, explainer, kb, CannedLikelihoodProvider(kb=kb))
        assert rep.provenance.escalated is True
        assert rep.calibrated_probability == pytest.approx(0.8)
        assert rep.result == "Abnormal"

    def test_batch_parallel_matches_serial(self, kb, rng):
        from conftest import random_ensemble
        from battdiag.agent import diagnose_batch

        model = random_ensemble(rng)
        explainer = TreeShapExplainer(model, rng.normal(size=(8, 10)))
        xs = [rng.normal(size=10) for _ in range(10)]
        provider = MockProvider(kb=kb)
        serial = diagnose_batch(xs, model, explainer, kb, provider, jobs=1)
        parallel = diagnose_batch(xs, model, explainer, kb, provider, jobs=4)
        assert [r.to_dict() for r in serial] == [r.to_dict() for r in parallel]


@pytest.fixture(scope="module")
def isc_pipeline(kb):
    from battdiag.data_model import partition_by_vehicle
    from battdiag.features import featurize_segments
    from battdiag.gbdt import TrainConfig, train
    from battdiag.synth import FleetSpec, generate_fleet

    spec = FleetSpec(
        n_vehicles=14, abnormal_fraction=0.5, segments_per_vehicle=8,
        fault_mix={FaultType.ISC: 1.0}, seed=23,
    )
    dataset, _ = generate_fleet(spec)
    rows = featurize_segments(dataset.segments)
    split = partition_by_vehicle(dataset, 0.4, spec.seed)
    train_rows = [r for r in rows if r.vehicle_id in split.train_vehicles]
    val_rows = [r for r in rows if r.vehicle_id in split.validation_vehicles]
    model = train([(r.features, r.label) for r in train_rows],
                  TrainConfig(seed=0, min_samples_leaf=10))
    background = np.asarray([r.features.to_array() for r in train_rows])
    return model, TreeShapExplainer(model, background), val_rows


class TestDiagnoseOnSyntheticFaults:
    """Diagnosis quality on clearly separated synthetic segments."""

    def test_clear_isc_segment_flagged_with_isc_severity(self, kb, isc_pipeline):
        model, explainer, val_rows = isc_pipeline
        probs = [model.predict_proba(r.features) for r in val_rows]
        # clearest abnormal validation segment
        idx = max(range(len(val_rows)),
                  key=lambda i: probs[i] if val_rows[i].label == "Abnormal" else -1)
        rep = diagnose(val_rows[idx].features, model, explainer, kb, MockProvider(kb=kb))
        assert rep.result == "Abnormal"
        top2 = sorted(rep.severity, key=rep.severity.get, reverse=True)[:2]
        assert "ISC" in top2

    def test_clear_normal_segment_low_severity(self, kb, isc_pipeline):
        model, explainer, val_rows = isc_pipeline
        probs = [model.predict_proba(r.features) for r in val_rows]
        idx = min(range(len(val_rows)),
                  key=lambda i: probs[i] if val_rows[i].label == "Normal" else 2.0)
        rep = diagnose(val_rows[idx].features, model, explainer, kb, MockProvider(kb=kb))
        assert rep.result == "Normal"
        assert all(v <= 1.0 for v in rep.severity.values())
