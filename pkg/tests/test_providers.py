import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from battdiag.agent import (
    Prediction,
    ProviderError,
    build_prompt,
    calibrate,
    parse_report,
)
from battdiag.attribution import Attribution, select_top_k
from battdiag.knowledge import FaultType, load_knowledge_base
from battdiag.providers import HttpProvider, MockProvider


@pytest.fixture(scope="module")
def kb():
    return load_knowledge_base()


def prompt_for(kb, probability, phi):
    attr = select_top_k(Attribution(base_value=-0.8, phi=np.asarray(phi, float)), 8)
    label = "Abnormal" if probability >= 0.5 else "Normal"
    return build_prompt(kb, Prediction(label, probability), attr).rendered


ISC_PHI = np.array([0.0, 0.0, 0.0, 0.6, 0.9, 0.4, 0.0, 1.1, 0.05, 0.0])
HEALTHY_PHI = np.array([-0.2, -0.1, -0.3, -0.6, -1.2, -0.4, 0.0, -1.5, -0.2, -0.3])
SINGLE_CHANNEL_PHI = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.8, 0.0, 0.0])


class TestMockProvider:
    def test_pure_function_of_prompt(self, kb):
        mock = MockProvider(kb=kb)
        prompt = prompt_for(kb, 0.52, ISC_PHI)
        a = mock.complete(prompt, capture_likelihoods=True)
        b = mock.complete(prompt, capture_likelihoods=True)
        assert a.text == b.text
        assert a.token_likelihoods == b.token_likelihoods

    def test_report_parses_cleanly(self, kb):
        mock = MockProvider(kb=kb)
        parsed = parse_report(mock.complete(prompt_for(kb, 0.9, ISC_PHI)).text)
        assert parsed.result in ("Normal", "Warning", "Abnormal")
        assert parsed.cause and parsed.advice
        assert parsed.warnings == ()

    def test_isc_pattern_reads_abnormal(self, kb):
        mock = MockProvider(kb=kb)
        resp = mock.complete(prompt_for(kb, 0.52, ISC_PHI), capture_likelihoods=True)
        assert calibrate(resp) > 0.55
        parsed = parse_report(resp.text)
        top2 = sorted(parsed.severity, key=parsed.severity.get, reverse=True)[:2]
        assert "ISC" in top2

    def test_healthy_pattern_reads_normal(self, kb):
        mock = MockProvider(kb=kb)
        resp = mock.complete(prompt_for(kb, 0.48, HEALTHY_PHI), capture_likelihoods=True)
        assert calibrate(resp) < 0.45
        parsed = parse_report(resp.text)
        assert parsed.result == "Normal"
        assert all(v <= 1.0 for v in parsed.severity.values())

    def test_single_channel_excursion_discounted(self, kb):
        mock = MockProvider(kb=kb)
        coherent = mock.complete(prompt_for(kb, 0.5, ISC_PHI), capture_likelihoods=True)
        lone = mock.complete(prompt_for(kb, 0.5, SINGLE_CHANNEL_PHI),
                             capture_likelihoods=True)
        assert calibrate(lone) < calibrate(coherent)

    def test_likelihoods_only_on_request(self, kb):
        mock = MockProvider(kb=kb)
        assert mock.complete(prompt_for(kb, 0.7, ISC_PHI)).token_likelihoods is None
        got = mock.complete(prompt_for(kb, 0.7, ISC_PHI), capture_likelihoods=True)
        assert set(got.token_likelihoods) == {"Abnormal", "Normal"}
        assert all(0.0 < v <= 1.0 for v in got.token_likelihoods.values())

    def test_prompt_without_evidence_rejected(self, kb):
        mock = MockProvider(kb=kb)
        with pytest.raises(ProviderError):
            mock.complete("an unrelated prompt")

    def test_severity_rubric_bounds(self, kb):
        mock = MockProvider(kb=kb)
        for prob in (0.05, 0.5, 0.95):
            parsed = parse_report(mock.complete(prompt_for(kb, prob, ISC_PHI)).text)
            assert all(0 <= v <= 5 for v in parsed.severity.values())
            assert set(parsed.severity) == {f.name for f in FaultType}


class _StubHandler(BaseHTTPRequestHandler):
    """Canned chat-completions endpoint; behaviour keyed on the model name."""

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        payload = json.loads(self.rfile.read(length))
        self.server.last_payload = payload
        self.server.last_auth = self.headers.get("Authorization")
        mode = payload["model"]
        if mode == "error500":
            self.send_response(500)
            self.end_headers()
            self.wfile.write(b"boom")
            return
        if mode == "malformed":
            body = {"unexpected": True}
        else:
            text = (
                "Assessment:\n```json\n"
                '{"result": "Abnormal", "cause": "stub", "advice": "stub",'
                ' "severity": {"ISC": 1, "TR": 0, "CF": 0, "CD": 0, "TM": 0, "BMS": 0}}'
                "\n```"
            )
            choice = {"message": {"content": text}}
            if payload.get("logprobs"):
                choice["logprobs"] = {
                    "content": [
                        {"token": "result", "logprob": -0.1, "top_logprobs": []},
                        {
                            "token": "Abnormal",
                            "logprob": math.log(0.08),
                            "top_logprobs": [
                                {"token": "Abnormal", "logprob": math.log(0.08)},
                                {"token": "Normal", "logprob": math.log(0.02)},
                            ],
                        },
                    ]
                }
            body = {"choices": [choice]}
        data = json.dumps(body).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture(scope="module")
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1/chat/completions", server
    server.shutdown()


class TestHttpProvider:
    def test_basic_completion(self, stub_server):
        url, server = stub_server
        provider = HttpProvider(url=url, model="ok")
        resp = provider.complete("prompt text")
        assert "Abnormal" in resp.text
        assert resp.token_likelihoods is None
        assert server.last_payload["temperature"] == 0.0
        assert server.last_payload["messages"][0]["content"] == "prompt text"

    def test_logprob_capture(self, stub_server):
        url, _ = stub_server
        provider = HttpProvider(url=url, model="ok")
        resp = provider.complete("prompt", capture_likelihoods=True)
        assert resp.token_likelihoods["Abnormal"] == pytest.approx(0.08, rel=1e-9)
        assert resp.token_likelihoods["Normal"] == pytest.approx(0.02, rel=1e-9)
        assert calibrate(resp) == pytest.approx(0.8, rel=1e-9)

    def test_auth_token_from_environment(self, stub_server, monkeypatch):
        url, server = stub_server
        monkeypatch.setenv("BATTDIAG_API_TOKEN", "sekret")
        HttpProvider(url=url, model="ok").complete("p")
        assert server.last_auth == "Bearer sekret"
        monkeypatch.delenv("BATTDIAG_API_TOKEN")
        HttpProvider(url=url, model="ok").complete("p")
        assert server.last_auth is None

    def test_http_error_raises_provider_error(self, stub_server):
        url, _ = stub_server
        with pytest.raises(ProviderError, match="500"):
            HttpProvider(url=url, model="error500").complete("p")

    def test_malformed_payload_raises(self, stub_server):
        url, _ = stub_server
        with pytest.raises(ProviderError, match="malformed"):
            HttpProvider(url=url, model="malformed").complete("p")

    def test_transport_failure_raises(self):
        provider = HttpProvider(url="http://127.0.0.1:9/nowhere", model="ok", timeout=0.2)
        with pytest.raises(ProviderError, match="transport"):
            provider.complete("p")
