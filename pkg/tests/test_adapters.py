import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

import aide.adapters as adapters
from aide.adapters import (
    CallLog,
    RemoteAdapterConfig,
    RemoteCaptioner,
    RemoteCropClassifier,
    RemoteEmbedder,
    RemoteProposer,
    RemoteScenarioGenerator,
)
from aide.core import BoundingBox
from aide.errors import AdapterUnavailable


class StubHandler(BaseHTTPRequestHandler):
    server_version = "stub"

    def log_message(self, *args):
        pass

    def _read_json(self):
        length = int(self.headers.get("Content-Length", 0))
        return json.loads(self.rfile.read(length) or b"{}")

    def _send(self, status, payload):
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        self.server.hits.append(("GET", self.path, self.headers.get("Authorization")))
        if self.path == "/meta":
            self._send(200, {"dimension": 8, "service": "stub"})
        else:
            self._send(404, {"error": "nope"})

    def do_POST(self):
        payload = self._read_json()
        self.server.hits.append(("POST", self.path, self.headers.get("Authorization")))
        if self.server.fail_next > 0:
            self.server.fail_next -= 1
            self._send(500, {"error": "transient"})
            return
        if self.path == "/caption":
            self._send(200, {"caption": f"An image with car ({payload['image_id']})"})
        elif self.path == "/embed":
            vec = [1.0] * 8 if payload["kind"] == "text" else [0.5] * 8
            self._send(200, {"vector": vec})
        elif self.path == "/propose":
            self._send(200, {"boxes": [
                {"x_min": 1, "y_min": 2, "x_max": 11, "y_max": 12, "label": "car", "score": 0.8}
            ]})
        elif self.path == "/classify":
            self._send(200, {"scores": [1.0 / len(payload["labels"])] * len(payload["labels"])})
        elif self.path == "/scenarios":
            self._send(200, {"descriptions": [
                f"a {payload['category']} scene {i}" for i in range(payload["n"])
            ]})
        else:
            self._send(404, {"error": "nope"})


@pytest.fixture()
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), StubHandler)
    server.hits = []
    server.fail_next = 0
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()


@pytest.fixture()
def config(stub_server):
    host, port = stub_server.server_address
    return RemoteAdapterConfig(base_url=f"http://{host}:{port}", timeout_s=5.0, retries=2)


@pytest.fixture(autouse=True)
def fast_backoff(monkeypatch):
    monkeypatch.setattr(adapters, "BACKOFF_BASE_S", 0.01)


class TestRemoteClients:
    def test_caption(self, config):
        out = RemoteCaptioner(config).describe("img7")
        assert out == "An image with car (img7)"

    def test_embed_both_kinds(self, config):
        embedder = RemoteEmbedder(config)
        np.testing.assert_array_equal(embedder.embed_text("hello"), np.ones(8))
        np.testing.assert_array_equal(embedder.embed_image("img0"), np.full(8, 0.5))

    def test_propose(self, config):
        out = RemoteProposer(config).propose("img0", ["car"])
        assert out == [(BoundingBox(1, 2, 11, 12), "car", 0.8)]

    def test_classify_length_checked(self, config):
        scores = RemoteCropClassifier(config).classify("img0", BoundingBox(0, 0, 5, 5),
                                                       ["a", "b", "c"])
        assert scores == pytest.approx([1 / 3] * 3)

    def test_scenarios(self, config):
        out = RemoteScenarioGenerator(config).generate("trailer", 3)
        assert len(out) == 3 and all("trailer" in s for s in out)

    def test_meta(self, config):
        assert RemoteCaptioner(config).meta()["dimension"] == 8


class TestRetries:
    def test_transient_failures_retried(self, stub_server, config):
        stub_server.fail_next = 2  # retries=2 -> third attempt succeeds
        out = RemoteCaptioner(config).describe("img1")
        assert "img1" in out
        assert len([h for h in stub_server.hits if h[1] == "/caption"]) == 3

    def test_exhausted_retries_surface_adapter_unavailable(self, stub_server, config):
        stub_server.fail_next = 10
        with pytest.raises(AdapterUnavailable):
            RemoteCaptioner(config).describe("img1")
        # exactly 1 + retries attempts were made
        assert len([h for h in stub_server.hits if h[1] == "/caption"]) == 3

    def test_unreachable_host(self):
        config = RemoteAdapterConfig(base_url="http://127.0.0.1:9", timeout_s=0.2, retries=1)
        with pytest.raises(AdapterUnavailable):
            RemoteCaptioner(config).describe("x")


class TestAuthAndLog:
    def test_bearer_token_sent(self, stub_server, config, monkeypatch):
        monkeypatch.setenv("AIDE_TEST_TOKEN", "sesame")
        cfg = RemoteAdapterConfig(base_url=config.base_url, token_env="AIDE_TEST_TOKEN")
        RemoteCaptioner(cfg).describe("img0")
        auth = [h[2] for h in stub_server.hits if h[1] == "/caption"]
        assert auth == ["Bearer sesame"]

    def test_call_log_records(self, config):
        log = CallLog()
        RemoteCaptioner(config, call_log=log).describe("img0")
        RemoteEmbedder(config, call_log=log).embed_text("hi")
        records = log.records()
        assert [r.kind for r in records] == ["captioner", "embedder"]
        assert all(r.payload_bytes > 0 for r in records)
        assert log.total_gpu_seconds() >= 0

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            RemoteAdapterConfig(base_url="http://x", timeout_s=0)
        with pytest.raises(ValueError):
            RemoteAdapterConfig(base_url="http://x", retries=-1)
