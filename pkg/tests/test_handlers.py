"""
Tests for the HTTP boundary: the real server class serving real requests.

These spin up the same server construction cmd_serve uses (ThreadingHTTPServer
with NodeRpcHandler) on an ephemeral port, then query it through RemoteNode,
so both ends of the node RPC are exercised together.
"""

import json
import threading

import pytest
import requests

import app
import merkle
from crypto import hash_bytes
from rpc import NodeRpcHandler, NodeUnreachable, RemoteNode
from service import provision_n
from verifier import ChainView, verify_readout


@pytest.fixture
def server_url(observed):
    """Serve the observed pipeline's chain on an ephemeral port."""
    pipeline, *_ = observed
    previous_network, previous_contract = NodeRpcHandler.network, NodeRpcHandler.contract
    NodeRpcHandler.network = pipeline.network
    NodeRpcHandler.contract = None

    server = app.ThreadingHTTPServer(("127.0.0.1", 0), NodeRpcHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)
        NodeRpcHandler.network, NodeRpcHandler.contract = previous_network, previous_contract


@pytest.mark.integration
class TestHTTPBoundary:
    def test_health(self, server_url):
        response = requests.get(f"{server_url}/health", timeout=5)
        assert response.status_code == 200
        assert response.headers["Content-Type"].startswith("application/json")
        assert response.json() == {"status": "up"}

    def test_metrics(self, server_url):
        response = requests.get(f"{server_url}/metrics", timeout=5)
        assert response.status_code == 200
        assert response.headers["Content-Type"].startswith("text/plain")
        assert 'chain_height{node="node-0"} 2' in response.text

    @pytest.mark.parametrize("path", ["/nope", "/nodes/node-9/bct", "/nodes/node-0/teleport"])
    def test_not_found(self, server_url, path):
        assert requests.get(f"{server_url}{path}", timeout=5).status_code == 404

    def test_bad_arguments(self, server_url):
        response = requests.get(f"{server_url}/nodes/node-0/bct", params={"digest": "zz"}, timeout=5)
        assert response.status_code == 400
        assert "error" in response.json()

    def test_invalid_json_body(self, server_url):
        response = requests.post(f"{server_url}/nodes/node-0/submit", data=b"{oops", timeout=5)
        assert response.status_code == 400

    def test_non_object_body(self, server_url):
        response = requests.post(f"{server_url}/nodes/node-0/submit", data=json.dumps([1]), timeout=5)
        assert response.status_code == 400

    def test_log_message_is_suppressed(self):
        handler = NodeRpcHandler.__new__(NodeRpcHandler)
        assert handler.log_message("test format %s %s", "arg1", "arg2") is None

    def test_metrics_without_network(self, monkeypatch):
        monkeypatch.setattr(NodeRpcHandler, "network", None)
        server = app.ThreadingHTTPServer(("127.0.0.1", 0), NodeRpcHandler)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            url = f"http://127.0.0.1:{server.server_address[1]}"
            assert requests.get(f"{url}/metrics", timeout=5).status_code == 503
            assert requests.get(f"{url}/health", timeout=5).json() == {"status": "empty"}
        finally:
            server.shutdown()
            server.server_close()
            thread.join(timeout=5)


@pytest.mark.integration
class TestRemoteNode:
    def test_queries_match_the_local_node(self, server_url, observed):
        pipeline, _, readout, evidence = observed
        remote = RemoteNode(server_url, "node-1")
        local = pipeline.network.node("node-1")
        assert remote.query_evidence(readout.h1, 31) == [(evidence, 30)]
        assert remote.query_certificate(pipeline.reader.id) == (pipeline.certificate, 15)
        assert remote.bct(evidence.digest) == 30
        assert remote.root_at(30) == local.root_at(30)
        assert remote.root_at(999) is None

    def test_proof_of_existence(self, server_url, observed):
        _, _, _, evidence = observed
        remote = RemoteNode(server_url, "node-0")
        root, proof = remote.proof_of_existence(evidence, 30)
        assert merkle.verify_proof(evidence.digest, proof, root)
        assert remote.proof_of_existence(evidence, 15) is None

    def test_absent_answers(self, server_url):
        remote = RemoteNode(server_url, "node-0")
        assert remote.query_certificate(hash_bytes(b"nobody")) is None
        assert remote.bct(hash_bytes(b"nothing")) is None
        assert remote.query_evidence(hash_bytes(b"no key"), 100) == []

    def test_submit(self, server_url, observed):
        pipeline, *_ = observed
        n = provision_n(pipeline.service, pipeline.tag.id, [])
        _, evidence = pipeline.observe(40, n)
        assert RemoteNode(server_url, "node-2").submit(evidence, 41) == "accepted"
        assert evidence.digest in pipeline.network.node("node-2").known

    def test_mixed_view_verifies(self, server_url, observed):
        pipeline, _, readout, _ = observed
        nodes = [
            RemoteNode(server_url, "node-0"),
            pipeline.network.node("node-1"),
            RemoteNode(server_url, "node-2"),
        ]
        verdict = verify_readout(readout, ChainView(nodes=nodes, pki=pipeline.pki), 40)
        assert verdict.authentic
        assert verdict.bct == 30

    def test_unknown_node_is_unreachable(self, server_url):
        with pytest.raises(NodeUnreachable):
            RemoteNode(server_url, "node-9").bct(hash_bytes(b"x"))

    def test_connection_refused(self):
        with pytest.raises(NodeUnreachable):
            RemoteNode("http://127.0.0.1:9", "node-0", timeout=1).root_at(15)

    def test_timeout_from_env(self, monkeypatch):
        monkeypatch.setenv("RPC_TIMEOUT", "3")
        assert RemoteNode("http://localhost:1", "node-0").timeout == 3

    def test_oversized_response(self, mocker):
        remote = RemoteNode("http://node.invalid", "node-0")
        response = mocker.Mock()
        response.headers = {"Content-Length": str(10**9)}
        mocker.patch.object(remote.session, "get", return_value=response)
        with pytest.raises(NodeUnreachable, match="announced an answer too large"):
            remote.bct(hash_bytes(b"x"))
        response.close.assert_called_once()
        response.iter_content.assert_not_called()

    def test_streamed_body_over_limit(self, mocker):
        remote = RemoteNode("http://node.invalid", "node-0")
        response = mocker.Mock()
        response.headers = {}
        response.iter_content.return_value = iter([b"x" * 65536] * 100)
        mocker.patch.object(remote.session, "get", return_value=response)
        with pytest.raises(NodeUnreachable, match="streamed an answer too large"):
            remote.bct(hash_bytes(b"x"))
        response.close.assert_called_once()

    def test_answer_limit_is_inclusive(self, mocker):
        answer = b'{"bct": 15}'
        remote = RemoteNode("http://node.invalid", "node-0", max_answer_bytes=len(answer))
        response = mocker.Mock()
        response.headers = {"Content-Length": str(len(answer))}
        response.iter_content.return_value = iter([answer[:4], answer[4:]])
        mocker.patch.object(remote.session, "get", return_value=response)
        assert remote.bct(hash_bytes(b"x")) == 15
        response.close.assert_called_once()

    def test_answer_limit_from_env(self, monkeypatch, mocker):
        monkeypatch.setenv("RPC_MAX_ANSWER_BYTES", "8")
        remote = RemoteNode("http://node.invalid", "node-0")
        assert remote.max_answer_bytes == 8
        response = mocker.Mock()
        response.headers = {}
        response.iter_content.return_value = iter([b'{"bct": 15}'])
        mocker.patch.object(remote.session, "get", return_value=response)
        with pytest.raises(NodeUnreachable, match="over 8"):
            remote.bct(hash_bytes(b"x"))

    def test_answer_must_be_an_object(self, mocker):
        remote = RemoteNode("http://node.invalid", "node-0")
        response = mocker.Mock()
        response.headers = {}
        response.iter_content.return_value = iter([b"[15]"])
        mocker.patch.object(remote.session, "get", return_value=response)
        with pytest.raises(NodeUnreachable, match="expected an object"):
            remote.bct(hash_bytes(b"x"))

    def test_malformed_json(self, mocker):
        remote = RemoteNode("http://node.invalid", "node-0")
        response = mocker.Mock()
        response.headers = {}
        response.iter_content.return_value = iter([b"not json"])
        mocker.patch.object(remote.session, "get", return_value=response)
        with pytest.raises(NodeUnreachable, match="invalid JSON"):
            remote.root_at(15)

    def test_malformed_evidence_list(self, mocker):
        remote = RemoteNode("http://node.invalid", "node-0")
        response = mocker.Mock()
        response.headers = {}
        response.iter_content.return_value = iter([b'{"results": [{"evidence": "00", "bct": 1}]}'])
        mocker.patch.object(remote.session, "get", return_value=response)
        with pytest.raises(NodeUnreachable, match="malformed"):
            remote.query_evidence(hash_bytes(b"x"), 10)
