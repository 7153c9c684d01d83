"""
HTTP surface of the chain-node RPC.

NodeRpcHandler exposes every node of a simulated network under
/nodes/<node_id>/ (submit, evidence, certificate, bct, root, proof) plus a
Prometheus text page on /metrics and a JSON /health probe. RemoteNode is the
client side: it implements the same query methods as an in-process ChainNode,
so a verifier can mix local and remote nodes in one chain view.

Terms travel as hex of their canonical encoding, wrapped in the EVIDENCE or
CERTIFICATE field so the receiver knows which one it got.
"""

import json
import logging
import os
from http.server import BaseHTTPRequestHandler
from threading import Lock
from typing import Any
from urllib.parse import parse_qs, urlsplit

import requests

from anchor import AnchorContract
from chain import ChainError, ChainNetwork, ChainNode, Term, term_field, term_from_field
from crypto import CryptoError, Digest, EncodingError, decode, encode
from merkle import MerkleError, MerkleProof
from reader import Evidence
from vendor import Certificate
from world import Timestamp

logger = logging.getLogger(__name__)

MAX_ANSWER_BYTES = 4 * 1024 * 1024
ANSWER_CHUNK_BYTES = 16 * 1024
MAX_REQUEST_BYTES = 1024 * 1024
DEFAULT_RPC_PORT = 8545
DEFAULT_RPC_TIMEOUT = 10


class NodeUnreachable(Exception):  # noqa: N818 -- a condition of the network, not of the request
    """Raised when a remote node cannot be reached or answers with something unparseable."""


def escape_label_value(value: str) -> str:
    """Escape a Prometheus label value (backslash, double quote, newline)."""
    return value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def term_to_hex(term: Term) -> str:
    return encode([term_field(term)]).hex()


def term_from_hex(text: str) -> Term:
    try:
        fields = decode(bytes.fromhex(text))
    except (ValueError, EncodingError) as e:
        raise ChainError(f"Malformed term encoding: {e}") from e
    if len(fields) != 1:
        raise ChainError(f"Expected exactly one term, got {len(fields)} fields")
    return term_from_field(*fields[0])


# -- Server -----------------------------------------------------------------


def render_metrics(network: ChainNetwork, contract: AnchorContract | None = None) -> str:
    """Prometheus text exposition of per-node ledger state and anchor gas."""
    output: list[str] = []
    gauges = [
        ("chain_height", "Number of blocks in the node's ledger", lambda n: len(n.ledger)),
        ("chain_known_terms", "Validated terms the node knows, confirmed or not", lambda n: len(n.known)),
        ("chain_pending_terms", "Validated terms waiting for the next block", lambda n: len(n.pending)),
        ("chain_forgotten_terms", "Terms the node rejected as invalid", lambda n: len(n.forgotten)),
        ("chain_node_correct", "Whether the node follows the protocol (1) or is faulty (0)", lambda n: int(n.correct)),
    ]
    for name, help_text, value in gauges:
        output.append(f"# HELP {name} {help_text}")
        output.append(f"# TYPE {name} gauge")
        for node in network.nodes.values():
            output.append(f'{name}{{node="{escape_label_value(node.node_id)}"}} {value(node)}')
        output.append("")

    if contract is not None:
        output.append("# HELP anchor_gas_used_total Gas consumed by the anchor contract, deployment included")
        output.append("# TYPE anchor_gas_used_total counter")
        output.append(f"anchor_gas_used_total {contract.gas_used}")
        output.append("")
        output.append("# HELP anchor_stores_total Anchor store calls by whether they wrote")
        output.append("# TYPE anchor_stores_total counter")
        output.append(f'anchor_stores_total{{result="first"}} {contract.first_stores}')
        output.append(f'anchor_stores_total{{result="redundant"}} {contract.redundant_stores}')
    return "\n".join(output).rstrip("\n") + "\n"


class NodeRpcHandler(BaseHTTPRequestHandler):
    """Serves the query surface of every node in `network`."""

    network: ChainNetwork | None = None
    contract: AnchorContract | None = None
    # Nodes process requests one at a time
    lock = Lock()
    timeout = 30

    def do_GET(self) -> None:
        url = urlsplit(self.path)
        if url.path == "/metrics":
            if self.network is None:
                self._send(503, "text/plain", b"no network loaded\n")
                return
            with self.lock:
                body = render_metrics(self.network, self.contract)
            self._send(200, "text/plain; version=0.0.4", body.encode("utf-8"))
            return
        if url.path == "/health":
            self._send_json(200, {"status": "up" if self.network is not None else "empty"})
            return
        self._dispatch(url.path, {k: v[-1] for k, v in parse_qs(url.query).items()})

    def do_POST(self) -> None:
        length = self.headers.get("Content-Length", "0")
        if not length.isdigit() or int(length) > MAX_REQUEST_BYTES:
            self._send_json(413, {"error": "request body too large"})
            return
        try:
            payload = json.loads(self.rfile.read(int(length)) or b"{}")
        except ValueError:
            self._send_json(400, {"error": "invalid JSON"})
            return
        if not isinstance(payload, dict):
            self._send_json(400, {"error": "expected a JSON object"})
            return
        self._dispatch(urlsplit(self.path).path, payload)

    def _dispatch(self, path: str, args: dict[str, Any]) -> None:
        parts = path.strip("/").split("/")
        if len(parts) != 3 or parts[0] != "nodes" or self.network is None:
            self._send_json(404, {"error": "not found"})
            return
        node = self.network.nodes.get(parts[1])
        if node is None:
            self._send_json(404, {"error": f"unknown node {parts[1]}"})
            return
        try:
            with self.lock:
                result = self._call(node, parts[2], args)
        except (KeyError, ValueError, ChainError, CryptoError) as e:
            self._send_json(400, {"error": str(e)})
            return
        if result is None:
            self._send_json(404, {"error": f"unknown method {parts[2]}"})
            return
        self._send_json(200, result)

    def _call(self, node: ChainNode, method: str, args: dict[str, Any]) -> dict[str, Any] | None:
        match method:
            case "submit":
                return {"outcome": str(node.submit(term_from_hex(args["term"]), int(args["t"])))}
            case "evidence":
                results = node.query_evidence(Digest.from_hex(args["key"]), int(args["t"]))
                return {"results": [{"evidence": term_to_hex(ev), "bct": bct} for ev, bct in results]}
            case "certificate":
                found = node.query_certificate(Digest.from_hex(args["key_digest"]))
                if found is None:
                    return {"certificate": None, "bct": None}
                return {"certificate": term_to_hex(found[0]), "bct": found[1]}
            case "bct":
                return {"bct": node.bct(Digest.from_hex(args["digest"]))}
            case "root":
                root = node.root_at(int(args["bct"]))
                return {"root": root.hex() if root else None}
            case "proof":
                answer = node.proof_of_existence(term_from_hex(args["term"]), int(args["bct"]))
                if answer is None:
                    return {"root": None, "proof": None}
                return {"root": answer[0].hex(), "proof": answer[1].to_bytes().hex()}
        return None

    def _send_json(self, status: int, body: dict[str, Any]) -> None:
        self._send(status, "application/json", json.dumps(body, sort_keys=True).encode("utf-8"))

    def _send(self, status: int, content_type: str, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        _ = self.wfile.write(body)

    def log_message(self, format: str, *args: Any) -> None:  # type: ignore[override]
        """Suppress default logging"""
        pass


# -- Client -----------------------------------------------------------------


class RemoteNode:
    """A chain node reached over HTTP; same query methods as ChainNode."""

    def __init__(
        self, base_url: str, node_id: str, timeout: int | None = None, max_answer_bytes: int | None = None
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.node_id = node_id
        self.timeout = timeout if timeout is not None else int(os.getenv("RPC_TIMEOUT", str(DEFAULT_RPC_TIMEOUT)))
        self.max_answer_bytes = (
            max_answer_bytes
            if max_answer_bytes is not None
            else int(os.getenv("RPC_MAX_ANSWER_BYTES", str(MAX_ANSWER_BYTES)))
        )
        self.session: requests.Session = requests.Session()

    def _request(self, method: str, name: str, params: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.base_url}/nodes/{self.node_id}/{name}"
        try:
            if method == "GET":
                response = self.session.get(url, params=params, timeout=self.timeout, stream=True)
            else:
                response = self.session.post(url, json=params, timeout=self.timeout, stream=True)
            response.raise_for_status()
            return self._answer(response)
        except requests.RequestException as e:
            raise NodeUnreachable(f"Node {self.node_id} at {self.base_url}: {e}") from e

    def _answer(self, response: requests.Response) -> dict[str, Any]:
        """The node's JSON object, buffered up to max_answer_bytes; a larger answer is cut off unread."""
        announced = response.headers.get("Content-Length", "")
        body = bytearray()
        try:
            if announced.isdigit() and int(announced) > self.max_answer_bytes:
                raise NodeUnreachable(
                    f"Node {self.node_id} announced an answer too large to buffer: {announced} bytes"
                )
            for chunk in response.iter_content(chunk_size=ANSWER_CHUNK_BYTES):
                body.extend(chunk)
                if len(body) > self.max_answer_bytes:
                    raise NodeUnreachable(
                        f"Node {self.node_id} streamed an answer too large to buffer: over {self.max_answer_bytes}"
                    )
        finally:
            response.close()
        try:
            answer = json.loads(body)
        except ValueError as e:
            raise NodeUnreachable(f"Node {self.node_id} sent invalid JSON: {e}") from e
        if not isinstance(answer, dict):
            raise NodeUnreachable(f"Node {self.node_id} sent {type(answer).__name__}, expected an object")
        return answer

    def submit(self, term: Term, t: Timestamp) -> str:
        return self._request("POST", "submit", {"term": term_to_hex(term), "t": t})["outcome"]

    def query_evidence(self, key: Digest, t: Timestamp) -> list[tuple[Evidence, Timestamp]]:
        body = self._request("GET", "evidence", {"key": key.hex(), "t": t})
        results = []
        try:
            for item in body.get("results", []):
                term = term_from_hex(item["evidence"])
                if isinstance(term, Evidence):
                    results.append((term, int(item["bct"])))
        except (KeyError, TypeError, ValueError, ChainError) as e:
            raise NodeUnreachable(f"Node {self.node_id} sent a malformed evidence list: {e}") from e
        return results

    def query_certificate(self, key_digest: Digest) -> tuple[Certificate, Timestamp] | None:
        body = self._request("GET", "certificate", {"key_digest": key_digest.hex()})
        if body.get("certificate") is None:
            return None
        try:
            term = term_from_hex(body["certificate"])
        except ChainError as e:
            raise NodeUnreachable(f"Node {self.node_id} sent a malformed certificate: {e}") from e
        return (term, int(body["bct"])) if isinstance(term, Certificate) else None

    def bct(self, term_digest: Digest) -> Timestamp | None:
        value = self._request("GET", "bct", {"digest": term_digest.hex()}).get("bct")
        return None if value is None else int(value)

    def root_at(self, bct: Timestamp) -> Digest | None:
        value = self._request("GET", "root", {"bct": bct}).get("root")
        try:
            return None if value is None else Digest.from_hex(value)
        except CryptoError as e:
            raise NodeUnreachable(f"Node {self.node_id} sent a malformed root: {e}") from e

    def proof_of_existence(self, term: Term, bct: Timestamp) -> tuple[Digest, MerkleProof] | None:
        body = self._request("POST", "proof", {"term": term_to_hex(term), "bct": bct})
        if body.get("root") is None or body.get("proof") is None:
            return None
        try:
            return Digest.from_hex(body["root"]), MerkleProof.from_bytes(bytes.fromhex(body["proof"]))
        except (ValueError, CryptoError, MerkleError) as e:
            raise NodeUnreachable(f"Node {self.node_id} sent a malformed proof: {e}") from e
