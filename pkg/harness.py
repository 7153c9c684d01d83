"""
Scenario driver: deterministic, seeded runs of the whole logistics network.

A scenario is a JSON document declaring the actors (locations, vendors,
services, clients, readers, tags, chain nodes and their faults) and an
ordered event timeline. Between events the clock moves forward block by
block: at every block-interval boundary reader outboxes are flushed through a
lossy network, the chain gossips until quiet and a block is sealed.
Verification events carry the outcome they expect; invariants (transcript
confidentiality, atomicity, node agreement, ledger integrity) are checked
after the last event.

Every run emits a JSON-lines transcript without wall-clock fields, so the
same scenario and seed always produce the same bytes.

Also here: the gas-cost model of the anchoring contract and the
confirmation-time lookup per gas-price policy.
"""

import json
import logging
import random
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from anchor import (
    DEPLOY_GAS,
    STORE_GAS,
    AnchorContract,
    AnchoredWindow,
    EvidenceService,
    aggregate_and_anchor,
    reconfirm,
    verify_anchored,
)
from chain import ChainNetwork, ChainNode, FaultMode, LieMode, SubmitOutcome, Term, verify_ledger
from crypto import Digest, EncodingError, FieldTag, PrivateKey, decode, encode, hash_bytes, sign
from reader import (
    Delivery,
    DeliveryKind,
    Evidence,
    Readout,
    Reader,
    compute_h1,
    compute_h2,
    evidence_for,
    falsify,
    flush_outbox,
    forget_expired,
    observe,
    restart,
    signed_message,
    tamper,
)
from service import (
    Client,
    Dishonesty,
    LogisticsService,
    fabricate_readout,
    ingest_readout,
    provision_n,
    query_readouts,
    set_dishonesty,
)
from tag import create_tag, move_tag
from vendor import Certificate, PkiStub, Vendor, issue_certificate
from verifier import (
    ChainView,
    Verdict,
    audit_evidence_service,
    audit_service_answer,
    check_alibi,
    check_elapsed_time,
    validate_term,
    verify_readout,
)
from world import ConfigurationError, Location, SimulationConfig, Timestamp, World

logger = logging.getLogger(__name__)

GAS_REFERENCE_PATH = Path(__file__).parent / "fixtures" / "gas_reference.json"
SCENARIO_DIR = Path(__file__).parent / "scenarios"
DEFAULT_PKI_VALID_TO = 10**9
DRAIN_ROUNDS = 1000
DEFAULT_INVARIANTS = ("confidentiality",)
INVARIANTS = ("confidentiality", "atomicity", "agreement", "ledger")


class ScenarioError(ConfigurationError):
    """Raised when a scenario is malformed or references something it never declared."""


class ParameterError(ConfigurationError):
    """Raised for out-of-range gas-model inputs or unknown policies."""


# -- Scenario model ---------------------------------------------------------


@dataclass
class Scenario:
    name: str
    seed: int = 0
    description: str = ""
    config: dict[str, Any] = field(default_factory=dict)
    chain: dict[str, Any] = field(default_factory=dict)
    network: dict[str, Any] = field(default_factory=dict)
    locations: list[dict[str, Any]] = field(default_factory=list)
    vendors: list[dict[str, Any]] = field(default_factory=list)
    services: list[dict[str, Any]] = field(default_factory=list)
    clients: list[dict[str, Any]] = field(default_factory=list)
    readers: list[dict[str, Any]] = field(default_factory=list)
    tags: list[dict[str, Any]] = field(default_factory=list)
    evidence_service: dict[str, Any] | None = None
    events: list[dict[str, Any]] = field(default_factory=list)
    invariants: list[str] = field(default_factory=lambda: list(DEFAULT_INVARIANTS))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ScenarioError(f"Unknown scenario keys: {sorted(unknown)}")
        if "name" not in data:
            raise ScenarioError("Scenario needs a name")
        return cls(**data)


def load_scenario(path: Path) -> Scenario:
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise ScenarioError(f"Cannot load scenario {path}: {e}") from e
    if not isinstance(data, dict):
        raise ScenarioError(f"Scenario {path} must be a JSON object")
    return Scenario.from_dict(data)


def parse_fault(text: str) -> tuple[FaultMode, LieMode | None]:
    """'silent', 'correct', or 'lying:<withhold|fabricate|wrong_term|delete>'."""
    mode, _, lie = text.partition(":")
    try:
        fault = FaultMode(mode)
        lie_mode = LieMode(lie) if lie else None
    except ValueError as e:
        raise ScenarioError(f"Invalid fault {text!r}: {e}") from e
    if fault == FaultMode.LYING and lie_mode is None:
        raise ScenarioError(f"Lying fault {text!r} needs a mode, e.g. lying:withhold")
    return fault, lie_mode


def parse_faults(text: str) -> dict[str, str]:
    """CLI form 'node-1=silent,node-2=lying:fabricate'."""
    faults: dict[str, str] = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        node_id, sep, fault = item.partition("=")
        if not sep:
            raise ScenarioError(f"Fault assignment {item!r} must look like node-1=silent")
        parse_fault(fault)
        faults[node_id] = fault
    return faults


# -- Transcript -------------------------------------------------------------


@dataclass
class Transcript:
    """Structured run log; one JSON object per line, keys sorted."""

    events: list[dict[str, Any]] = field(default_factory=list)

    def emit(self, t: Timestamp, event: str, **fields: Any) -> None:
        self.events.append({"t": t, "event": event, **fields})

    def lines(self) -> list[str]:
        return [json.dumps(event, sort_keys=True) for event in self.events]

    def text(self) -> str:
        return "".join(f"{line}\n" for line in self.lines())

    def digest(self) -> Digest:
        return hash_bytes(self.text().encode("utf-8"))


@dataclass
class CheckResult:
    name: str
    expected: Any
    actual: Any
    passed: bool


@dataclass
class ScenarioResult:
    name: str
    seed: int
    transcript: Transcript
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> list[CheckResult]:
        return [check for check in self.checks if not check.passed]


# -- Confidentiality and atomicity ------------------------------------------


@dataclass(frozen=True)
class Leak:
    kind: str
    readout: str
    message_index: int


def readout_secrets(ro: Readout) -> dict[str, bytes]:
    """Plaintext that must never reach a chain node, by kind."""
    secrets = {
        "n": ro.n,
        "tag_id": ro.tag_id,
        "timestamp": encode([(FieldTag.TIMESTAMP, ro.t)]),
        "location": ro.loc.encode("utf-8"),
    }
    if ro.data:
        secrets["data"] = ro.data
    return secrets


def scan_transcript(messages: Iterable[bytes], readouts: Iterable[Readout]) -> list[Leak]:
    """Search every chain-bound message for any readout's plaintext fields."""
    secrets = [(kind, ro.digest.short(), value) for ro in readouts for kind, value in readout_secrets(ro).items()]
    leaks = []
    for index, message in enumerate(messages):
        for kind, name, value in secrets:
            if value in message:
                leaks.append(Leak(kind=kind, readout=name, message_index=index))
    return leaks


@dataclass
class AtomicityReport:
    readouts_without_evidence: list[tuple[Digest, Digest, Digest]]
    evidence_without_readout: list[tuple[Digest, Digest, Digest]]
    # Readouts whose evidence every correct node judged and forgot
    refused: list[tuple[Digest, Digest, Digest]] = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return not self.readouts_without_evidence and not self.evidence_without_readout


def submitted_evidences(messages: Iterable[bytes], reader_ids: set[Digest]) -> list[Evidence]:
    """Distinct evidences that reached any chain node as a submission, from readers we know."""
    seen: dict[Digest, Evidence] = {}
    for message in messages:
        try:
            fields = decode(message)
        except EncodingError:
            continue
        if len(fields) != 1 or fields[0][0] != FieldTag.EVIDENCE:
            continue
        try:
            evidence = Evidence.from_bytes(fields[0][1])
        except EncodingError:
            continue
        if evidence.key_digest in reader_ids:
            seen.setdefault(evidence.digest, evidence)
    return list(seen.values())


def reader_exposure(messages: Iterable[bytes], reader_ids: set[Digest]) -> Counter[Digest]:
    """
    Evidences per reader key digest visible on the chain. The digest is public
    by construction, so an observer can count and time one reader's activity
    even though every readout field stays hidden.
    """
    return Counter(ev.key_digest for ev in submitted_evidences(messages, reader_ids))


def check_atomicity(services: Iterable[LogisticsService], nodes: Iterable[ChainNode]) -> AtomicityReport:
    """
    Stored readouts and the evidences correct chain nodes know must pair up
    one-to-one by (h1, h2, reader key digest). A node that only logged an
    evidence without accepting it does not count. Readouts whose evidence was
    forgotten by every correct node were judged and rejected on chain; they
    are reported apart.
    """
    correct = [node for node in nodes if node.correct]
    known = {digest: term for node in correct for digest, term in node.known.items() if isinstance(term, Evidence)}
    readouts: Counter[tuple[Digest, Digest, Digest]] = Counter()
    refused: list[tuple[Digest, Digest, Digest]] = []
    for service in services:
        for ro in service.all_readouts():
            key = (ro.h1, ro.h2, ro.key_digest)
            digest = evidence_for(ro).digest
            if correct and digest not in known and all(digest in node.forgotten for node in correct):
                refused.append(key)
            else:
                readouts[key] += 1
    evidences = Counter((ev.h1, ev.h2, ev.key_digest) for ev in known.values())
    return AtomicityReport(
        readouts_without_evidence=sorted((readouts - evidences).elements()),
        evidence_without_readout=sorted((evidences - readouts).elements()),
        refused=sorted(refused),
    )


# -- Simulation -------------------------------------------------------------


class Simulation:
    """One run of a scenario; build() wires the actors, run() plays the timeline."""

    def __init__(
        self,
        scenario: Scenario,
        seed: int | None = None,
        config_overrides: dict[str, Any] | None = None,
        chain_overrides: dict[str, Any] | None = None,
    ) -> None:
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        config = SimulationConfig.from_env().with_overrides(scenario.config)
        self.config = config.with_overrides(config_overrides or {})
        self.chain_spec = {**scenario.chain, **(chain_overrides or {})}
        self.world = World(config=self.config, seed=self.seed)
        self.net_rng = random.Random(f"{self.seed}:network")
        self.drop_rate = float(scenario.network.get("drop_rate", 0.0))
        self.ack_loss_rate = float(scenario.network.get("ack_loss_rate", 0.0))
        self.transcript = Transcript()
        self.checks: list[CheckResult] = []
        self.pki = PkiStub()
        self.contract = AnchorContract(block_interval=self.config.block_interval)
        self.evidence_service: EvidenceService | None = None
        self.anchor_every = 0
        self.reader_vendor: dict[str, str] = {}
        self.certificates: dict[str, Certificate] = {}
        self.numbers: dict[str, tuple[bytes, str, str]] = {}
        self.readouts: dict[str, Readout] = {}
        self.answers: dict[str, tuple[Digest, list[Readout]]] = {}
        self.windows: dict[str, AnchoredWindow] = {}
        self.stolen: dict[str, PrivateKey] = {}
        self.network: ChainNetwork

    # -- Setup --------------------------------------------------------------

    def build(self) -> "Simulation":
        s = self.scenario
        for spec in s.locations:
            coordinates = spec.get("coordinates")
            self.world.add_location(
                Location(
                    label=spec["label"],
                    coordinates=tuple(coordinates) if coordinates is not None else None,
                    logistical=spec.get("logistical", True),
                )
            )
        for spec in s.vendors:
            vendor = Vendor.create(spec["name"], f"{self.seed}:vendor:{spec['name']}".encode())
            self.world.add_vendor(spec["name"], vendor)
            self.pki.register(vendor.keypair.public, spec.get("pki_valid_from", 0), spec.get("pki_valid_to", DEFAULT_PKI_VALID_TO))

        faults = {node_id: parse_fault(text) for node_id, text in self.chain_spec.get("faults", {}).items()}
        try:
            self.network = ChainNetwork.build(
                count=int(self.chain_spec.get("nodes", 3)),
                pki=self.pki,
                topology=self.chain_spec.get("topology", "full"),
                faults=faults,
                block_interval=self.config.block_interval,
            )
        except ValueError as e:
            raise ScenarioError(str(e)) from e
        self.world.chain = self.network

        for spec in s.services:
            self.world.add_service(spec["name"], LogisticsService.create(spec["name"], self.seed, self.config.nonce_scope))
        for spec in s.clients:
            self.world.add_client(spec["name"], Client(spec["name"]))
        for spec in s.readers:
            name = spec["name"]
            entry = spec.get("chain_entry", "node-0")
            if entry not in self.network.nodes:
                raise ScenarioError(f"Reader {name!r} enters the chain at unknown node {entry!r}")
            if spec.get("vendor") not in self.world.vendors:
                raise ScenarioError(f"Reader {name!r} names unknown vendor {spec.get('vendor')!r}")
            reader = Reader.manufacture(
                name,
                f"{self.seed}:reader:{name}".encode(),
                owner=spec["service"],
                location=self.world.location(spec["location"]),
                chain_entry=entry,
                forget_after=self.config.forget_after,
            )
            self.world.add_reader(name, reader)
            self.world.services[spec["service"]].own(reader.id)
            self.reader_vendor[name] = spec["vendor"]
        for spec in s.tags:
            create_tag(self.world, self.world.location(spec["location"]), spec["name"])

        if s.evidence_service is not None:
            name = s.evidence_service.get("name", "evidence-service")
            self.evidence_service = EvidenceService.create(name, f"{self.seed}:evidence:{name}".encode())
            self.anchor_every = int(s.evidence_service.get("anchor_every", 0))
            if self.anchor_every % self.config.block_interval:
                raise ScenarioError("anchor_every must be a multiple of the block interval")

        self._check_references()
        self.transcript.emit(
            0,
            "setup",
            scenario=s.name,
            seed=self.seed,
            nodes=sorted(self.network.nodes),
            faults={node_id: str(node.fault_mode) for node_id, node in sorted(self.network.nodes.items())},
            readers=sorted(self.world.readers),
            tags=sorted(self.world.tags),
        )
        return self

    def _check_references(self) -> None:
        """Fail before anything runs if an event names an actor or result that is never declared."""
        w = self.world
        registries = {
            "reader": w.readers,
            "tag": w.tags,
            "service": w.services,
            "client": w.clients,
            "vendor": w.vendors,
            "node": self.network.nodes,
        }
        results: set[str] = set()
        last = 0
        for index, event in enumerate(self.scenario.events):
            kind = event.get("do")
            if kind not in EVENT_HANDLERS:
                raise ScenarioError(f"Event {index}: unknown action {kind!r}")
            at = event.get("at")
            if not isinstance(at, int) or at < last:
                raise ScenarioError(f"Event {index} ({kind}): 'at' must be an integer not before {last}")
            last = at
            for key, registry in registries.items():
                if key in event and event[key] not in registry:
                    raise ScenarioError(f"Event {index} ({kind}): unknown {key} {event[key]!r}")
            for name in event.get("clients", []):
                if name not in w.clients:
                    raise ScenarioError(f"Event {index} ({kind}): unknown client {name!r}")
            for name in event.get("nodes", []):
                if name not in self.network.nodes:
                    raise ScenarioError(f"Event {index} ({kind}): unknown node {name!r}")
            if "to" in event and event["to"] not in w.locations:
                raise ScenarioError(f"Event {index} ({kind}): unknown location {event['to']!r}")
            for ref in self._references(event):
                if ref not in results:
                    raise ScenarioError(f"Event {index} ({kind}): {ref!r} is used before it is defined")
            if "as" in event:
                results.add(event["as"])
            if kind in ("anchor", "omit", "reconfirm", "verify_anchored") and self.evidence_service is None:
                raise ScenarioError(f"Event {index} ({kind}) needs an evidence_service declaration")
        unknown = set(self.scenario.invariants) - set(INVARIANTS)
        if unknown:
            raise ScenarioError(f"Unknown invariants: {sorted(unknown)}")

    @staticmethod
    def _references(event: dict[str, Any]) -> list[str]:
        refs = [event[key] for key in ("n", "readout", "answer", "window") if key in event]
        term = event.get("term")
        if isinstance(term, dict):
            refs += [value for key, value in term.items() if key in ("readout", "evidence")]
        return refs

    # -- Clock and delivery -------------------------------------------------

    def advance_to(self, t: Timestamp) -> None:
        """Move the clock to t, sealing a block at every boundary passed on the way."""
        if t < self.world.clock:
            raise ScenarioError(f"Cannot go back from t={self.world.clock} to t={t}")
        boundary = self.network.next_boundary(self.world.clock)
        while boundary <= t:
            self.world.advance_clock(boundary - self.world.clock)
            self._at_boundary(boundary)
            boundary += self.config.block_interval
        self.world.advance_clock(t - self.world.clock)

    def _at_boundary(self, t: Timestamp) -> None:
        self.flush(t)
        self.network.gossip_until_quiet(t)
        block = self.network.create_block(t)
        if block.terms:
            self.transcript.emit(
                t, "block", height=block.height, terms=len(block.terms), root=block.merkle_root.hex()
            )
        for reader in self.world.readers.values():
            forget_expired(reader, t)
        if self.evidence_service is not None and self.anchor_every and t % self.anchor_every == 0:
            self._anchor(t, None)

    def flush(self, t: Timestamp) -> int:
        delivered = 0
        for name in sorted(self.world.readers):
            delivered += flush_outbox(self.world.readers[name], lambda d: self._deliver(d, t))
        return delivered

    def _deliver(self, delivery: Delivery, t: Timestamp) -> bool:
        """Lossy link: a message may be dropped, or arrive with its acknowledgement lost."""
        dropped = self.net_rng.random() < self.drop_rate
        ack_lost = self.net_rng.random() < self.ack_loss_rate
        if dropped:
            return False
        if delivery.kind == DeliveryKind.READOUT:
            assert isinstance(delivery.payload, Readout)
            outcome = ingest_readout(self.world.services[delivery.destination], delivery.payload, t)
        else:
            assert isinstance(delivery.payload, Evidence)
            outcome = self.network.submit(delivery.destination, delivery.payload, t)
            if self.evidence_service is not None:
                self.evidence_service.collect(delivery.payload, t)
        self.transcript.emit(
            t,
            "deliver",
            kind=str(delivery.kind),
            destination=delivery.destination,
            pair=delivery.pair_id,
            digest=delivery.content_digest.hex(),
            outcome=str(outcome),
            attempt=delivery.attempts,
        )
        if delivery.kind == DeliveryKind.EVIDENCE and outcome == SubmitOutcome.FORGOTTEN:
            return self._reroute(delivery)
        return not ack_lost

    def _reroute(self, delivery: Delivery) -> bool:
        """Point a refused evidence at the next node that has not answered it; True once none is left."""
        delivery.refused_by.append(delivery.destination)
        untried = [node_id for node_id in sorted(self.network.nodes) if node_id not in delivery.refused_by]
        if not untried:
            logger.warning(
                f"Evidence {delivery.content_digest.short()} (pair {delivery.pair_id}) refused by every chain node"
            )
            return True
        logger.debug(
            f"Evidence {delivery.content_digest.short()} refused by {delivery.destination}, retrying at {untried[0]}"
        )
        delivery.destination = untried[0]
        return False

    def drain(self, t: Timestamp) -> None:
        """Retransmit until every outbox is empty, then let gossip settle."""
        for _ in range(DRAIN_ROUNDS):
            if not any(reader.outbox for reader in self.world.readers.values()):
                break
            self.flush(t)
        else:
            raise ScenarioError(f"Outboxes still not empty after {DRAIN_ROUNDS} retransmission rounds")
        self.network.gossip_until_quiet(t)

    # -- Helpers ------------------------------------------------------------

    def _number(self, name: str) -> tuple[bytes, str, str]:
        return self.numbers[name]

    def _term(self, ref: dict[str, str]) -> Readout | Evidence | Certificate:
        if "readout" in ref:
            return self.readouts[ref["readout"]]
        if "evidence" in ref:
            return evidence_for(self.readouts[ref["evidence"]])
        if "certificate" in ref:
            try:
                return self.certificates[ref["certificate"]]
            except KeyError as e:
                raise ScenarioError(f"Reader {ref['certificate']!r} was never certified") from e
        raise ScenarioError(f"Cannot resolve term reference {ref!r}")

    def _chain_term(self, ref: dict[str, str]) -> Term:
        term = self._term(ref)
        return evidence_for(term) if isinstance(term, Readout) else term

    def view(self, event: dict[str, Any]) -> ChainView:
        node_ids = event.get("nodes") or sorted(self.network.nodes)
        return ChainView(
            nodes=[self.network.nodes[node_id] for node_id in node_ids],
            pki=self.pki,
            quorum_size=self.config.quorum_size,
            block_interval=self.config.block_interval,
            close_threshold=self.config.close_threshold,
        )

    def expect(self, index: int, event: dict[str, Any], actual: Any, verdict: Verdict | None = None) -> None:
        name = f"{index}:{event['do']}"
        if "expect" in event:
            expected = event["expect"]
            self.checks.append(CheckResult(name, expected, actual, expected == actual))
        if verdict is not None and "reasons" in event:
            missing = [r for r in event["reasons"] if r not in verdict.reasons]
            self.checks.append(CheckResult(f"{name}:reasons", event["reasons"], list(verdict.reasons), not missing))

    def _record(self, t: Timestamp, index: int, event: dict[str, Any], actual: Any, **extra: Any) -> None:
        self.transcript.emit(t, "result", step=index, action=event["do"], actual=actual, **extra)

    # -- Run ----------------------------------------------------------------

    def run(self) -> ScenarioResult:
        for index, event in enumerate(self.scenario.events):
            self.advance_to(event["at"])
            EVENT_HANDLERS[event["do"]](self, index, event)
        self.check_invariants()
        result = ScenarioResult(self.scenario.name, self.seed, self.transcript, self.checks)
        if result.passed:
            logger.info(f"Scenario {self.scenario.name} (seed {self.seed}): {len(self.checks)} checks passed")
        else:
            for failure in result.failures:
                logger.warning(
                    f"Scenario {self.scenario.name} (seed {self.seed}): {failure.name} "
                    f"expected {failure.expected!r}, got {failure.actual!r}"
                )
        return result

    def check_invariants(self) -> None:
        t = self.world.clock
        messages = self.network.transcript()
        for invariant in self.scenario.invariants:
            match invariant:
                case "confidentiality":
                    leaks = scan_transcript(messages, self.observed_readouts())
                    actual: Any = [f"{leak.kind}@{leak.message_index}" for leak in leaks]
                    self.checks.append(CheckResult("invariant:confidentiality", [], actual, not leaks))
                    reader_ids = {reader.id for reader in self.world.readers.values()}
                    for key_digest, count in sorted(reader_exposure(messages, reader_ids).items()):
                        logger.debug(f"Reader {key_digest.short()} linkable across {count} evidences on chain")
                case "atomicity":
                    self.drain(t)
                    report = check_atomicity(self.world.services.values(), self.network.nodes.values())
                    actual = {
                        "readouts_without_evidence": len(report.readouts_without_evidence),
                        "evidence_without_readout": len(report.evidence_without_readout),
                    }
                    if report.refused:
                        logger.info(f"{len(report.refused)} readouts stored whose evidence the chain refused")
                    self.checks.append(CheckResult("invariant:atomicity", "holds", actual, report.holds))
                case "agreement":
                    confirmed = {frozenset(node.confirmed) for node in self.network.correct_nodes()}
                    tips = {node.tip_digest() for node in self.network.correct_nodes()}
                    agreed = len(confirmed) == 1 and len(tips) == 1
                    self.checks.append(CheckResult("invariant:agreement", True, agreed, agreed))
                case "ledger":
                    tip = self.network.producer().tip_digest()
                    broken = {
                        node.node_id: height
                        for node in self.network.correct_nodes()
                        if (height := verify_ledger(node.ledger, tip)) is not None
                    }
                    self.checks.append(CheckResult("invariant:ledger", {}, broken, not broken))
            self.transcript.emit(t, "invariant", name=invariant, passed=self.checks[-1].passed)

    def observed_readouts(self) -> list[Readout]:
        """Every readout the run produced: stored by services plus those named in the script."""
        readouts = {ro.digest: ro for service in self.world.services.values() for ro in service.all_readouts()}
        readouts.update({ro.digest: ro for ro in self.readouts.values()})
        return list(readouts.values())

    def _anchor(self, t: Timestamp, name: str | None) -> AnchoredWindow | None:
        assert self.evidence_service is not None
        window = aggregate_and_anchor(self.evidence_service, self.contract, t)
        if window is not None:
            self.transcript.emit(
                t,
                "anchor",
                window=window.window_id,
                root=window.root.hex(),
                block_no=window.block_no,
                gas_used=self.contract.gas_used,
            )
            if name:
                self.windows[name] = window
        return window


# -- Event handlers ---------------------------------------------------------


def _do_certify(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    t = sim.world.clock
    reader: Reader = sim.world.readers[event["reader"]]
    vendor: Vendor = sim.world.vendors[sim.reader_vendor[event["reader"]]]
    entry = sim.network.node(event.get("node", reader.chain_entry))
    cert = issue_certificate(
        vendor, reader.keypair.public, t, event.get("t_ini", t), event.get("t_exp", t + DEFAULT_PKI_VALID_TO), entry
    )
    sim.certificates[event["reader"]] = cert
    sim.transcript.emit(t, "certify", reader=event["reader"], key=cert.key_digest.hex(), t_ini=cert.t_ini, t_exp=cert.t_exp)


def _do_provision(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    t = sim.world.clock
    service: LogisticsService = sim.world.services[event["service"]]
    tag = sim.world.tags[event["tag"]]
    clients = [sim.world.clients[name] for name in event.get("clients", [])]
    n = provision_n(service, tag.id, clients)
    sim.numbers[event["as"]] = (n, event["tag"], event["service"])
    sim.transcript.emit(t, "provision", service=event["service"], tag=event["tag"], shared_with=event.get("clients", []))


def _do_share(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    n, tag_name, service_name = sim._number(event["n"])
    client: Client = sim.world.clients[event["client"]]
    client.receive(sim.world.tags[tag_name].id, n)
    sim.transcript.emit(sim.world.clock, "share", service=service_name, client=event["client"], tag=tag_name)


def _do_observe(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    t = sim.world.clock
    reader: Reader = sim.world.readers[event["reader"]]
    n, _, service_name = sim._number(event["n"])
    if service_name != reader.owner:
        raise ScenarioError(f"Event {index}: reader {reader.name} belongs to {reader.owner}, n came from {service_name}")
    write = event.get("write")
    ro, ev = observe(
        reader,
        sim.world.tags[event["tag"]],
        t,
        n,
        write_data=write.encode("utf-8") if write is not None else None,
        read_range=sim.config.read_range,
    )
    if "as" in event:
        sim.readouts[event["as"]] = ro
    sim.transcript.emit(t, "observe", reader=reader.name, tag=event["tag"], h1=ev.h1.hex(), h2=ev.h2.hex())


def _do_move(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    t = sim.world.clock
    move_tag(sim.world.tags[event["tag"]], t, sim.world.location(event["to"]))
    sim.transcript.emit(t, "move", tag=event["tag"], to=event["to"])


def _do_tamper(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    tamper(sim.world.readers[event["reader"]], sim.world.clock)
    sim.transcript.emit(sim.world.clock, "tamper", reader=event["reader"])


def _do_falsify(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    location = sim.world.location(event["location"]) if "location" in event else None
    falsify(sim.world.readers[event["reader"]], int(event.get("time_offset", 0)), location)
    sim.transcript.emit(sim.world.clock, "falsify", reader=event["reader"], time_offset=event.get("time_offset", 0))


def _do_restart(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    restart(sim.world.readers[event["reader"]])
    sim.transcript.emit(sim.world.clock, "restart", reader=event["reader"])


def _do_drain(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    sim.drain(sim.world.clock)
    sim.transcript.emit(sim.world.clock, "drain")


def _do_compromise_key(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    reader: Reader = sim.world.readers[event["reader"]]
    assert reader.signing_key is not None
    sim.stolen[event["reader"]] = reader.signing_key
    sim.transcript.emit(sim.world.clock, "compromise_key", reader=event["reader"])


def _forge(sim: Simulation, index: int, event: dict[str, Any]) -> Readout:
    name = event["reader"]
    if name not in sim.stolen:
        raise ScenarioError(f"Event {index}: the key of reader {name!r} was never compromised")
    reader: Reader = sim.world.readers[name]
    n, tag_name, _ = sim._number(event["n"])
    tag_id = sim.world.tags[tag_name].id
    claimed = int(event["claimed_time"])
    data = event.get("data", "").encode("utf-8")
    h1, h2 = compute_h1(n, tag_id), compute_h2(claimed, reader.location.label, data)
    sig = sign(signed_message(h1, h2), sim.stolen[name])
    ro = Readout(n=n, tag_id=tag_id, t=claimed, loc=reader.location.label, data=data, sig=sig, key_digest=reader.id)
    if "as" in event:
        sim.readouts[event["as"]] = ro
    return ro


def _do_forge_readout(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    ro = _forge(sim, index, event)
    sim.transcript.emit(sim.world.clock, "forge_readout", reader=event["reader"], claimed_time=ro.t)


def _do_forge_evidence(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    ro = _forge(sim, index, event)
    reader: Reader = sim.world.readers[event["reader"]]
    outcome = sim.network.submit(event.get("node", reader.chain_entry), evidence_for(ro), sim.world.clock)
    sim.transcript.emit(sim.world.clock, "forge_evidence", reader=event["reader"], claimed_time=ro.t, outcome=str(outcome))


def _do_expire_pki(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    vendor: Vendor = sim.world.vendors[event["vendor"]]
    sim.pki.expire(vendor.key_digest, sim.world.clock)
    sim.transcript.emit(sim.world.clock, "expire_pki", vendor=event["vendor"])


def _do_dishonest(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    service: LogisticsService = sim.world.services[event["service"]]
    try:
        mode = Dishonesty(event["mode"])
    except ValueError as e:
        raise ScenarioError(f"Event {index}: {e}") from e
    set_dishonesty(service, mode, event.get("field"))
    if mode == Dishonesty.INJECT:
        n, tag_name, _ = sim._number(event["n"])
        owned = [r for r in sim.world.readers.values() if r.owner == service.name]
        if not owned:
            raise ScenarioError(f"Event {index}: service {service.name} owns no reader to impersonate")
        reader = sorted(owned, key=lambda r: r.name)[0]
        fabricate_readout(
            service,
            n,
            sim.world.tags[tag_name].id,
            int(event.get("claimed_time", sim.world.clock)),
            reader.location.label,
            event.get("data", "injected").encode("utf-8"),
            reader.id,
        )
    sim.transcript.emit(sim.world.clock, "dishonest", service=service.name, mode=str(mode), field=event.get("field"))


def _do_lie(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    node: ChainNode = sim.network.node(event["node"])
    node.fault_mode, node.lie_mode = parse_fault(event["mode"])
    sim.transcript.emit(sim.world.clock, "lie", node=node.node_id, mode=event["mode"])


def _do_delete_term(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    node: ChainNode = sim.network.node(event["node"])
    digest = sim._chain_term(event["term"]).digest
    height = node.confirmed.get(digest)
    if height is None:
        raise ScenarioError(f"Event {index}: node {node.node_id} has not confirmed that term")
    node.fault_mode, node.lie_mode = FaultMode.LYING, LieMode.DELETE
    cost = node.rewrite_block(height, digest)
    sim.transcript.emit(sim.world.clock, "delete_term", node=node.node_id, height=height, work_spent=cost)


def _do_query(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    t = sim.world.clock
    client: Client = sim.world.clients[event["client"]]
    n, tag_name, _ = sim._number(event["n"])
    tag_id = sim.world.tags[tag_name].id
    if n not in client.numbers.get(tag_id, []):
        raise ScenarioError(f"Event {index}: client {client.name} was never given that n")
    key = compute_h1(n, tag_id)
    answer = query_readouts(sim.world.services[event["service"]], key, t)
    sim.answers[event["as"]] = (key, answer)
    sim.transcript.emit(t, "query", client=client.name, service=event["service"], key=key.hex(), results=len(answer))


def _readout_for(sim: Simulation, event: dict[str, Any]) -> Readout:
    if "readout" in event:
        return sim.readouts[event["readout"]]
    _, answer = sim.answers[event["answer"]]
    position = int(event.get("index", 0))
    if position >= len(answer):
        raise ScenarioError(f"Answer {event['answer']!r} has no readout at index {position}")
    return answer[position]


def _do_verify_readout(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    t = sim.world.clock
    verdict = verify_readout(_readout_for(sim, event), sim.view(event), t)
    sim._record(t, index, event, str(verdict.outcome), verdict=verdict.to_record())
    sim.expect(index, event, str(verdict.outcome), verdict)


def _do_audit_service(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    t = sim.world.clock
    key, answer = sim.answers[event["answer"]]
    verdict = audit_service_answer(key, answer, sim.view(event), t)
    sim._record(t, index, event, str(verdict.outcome), verdict=verdict.to_record())
    sim.expect(index, event, str(verdict.outcome), verdict)


def _do_audit_evidence(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    t = sim.world.clock
    n, tag_name, _ = sim._number(event["n"])
    key = compute_h1(n, sim.world.tags[tag_name].id)
    view = sim.view(event)
    proven, _ = view.evidence(key, t)
    verdicts = audit_evidence_service(key, [ev for ev, _ in proven], view, t)
    actual = {node_id: str(v.outcome) for node_id, v in sorted(verdicts.items())}
    sim._record(t, index, event, actual, found=len(proven), verdicts={k: v.to_record() for k, v in sorted(verdicts.items())})
    sim.expect(index, event, actual)
    for node_id, reasons in event.get("node_reasons", {}).items():
        got = list(verdicts[node_id].reasons)
        sim.checks.append(CheckResult(f"{index}:audit_evidence:{node_id}", reasons, got, all(r in got for r in reasons)))


def _claimed_time(event: dict[str, Any], term: Readout | Evidence | Certificate) -> Timestamp:
    claimed = event.get("claimed_time", "observed")
    if claimed == "observed":
        if not isinstance(term, Readout):
            raise ScenarioError("claimed_time 'observed' only applies to readouts")
        return term.t
    return int(claimed)


def _do_elapsed_time(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    t = sim.world.clock
    term = sim._term(event["term"])
    result = check_elapsed_time(term, _claimed_time(event, term), t, sim.view(event))
    sim._record(t, index, event, str(result))
    sim.expect(index, event, str(result))


def _do_alibi(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    t = sim.world.clock
    term = sim._term(event["term"])
    result = check_alibi(term, _claimed_time(event, term), t, sim.view(event))
    sim._record(t, index, event, str(result))
    sim.expect(index, event, str(result))


def _do_validate(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    t = sim.world.clock
    finding = validate_term(sim._term(event["term"]), sim.view(event), int(event.get("time", t)))
    actual = "valid" if finding is None else str(finding)
    sim._record(t, index, event, actual)
    sim.expect(index, event, actual)


def _do_anchor(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    window = sim._anchor(sim.world.clock, event.get("as"))
    actual = "anchored" if window is not None else "empty"
    sim._record(sim.world.clock, index, event, actual)
    sim.expect(index, event, actual)


def _do_omit(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    assert sim.evidence_service is not None
    sim.evidence_service.omit.add(sim._chain_term(event["term"]).digest)
    sim.transcript.emit(sim.world.clock, "omit", service=sim.evidence_service.name)


def _do_reconfirm(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    """Reconfirm a window's closing bulk proof, or the receipt handed out for one evidence."""
    assert sim.evidence_service is not None
    if "term" in event:
        bulk = sim.evidence_service.receipts.get(sim._chain_term(event["term"]).digest)
        if bulk is None:
            sim._record(sim.world.clock, index, event, "unpromised")
            sim.expect(index, event, "unpromised")
            return
    else:
        bulk = sim.windows[event["window"]].bulk_proof
    failed = reconfirm(bulk, sim.evidence_service, sim.contract)
    actual = "kept" if not failed else "broken"
    sim._record(sim.world.clock, index, event, actual, unconfirmed=len(failed))
    sim.expect(index, event, actual)


def _do_verify_anchored(sim: Simulation, index: int, event: dict[str, Any]) -> None:
    assert sim.evidence_service is not None
    digest = sim._chain_term(event["term"]).digest
    found = sim.evidence_service.proof_for(digest)
    block_no = verify_anchored(digest, found[0].root, found[1], sim.contract) if found else None
    actual = "anchored" if block_no is not None else "unanchored"
    sim._record(sim.world.clock, index, event, actual, block_no=block_no)
    sim.expect(index, event, actual)


EVENT_HANDLERS = {
    "certify": _do_certify,
    "provision": _do_provision,
    "share": _do_share,
    "observe": _do_observe,
    "move": _do_move,
    "tamper": _do_tamper,
    "falsify": _do_falsify,
    "restart": _do_restart,
    "drain": _do_drain,
    "compromise_key": _do_compromise_key,
    "forge_readout": _do_forge_readout,
    "forge_evidence": _do_forge_evidence,
    "expire_pki": _do_expire_pki,
    "dishonest": _do_dishonest,
    "lie": _do_lie,
    "delete_term": _do_delete_term,
    "query": _do_query,
    "verify_readout": _do_verify_readout,
    "audit_service": _do_audit_service,
    "audit_evidence": _do_audit_evidence,
    "elapsed_time": _do_elapsed_time,
    "alibi": _do_alibi,
    "validate": _do_validate,
    "anchor": _do_anchor,
    "omit": _do_omit,
    "reconfirm": _do_reconfirm,
    "verify_anchored": _do_verify_anchored,
}


def run_scenario(
    scenario: Scenario,
    seed: int | None = None,
    config_overrides: dict[str, Any] | None = None,
    chain_overrides: dict[str, Any] | None = None,
) -> ScenarioResult:
    """Build and play one scenario; unknown references fail before the first event."""
    return Simulation(scenario, seed, config_overrides, chain_overrides).build().run()


def run_suite(directory: Path = SCENARIO_DIR, seeds: Iterable[int] = (0,)) -> list[ScenarioResult]:
    paths = sorted(directory.glob("*.json"))
    if not paths:
        raise ScenarioError(f"No scenarios in {directory}")
    scenarios = [load_scenario(path) for path in paths]
    return [run_scenario(scenario, seed) for seed in seeds for scenario in scenarios]


# -- Gas model --------------------------------------------------------------


@dataclass(frozen=True)
class GasEstimate:
    gas_price_gwei: float
    writes_per_day: int
    eth_usd: float
    gas_per_store: int = STORE_GAS
    deploy_gas: int = DEPLOY_GAS

    @property
    def eth_per_write(self) -> float:
        return self.gas_per_store * self.gas_price_gwei * 1e-9

    @property
    def usd_per_write(self) -> float:
        return self.eth_per_write * self.eth_usd

    @property
    def writes_per_year(self) -> int:
        return self.writes_per_day * 365

    @property
    def usd_per_year(self) -> float:
        return self.eth_per_write * self.writes_per_year * self.eth_usd

    @property
    def deploy_usd(self) -> float:
        return self.deploy_gas * self.gas_price_gwei * 1e-9 * self.eth_usd

    def to_record(self) -> dict[str, Any]:
        return {
            "gas_price_gwei": self.gas_price_gwei,
            "writes_per_day": self.writes_per_day,
            "eth_usd": self.eth_usd,
            "gas_per_store": self.gas_per_store,
            "eth_per_write": round(self.eth_per_write, 12),
            "usd_per_write": round(self.usd_per_write, 6),
            "usd_per_year": round(self.usd_per_year, 2),
            "deploy_usd": round(self.deploy_usd, 2),
        }


def load_gas_reference(path: Path = GAS_REFERENCE_PATH) -> dict[str, Any]:
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise ParameterError(f"Cannot load gas reference {path}: {e}") from e


def estimate_gas(
    gas_price_gwei: float,
    writes_per_day: int | None = None,
    eth_usd: float | None = None,
    gas_per_store: int = STORE_GAS,
) -> GasEstimate:
    """Annual anchoring cost; unspecified inputs come from the shipped reference values."""
    if writes_per_day is None or eth_usd is None:
        reference = load_gas_reference()
        writes_per_day = reference["writes_per_day"] if writes_per_day is None else writes_per_day
        eth_usd = reference["eth_usd"] if eth_usd is None else eth_usd
    for name, value in (
        ("gas_price_gwei", gas_price_gwei),
        ("writes_per_day", writes_per_day),
        ("eth_usd", eth_usd),
        ("gas_per_store", gas_per_store),
    ):
        if value <= 0:
            raise ParameterError(f"{name} must be positive, got {value}")
    return GasEstimate(
        gas_price_gwei=gas_price_gwei, writes_per_day=writes_per_day, eth_usd=eth_usd, gas_per_store=gas_per_store
    )


def report_confirm_time(policy: str) -> tuple[int, int]:
    """Measured mean time to confirm (seconds) for a gas-price policy; lookup data only."""
    policies = load_gas_reference()["policies"]
    if policy not in policies:
        raise ParameterError(f"Unknown gas-price policy {policy!r}; choose from {sorted(policies)}")
    low, high = policies[policy]["confirm_seconds"]
    return int(low), int(high)
