"""
Client-side verification against the chain.

Everything a client needs is the readout (which carries n), the public chain
and the PKI; no secret shared between a service and its readers is involved.
Chain answers are trusted only by majority: every question goes to a quorum of
nodes, a root is accepted when most of them agree on it, and an inclusion
proof is accepted only against such a root.

Verdicts are total. A check that cannot reach enough nodes yields UNPROVEN,
never a guess and never an exception.
"""

import logging
from collections import Counter
from collections.abc import Callable, Hashable
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any, Protocol

import merkle
from chain import Block, Reason, Term, check_term
from crypto import Digest
from merkle import MerkleProof
from reader import Evidence, Readout, evidence_for
from rpc import NodeUnreachable
from vendor import Certificate, PkiStub
from world import Timestamp

logger = logging.getLogger(__name__)


class Outcome(StrEnum):
    AUTHENTIC = "authentic"
    SERVICE_FAULT = "service_fault"
    EVIDENCE_FAULT = "evidence_fault"
    INVALID_TERM = "invalid_term"
    UNPROVEN = "unproven"


class Finding(StrEnum):
    KEY_UNOBTAINABLE = "KEY_UNOBTAINABLE"
    CERT_WINDOW = "CERT_WINDOW"
    SIG_FAIL = "SIG_FAIL"
    BLOCK_INVALID = "BLOCK_INVALID"
    NO_EVIDENCE = "NO_EVIDENCE"
    EVIDENCE_MISMATCH = "EVIDENCE_MISMATCH"
    POE_FAIL = "POE_FAIL"
    BCT_MISMATCH = "BCT_MISMATCH"
    KEY_MISMATCH = "KEY_MISMATCH"
    WITHHELD = "WITHHELD"
    CHAIN_UNREACHABLE = "CHAIN_UNREACHABLE"
    LOCATION_UNVERIFIED = "LOCATION_UNVERIFIED"


class ElapsedTime(StrEnum):
    UPHELD = "upheld"
    REFUTED = "refuted"
    UNPROVEN = "unproven"


class Alibi(StrEnum):
    FABRICATION_DETECTED = "fabrication_detected"
    CONSISTENT = "consistent"
    UNPROVEN = "unproven"


@dataclass(frozen=True)
class Verdict:
    outcome: Outcome
    reasons: tuple[Finding, ...] = ()
    # Informational; never changes the outcome
    notes: tuple[Finding, ...] = ()
    bct: Timestamp | None = None

    @property
    def authentic(self) -> bool:
        return self.outcome == Outcome.AUTHENTIC

    def to_record(self) -> dict[str, Any]:
        return {
            "outcome": str(self.outcome),
            "reasons": [str(r) for r in self.reasons],
            "notes": [str(n) for n in self.notes],
            "bct": self.bct,
        }


def _finding(reason: Reason) -> Finding:
    return Finding(reason.value)


def _unique(findings: list[Finding]) -> tuple[Finding, ...]:
    return tuple(dict.fromkeys(findings))


class NodeView(Protocol):
    """The query surface shared by in-process ChainNode and rpc.RemoteNode."""

    node_id: str

    def query_evidence(self, key: Digest, t: Timestamp) -> list[tuple[Evidence, Timestamp]]: ...

    def query_certificate(self, key_digest: Digest) -> tuple[Certificate, Timestamp] | None: ...

    def bct(self, term_digest: Digest) -> Timestamp | None: ...

    def root_at(self, bct: Timestamp) -> Digest | None: ...

    def proof_of_existence(self, term: Term, bct: Timestamp) -> tuple[Digest, MerkleProof] | None: ...


@dataclass
class ChainView:
    """A client's window on the chain: the nodes it asks and the majority rule it applies."""

    nodes: list[NodeView]
    pki: PkiStub
    quorum_size: int = 3
    block_interval: int = 15
    close_threshold: int = 30
    # Nodes that ever answered against the majority
    dissenters: set[str] = field(default_factory=set)

    @property
    def quorum(self) -> list[NodeView]:
        return self.nodes[: self.quorum_size]

    @property
    def tolerance(self) -> int:
        """How far a BCT may sit from the time a term claims: one block interval plus closeness."""
        return self.block_interval + self.close_threshold

    def _majority[T](self, call: Callable[[NodeView], T], key: Callable[[T], Hashable] = lambda v: v) -> T | None:
        asked = self.quorum
        answers: list[tuple[str, T]] = []
        for node in asked:
            try:
                answers.append((node.node_id, call(node)))
            except NodeUnreachable as e:
                logger.warning(f"Chain node {node.node_id} unreachable: {e}")
        if len(answers) * 2 <= len(asked):
            raise NodeUnreachable(f"Only {len(answers)} of {len(asked)} queried chain nodes answered")
        votes = Counter(key(answer) for _, answer in answers)
        winner, count = votes.most_common(1)[0]
        for node_id, answer in answers:
            if key(answer) != winner and node_id not in self.dissenters:
                logger.warning(f"Chain node {node_id} disagrees with the majority")
                self.dissenters.add(node_id)
        if count * 2 <= len(asked):
            return None
        return next(answer for _, answer in answers if key(answer) == winner)

    def certificate(self, key_digest: Digest) -> tuple[Certificate, Timestamp] | None:
        return self._majority(
            lambda node: node.query_certificate(key_digest),
            key=lambda found: None if found is None else (found[0].digest, found[1]),
        )

    def certificates_for(self, key_digest: Digest) -> list[Certificate]:
        found = self.certificate(key_digest)
        return [found[0]] if found else []

    def trusted_root(self, bct: Timestamp) -> Digest | None:
        return self._majority(lambda node: node.root_at(bct))

    def proves(self, term: Term, bct: Timestamp) -> bool:
        """Some node supplies an inclusion proof for term that verifies against the majority root at bct."""
        root = self.trusted_root(bct)
        if root is None:
            return False
        for node in self.nodes:
            try:
                answer = node.proof_of_existence(term, bct)
            except NodeUnreachable:
                continue
            if answer is None:
                continue
            claimed_root, proof = answer
            if claimed_root == root and merkle.verify_proof(term.digest, proof, root):
                return True
            if node.node_id not in self.dissenters:
                logger.warning(f"Chain node {node.node_id} offered a proof that does not match the majority root")
                self.dissenters.add(node.node_id)
        return False

    def confirmed_bct(self, term: Term) -> Timestamp | None:
        """The majority BCT of term, kept only when its proof of existence also holds."""
        bct = self._majority(lambda node: node.bct(term.digest))
        if bct is None:
            return None
        return bct if self.proves(term, bct) else None

    def evidence(self, key: Digest, t: Timestamp) -> tuple[list[tuple[Evidence, Timestamp]], list[Evidence]]:
        """
        Evidences with h1 = key confirmed before t, split into those whose
        existence the quorum proves and those some node offered but nobody can prove.
        """
        candidates: dict[Digest, Evidence] = {}
        reached = 0
        for node in self.quorum:
            try:
                answer = node.query_evidence(key, t)
            except NodeUnreachable as e:
                logger.warning(f"Chain node {node.node_id} unreachable: {e}")
                continue
            reached += 1
            for ev, _ in answer:
                if ev.h1 == key:
                    candidates.setdefault(ev.digest, ev)
        if reached * 2 <= len(self.quorum):
            raise NodeUnreachable(f"Only {reached} of {len(self.quorum)} queried chain nodes answered")
        proven: list[tuple[Evidence, Timestamp]] = []
        unproven: list[Evidence] = []
        for ev in candidates.values():
            bct = self.confirmed_bct(ev)
            if bct is not None and bct < t:
                proven.append((ev, bct))
            else:
                unproven.append(ev)
        proven.sort(key=lambda item: (item[1], item[0].digest))
        return proven, unproven


def validate_term(term: Readout | Evidence | Certificate | Block, view: ChainView, t: Timestamp) -> Finding | None:
    """None when valid at t, otherwise the first reason the term would be forgotten."""
    try:
        if isinstance(term, Block):
            if term.merkle_root != term.tree.root:
                return Finding.BLOCK_INVALID
            for inner in term.terms:
                if validate_term(inner, view, t) is not None:
                    return Finding.BLOCK_INVALID
            return None
        reason = check_term(term, t, view.certificates_for, view.pki)
    except NodeUnreachable:
        return Finding.CHAIN_UNREACHABLE
    return None if reason is None else _finding(reason)


def verify_readout(ro: Readout, view: ChainView, now: Timestamp) -> Verdict:
    """
    Judge a readout from its own fields and public chain data: recompute h1
    and h2, resolve the reader's certificate, check the signature, find the
    matching evidence with a proof of existence, and check its BCT against
    the readout's time. The reported location can only be taken on trust.
    """
    notes = (Finding.LOCATION_UNVERIFIED,)
    try:
        certificates = view.certificates_for(ro.key_digest)
        proven, unproven = view.evidence(ro.h1, now)
    except NodeUnreachable as e:
        logger.warning(f"Readout verification unproven: {e}")
        return Verdict(Outcome.UNPROVEN, (Finding.CHAIN_UNREACHABLE,), notes)

    if not certificates:
        return Verdict(Outcome.INVALID_TERM, (Finding.KEY_UNOBTAINABLE,), notes)
    reason = check_term(ro, ro.t, lambda _: certificates, view.pki)
    signature_finding = _finding(reason) if reason else None

    expected = evidence_for(ro)
    matching = [bct for ev, bct in proven if ev == expected]
    if matching:
        if signature_finding:
            return Verdict(Outcome.INVALID_TERM, (signature_finding,), notes, matching[0])
        bct = matching[0]
        if abs(bct - ro.t) > view.tolerance:
            logger.warning(f"Readout claims t={ro.t} but its evidence was confirmed at {bct}")
            return Verdict(Outcome.SERVICE_FAULT, (Finding.BCT_MISMATCH,), notes, bct)
        return Verdict(Outcome.AUTHENTIC, (), notes, bct)

    if proven:
        findings = [Finding.EVIDENCE_MISMATCH] + ([signature_finding] if signature_finding else [])
        return Verdict(Outcome.SERVICE_FAULT, _unique(findings), notes)
    if expected in unproven:
        return Verdict(Outcome.EVIDENCE_FAULT, (Finding.POE_FAIL,), notes)
    if signature_finding:
        return Verdict(Outcome.INVALID_TERM, (signature_finding,), notes)
    return Verdict(Outcome.SERVICE_FAULT, (Finding.NO_EVIDENCE,), notes)


def audit_service_answer(key: Digest, answer: list[Readout], view: ChainView, now: Timestamp) -> Verdict:
    """
    Judge a service's whole answer to a query for key: readouts for another
    key, readouts that do not verify, and fewer readouts than the chain holds
    evidences for all make the service faulty.
    """
    try:
        proven, _ = view.evidence(key, now)
    except NodeUnreachable:
        return Verdict(Outcome.UNPROVEN, (Finding.CHAIN_UNREACHABLE,))

    findings: list[Finding] = []
    bct: Timestamp | None = None
    on_key = 0
    for ro in answer:
        if ro.h1 != key:
            findings.append(Finding.KEY_MISMATCH)
            continue
        on_key += 1
        verdict = verify_readout(ro, view, now)
        if verdict.outcome == Outcome.UNPROVEN:
            return verdict
        if verdict.authentic:
            bct = verdict.bct if bct is None else min(bct, verdict.bct or bct)
        else:
            findings.extend(verdict.reasons)
    if on_key < len(proven):
        findings.append(Finding.WITHHELD)

    if findings:
        logger.warning(f"Service answer for {key.short()} is faulty: {', '.join(_unique(findings))}")
        return Verdict(Outcome.SERVICE_FAULT, _unique(findings), (Finding.LOCATION_UNVERIFIED,), bct)
    return Verdict(Outcome.AUTHENTIC, (), (Finding.LOCATION_UNVERIFIED,), bct)


def _as_chain_term(term: Readout | Evidence | Certificate) -> Term:
    return evidence_for(term) if isinstance(term, Readout) else term


def check_elapsed_time(
    term: Readout | Evidence | Certificate, claimed_time: Timestamp, now: Timestamp, view: ChainView
) -> ElapsedTime:
    """
    Upheld when the chain places the term in a block close to claimed_time
    and the term was valid at that time. Later certificate expiry, key
    compromise or PKI expiry of the vendor key do not matter.
    """
    try:
        bct = view.confirmed_bct(_as_chain_term(term))
        if bct is None or abs(bct - claimed_time) > view.tolerance:
            return ElapsedTime.REFUTED
        at = term.t if isinstance(term, Readout) else claimed_time
        reason = check_term(term, at, view.certificates_for, view.pki)
    except NodeUnreachable as e:
        logger.warning(f"Elapsed-time check unproven: {e}")
        return ElapsedTime.UNPROVEN
    return ElapsedTime.UPHELD if reason is None else ElapsedTime.REFUTED


def check_alibi(
    term: Readout | Evidence | Certificate, claimed_time: Timestamp, now: Timestamp, view: ChainView
) -> Alibi:
    """A term claiming to be from claimed_time is a fabrication unless a block of about that time holds it."""
    try:
        if isinstance(term, Readout):
            proven, _ = view.evidence(term.h1, now)
            expected = evidence_for(term)
            found = [bct for ev, bct in proven if ev == expected]
            bct = found[0] if found else None
        else:
            bct = view.confirmed_bct(term)
    except NodeUnreachable as e:
        logger.warning(f"Alibi check unproven: {e}")
        return Alibi.UNPROVEN
    if bct is None or abs(bct - claimed_time) > view.tolerance:
        logger.warning(f"Term claiming t={claimed_time} has no block near that time (BCT {bct})")
        return Alibi.FABRICATION_DETECTED
    return Alibi.CONSISTENT


def audit_evidence_service(
    key: Digest, expected: list[Evidence], view: ChainView, now: Timestamp
) -> dict[str, Verdict]:
    """Ask every node of the view for key and judge each answer on its own."""
    verdicts: dict[str, Verdict] = {}
    expected_digests = {ev.digest for ev in expected}
    for node in view.nodes:
        try:
            answer = node.query_evidence(key, now)
            findings: list[Finding] = []
            returned: set[Digest] = set()
            for ev, bct in answer:
                if ev.h1 != key:
                    findings.append(Finding.KEY_MISMATCH)
                elif not view.proves(ev, bct):
                    findings.append(Finding.POE_FAIL)
                else:
                    returned.add(ev.digest)
        except NodeUnreachable:
            verdicts[node.node_id] = Verdict(Outcome.UNPROVEN, (Finding.CHAIN_UNREACHABLE,))
            continue
        if expected_digests - returned:
            findings.append(Finding.WITHHELD)
        if findings:
            logger.warning(f"Chain node {node.node_id} lied about evidence {key.short()}: {', '.join(_unique(findings))}")
            verdicts[node.node_id] = Verdict(Outcome.EVIDENCE_FAULT, _unique(findings))
        else:
            verdicts[node.node_id] = Verdict(Outcome.AUTHENTIC)
    return verdicts
