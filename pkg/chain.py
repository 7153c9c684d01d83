"""
Simulated blockchain network holding evidences and certificates.

Every node validates what it hears (signature, certificate, validity window)
and forgets invalid terms. Validated terms spread to neighbours one hop per
gossip round. At each block-interval boundary a single producer seals
everything validated but not yet confirmed into a hash-chained block carrying
the Merkle root of its terms; an empty interval still yields an (empty) block.
There are no forks. Proof of work is bookkeeping: every block carries a
work_cost and rewriting history means paying it again for every later block.

Nodes can be correct, silent (hear nothing, say nothing) or lying. A lying
node withholds, fabricates, answers with the wrong term, or rewrites its own
copy of the ledger, depending on its LieMode.
"""

import logging
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import StrEnum
from functools import cached_property

import merkle
from crypto import (
    CryptoError,
    Digest,
    EncodingError,
    FieldTag,
    Signature,
    decode,
    decode_int,
    encode,
    hash_bytes,
    verify,
)
from merkle import MerkleProof, MerkleTree
from reader import Evidence, Readout, signed_message
from vendor import Certificate, PkiStub, pki_lookup
from world import Timestamp

logger = logging.getLogger(__name__)

type Term = Evidence | Certificate
type CertificateLookup = Callable[[Digest], list[Certificate]]

GENESIS_PREV = Digest(bytes(32))
WORK_COST_PER_BLOCK = 1_000
DEFAULT_BLOCK_INTERVAL = 15
BLOCK_HEADER_LAYOUT = [
    FieldTag.HEIGHT,
    FieldTag.PREV_DIGEST,
    FieldTag.CREATED_AT,
    FieldTag.MERKLE_ROOT,
    FieldTag.WORK_COST,
]


class ChainError(Exception):
    """Raised when a block or term cannot be decoded."""


class Reason(StrEnum):
    """Why a node forgets a term."""

    KEY_UNOBTAINABLE = "KEY_UNOBTAINABLE"
    CERT_WINDOW = "CERT_WINDOW"
    SIG_FAIL = "SIG_FAIL"
    BLOCK_INVALID = "BLOCK_INVALID"


class SubmitOutcome(StrEnum):
    ACCEPTED = "accepted"
    FORGOTTEN = "forgotten"


class FaultMode(StrEnum):
    CORRECT = "correct"
    SILENT = "silent"
    LYING = "lying"


class LieMode(StrEnum):
    WITHHOLD = "withhold"
    FABRICATE = "fabricate"
    WRONG_TERM = "wrong_term"
    DELETE = "delete"


# -- Terms ------------------------------------------------------------------


def term_field(term: Term) -> tuple[FieldTag, bytes]:
    tag = FieldTag.EVIDENCE if isinstance(term, Evidence) else FieldTag.CERTIFICATE
    return tag, term.to_bytes()


def term_from_field(tag: FieldTag, payload: bytes) -> Term:
    try:
        if tag == FieldTag.EVIDENCE:
            return Evidence.from_bytes(payload)
        if tag == FieldTag.CERTIFICATE:
            return Certificate.from_bytes(payload)
    except (EncodingError, CryptoError) as e:
        raise ChainError(f"Malformed {tag.name.lower()}: {e}") from e
    raise ChainError(f"{tag.name} is not a chain term")


def check_term(
    term: Term | Readout,
    t: Timestamp,
    certificates_for: CertificateLookup,
    pki: PkiStub,
    slack: int = 0,
) -> Reason | None:
    """
    Apply the three reasons a term is forgotten, judged at time t:
    the key cannot be obtained, a timestamp falls outside the certificate
    window, or the signature does not verify. Returns None when valid.

    Readouts are judged at their own timestamp; evidences carry none, so the
    caller's t (receipt or block time) stands in. slack widens the window
    check to any instant in [t - slack, t], for terms sealed into a block some
    time after they arrived.
    """
    if isinstance(term, Certificate):
        vendor_key = pki_lookup(pki, term.vendor_key_digest, t)
        if vendor_key is None and slack:
            vendor_key = pki_lookup(pki, term.vendor_key_digest, t - slack)
        if vendor_key is None:
            return Reason.KEY_UNOBTAINABLE
        if not term.t_ini < term.t_exp:
            return Reason.CERT_WINDOW
        if not verify(term.signed_bytes, term.sig, vendor_key):
            return Reason.SIG_FAIL
        return None

    certificates = certificates_for(term.key_digest)
    if not certificates:
        return Reason.KEY_UNOBTAINABLE
    when = term.t if isinstance(term, Readout) else t
    in_window = [c for c in certificates if c.t_ini <= when and when - slack <= c.t_exp]
    if not in_window:
        return Reason.CERT_WINDOW
    message = signed_message(term.h1, term.h2)
    if not any(verify(message, term.sig, c.reader_public) for c in in_window):
        return Reason.SIG_FAIL
    return None


# -- Blocks -----------------------------------------------------------------


@dataclass(frozen=True)
class Block:
    height: int
    prev_digest: Digest
    created_at: Timestamp
    terms: tuple[Term, ...]
    merkle_root: Digest
    work_cost: int

    @cached_property
    def tree(self) -> MerkleTree:
        return merkle.build([term.digest for term in self.terms])

    @cached_property
    def term_digests(self) -> dict[Digest, int]:
        positions: dict[Digest, int] = {}
        for index, term in enumerate(self.terms):
            positions.setdefault(term.digest, index)
        return positions

    def to_bytes(self) -> bytes:
        fields: list[tuple[FieldTag, bytes | int | Digest]] = [
            (FieldTag.HEIGHT, self.height),
            (FieldTag.PREV_DIGEST, self.prev_digest),
            (FieldTag.CREATED_AT, self.created_at),
            (FieldTag.MERKLE_ROOT, self.merkle_root),
            (FieldTag.WORK_COST, self.work_cost),
        ]
        fields += [term_field(term) for term in self.terms]
        return encode(fields)

    @cached_property
    def digest(self) -> Digest:
        """H(bk), the link the next block carries."""
        return hash_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        try:
            fields = decode(data)
            header = [tag for tag, _ in fields[: len(BLOCK_HEADER_LAYOUT)]]
            if header != BLOCK_HEADER_LAYOUT:
                raise ChainError(f"Unexpected block header {[t.name for t in header]}")
            height, prev, created_at, root, cost = (payload for _, payload in fields[: len(BLOCK_HEADER_LAYOUT)])
            terms = tuple(term_from_field(tag, payload) for tag, payload in fields[len(BLOCK_HEADER_LAYOUT) :])
            return cls(
                height=decode_int(height),
                prev_digest=Digest(prev),
                created_at=decode_int(created_at),
                terms=terms,
                merkle_root=Digest(root),
                work_cost=decode_int(cost),
            )
        except (EncodingError, CryptoError) as e:
            raise ChainError(f"Malformed block: {e}") from e


def make_block(prev: Block | None, created_at: Timestamp, terms: list[Term], work_cost: int) -> Block:
    return Block(
        height=0 if prev is None else prev.height + 1,
        prev_digest=GENESIS_PREV if prev is None else prev.digest,
        created_at=created_at,
        terms=tuple(terms),
        merkle_root=merkle.build([term.digest for term in terms]).root,
        work_cost=work_cost,
    )


def verify_ledger(blocks: list[Block], trusted_tip: Digest | None = None) -> int | None:
    """
    Re-verify a ledger end to end. Returns the first height at which it breaks,
    or None when every link, root and height checks out. Without trusted_tip a
    change to the newest block is invisible (nothing links to it yet); pass the
    tip digest agreed by a quorum to cover it.
    """
    previous: Block | None = None
    for index, block in enumerate(blocks):
        expected_prev = GENESIS_PREV if previous is None else previous.digest
        if block.height != index or block.prev_digest != expected_prev:
            return index
        if block.merkle_root != block.tree.root:
            return index
        if previous is not None and block.created_at < previous.created_at:
            return index
        previous = block
    if trusted_tip is not None and blocks and blocks[-1].digest != trusted_tip:
        return len(blocks) - 1
    return None


def modification_cost(ledger: list[Block], height: int) -> int:
    """Work that must be redone to rewrite the block at height: it and every block after it."""
    return sum(block.work_cost for block in ledger[height:])


# -- Nodes ------------------------------------------------------------------


@dataclass
class ChainNode:
    node_id: str
    pki: PkiStub
    fault_mode: FaultMode = FaultMode.CORRECT
    lie_mode: LieMode | None = None
    block_interval: int = DEFAULT_BLOCK_INTERVAL
    peers: list[str] = field(default_factory=list)
    # Every validated term, confirmed or not
    known: dict[Digest, Term] = field(default_factory=dict)
    arrival: dict[Digest, Timestamp] = field(default_factory=dict)
    pending: list[Digest] = field(default_factory=list)
    ledger: list[Block] = field(default_factory=list)
    # term digest -> block height
    confirmed: dict[Digest, int] = field(default_factory=dict)
    forgotten: set[Digest] = field(default_factory=set)
    outgoing: list[Digest] = field(default_factory=list)
    # Raw bytes of every message addressed to this node
    inbound: list[bytes] = field(default_factory=list)
    certificates: dict[Digest, list[Certificate]] = field(default_factory=dict)
    fabrications: int = 0

    @property
    def correct(self) -> bool:
        return self.fault_mode == FaultMode.CORRECT

    @property
    def silent(self) -> bool:
        return self.fault_mode == FaultMode.SILENT

    def lies(self, mode: LieMode) -> bool:
        return self.fault_mode == FaultMode.LYING and self.lie_mode == mode

    def certificates_for(self, key_digest: Digest) -> list[Certificate]:
        return self.certificates.get(key_digest, [])

    def tip(self) -> Block | None:
        return self.ledger[-1] if self.ledger else None

    def tip_digest(self) -> Digest | None:
        tip = self.tip()
        return tip.digest if tip else None

    # -- Ingress ------------------------------------------------------------

    def submit(self, term: Term, t: Timestamp) -> SubmitOutcome:
        """Receive a term from a reader, a vendor or a peer; validate it or forget it."""
        kind, payload = term_field(term)
        self.inbound.append(encode([(kind, payload)]))
        if self.silent:
            return SubmitOutcome.FORGOTTEN
        digest = term.digest
        if digest in self.known:
            return SubmitOutcome.ACCEPTED
        if digest in self.forgotten:
            return SubmitOutcome.FORGOTTEN
        reason = check_term(term, t, self.certificates_for, self.pki)
        if reason is not None:
            self.forgotten.add(digest)
            logger.debug(f"Node {self.node_id} forgot {kind.name.lower()} {digest.short()}: {reason}")
            return SubmitOutcome.FORGOTTEN
        self._learn(term, digest, t)
        self.pending.append(digest)
        self.outgoing.append(digest)
        return SubmitOutcome.ACCEPTED

    def _learn(self, term: Term, digest: Digest, t: Timestamp) -> None:
        self.known[digest] = term
        self.arrival.setdefault(digest, t)
        if isinstance(term, Certificate):
            self.certificates.setdefault(term.key_digest, []).append(term)

    def accept_block(self, block: Block) -> bool:
        """Append a disseminated block if it links to our tip and every term in it is valid."""
        self.inbound.append(encode([(FieldTag.BLOCK, block.to_bytes())]))
        if self.silent:
            return False
        if block.height != len(self.ledger) or block.prev_digest != (self.tip_digest() or GENESIS_PREV):
            logger.debug(f"Node {self.node_id} rejected block {block.height}: does not extend its tip")
            return False
        if block.merkle_root != block.tree.root:
            logger.debug(f"Node {self.node_id} rejected block {block.height}: Merkle root mismatch")
            return False
        in_block: dict[Digest, list[Certificate]] = {}

        def lookup(key_digest: Digest) -> list[Certificate]:
            return self.certificates_for(key_digest) + in_block.get(key_digest, [])

        for term in block.terms:
            if term.digest not in self.known:
                reason = check_term(term, block.created_at, lookup, self.pki, slack=self.block_interval)
                if reason is not None:
                    logger.debug(f"Node {self.node_id} forgot block {block.height}: contains invalid term ({reason})")
                    return False
            if isinstance(term, Certificate):
                in_block.setdefault(term.key_digest, []).append(term)

        self.ledger.append(block)
        sealed = set()
        for term in block.terms:
            digest = term.digest
            if digest not in self.known:
                self._learn(term, digest, block.created_at)
            self.confirmed.setdefault(digest, block.height)
            sealed.add(digest)
        self.pending = [d for d in self.pending if d not in sealed]
        return True

    # -- Queries (the node RPC surface) ------------------------------------

    def _log_query(self, *fields: tuple[FieldTag, bytes | int | Digest]) -> None:
        self.inbound.append(encode(list(fields)))

    def _block_of(self, digest: Digest) -> Block | None:
        height = self.confirmed.get(digest)
        if height is None or height >= len(self.ledger):
            return None
        block = self.ledger[height]
        return block if digest in block.term_digests else None

    def bct(self, term_digest: Digest) -> Timestamp | None:
        """Block creation time: the creation time of the block that first confirmed the term."""
        self._log_query((FieldTag.TERM_DIGEST, term_digest))
        if self.silent or self.lies(LieMode.WITHHOLD):
            return None
        block = self._block_of(term_digest)
        return block.created_at if block else None

    def root_at(self, bct: Timestamp) -> Digest | None:
        self._log_query((FieldTag.CREATED_AT, bct))
        if self.silent:
            return None
        block = self._block_at(bct)
        if block is None:
            return None
        if self.lies(LieMode.FABRICATE):
            return hash_bytes(b"fabricated-root:" + block.merkle_root.value)
        return block.merkle_root

    def _block_at(self, bct: Timestamp) -> Block | None:
        for block in self.ledger:
            if block.created_at == bct:
                return block
        return None

    def proof_of_existence(self, term: Term, bct: Timestamp) -> tuple[Digest, MerkleProof] | None:
        """bk_bct.proof(term) together with bk_bct.root, or None (φ) if the term is not in that block."""
        self._log_query(term_field(term), (FieldTag.CREATED_AT, bct))
        if self.silent or self.lies(LieMode.WITHHOLD):
            return None
        if self.lies(LieMode.FABRICATE):
            return self._fabricated_proof(term)
        block = self._block_at(bct)
        if block is None:
            return None
        proof = merkle.prove(block.tree, term.digest)
        return (block.merkle_root, proof) if proof is not None else None

    def _fabricated_proof(self, term: Term) -> tuple[Digest, MerkleProof]:
        decoy = hash_bytes(b"decoy:" + self.node_id.encode())
        tree = merkle.build([term.digest, decoy])
        proof = merkle.prove(tree, term.digest)
        assert proof is not None
        return tree.root, proof

    def query_evidence(self, key: Digest, t: Timestamp) -> list[tuple[Evidence, Timestamp]]:
        """All confirmed evidences with h1 = key and their BCTs, for blocks created before t."""
        self._log_query((FieldTag.H1, key), (FieldTag.CREATED_AT, t))
        if self.silent or self.lies(LieMode.WITHHOLD):
            return []
        results = [
            (term, block.created_at)
            for block in self.ledger
            if block.created_at < t
            for term in block.terms
            if isinstance(term, Evidence) and term.h1 == key
        ]
        if self.lies(LieMode.WRONG_TERM):
            others = [
                (term, block.created_at)
                for block in self.ledger
                if block.created_at < t
                for term in block.terms
                if isinstance(term, Evidence) and term.h1 != key
            ]
            return others[:1] or results
        if self.lies(LieMode.FABRICATE):
            results.append((self._fabricated_evidence(key), self.ledger[-1].created_at if self.ledger else 0))
        return results

    def _fabricated_evidence(self, key: Digest) -> Evidence:
        self.fabrications += 1
        seed = f"{self.node_id}:{self.fabrications}".encode()
        return Evidence(
            h1=key,
            h2=hash_bytes(b"fabricated-h2:" + seed),
            sig=Signature(hash_bytes(b"fabricated-sig:" + seed).value * 2),
            key_digest=hash_bytes(b"fabricated-key:" + seed),
        )

    def query_certificate(self, key_digest: Digest) -> tuple[Certificate, Timestamp] | None:
        self._log_query((FieldTag.KEY_DIGEST, key_digest))
        if self.silent or self.lies(LieMode.WITHHOLD):
            return None
        for block in self.ledger:
            for term in block.terms:
                if isinstance(term, Certificate) and term.key_digest == key_digest:
                    return term, block.created_at
        return None

    # -- Adversarial ledger rewrite ----------------------------------------

    def rewrite_block(self, height: int, drop: Digest) -> int:
        """
        Delete a term from this node's own copy of the block at height and
        re-link every later block. Returns the work spent; other nodes are untouched.
        """
        if not 0 <= height < len(self.ledger):
            raise IndexError(f"Node {self.node_id} has no block at height {height}")
        cost = modification_cost(self.ledger, height)
        rebuilt: list[Block] = self.ledger[:height]
        for block in self.ledger[height:]:
            terms = [term for term in block.terms if term.digest != drop]
            rebuilt.append(make_block(rebuilt[-1] if rebuilt else None, block.created_at, terms, block.work_cost))
        self.ledger = rebuilt
        self.confirmed.pop(drop, None)
        logger.warning(f"Node {self.node_id} rewrote its ledger from height {height}, spending {cost} work units")
        return cost


# -- Network ----------------------------------------------------------------


def topology_edges(node_ids: list[str], topology: str) -> dict[str, list[str]]:
    """Adjacency for "line", "ring" or "full" (complete graph) topologies."""
    peers: dict[str, list[str]] = {node_id: [] for node_id in node_ids}
    count = len(node_ids)
    if topology == "full":
        for node_id in node_ids:
            peers[node_id] = [other for other in node_ids if other != node_id]
        return peers
    if topology not in ("line", "ring"):
        raise ValueError(f"Unknown topology {topology!r}; use line, ring or full")
    for i in range(count - 1):
        peers[node_ids[i]].append(node_ids[i + 1])
        peers[node_ids[i + 1]].append(node_ids[i])
    if topology == "ring" and count > 2:
        peers[node_ids[0]].append(node_ids[-1])
        peers[node_ids[-1]].append(node_ids[0])
    return peers


@dataclass
class ChainNetwork:
    nodes: dict[str, ChainNode]
    block_interval: int = DEFAULT_BLOCK_INTERVAL
    work_cost: int = WORK_COST_PER_BLOCK

    @classmethod
    def build(
        cls,
        count: int,
        pki: PkiStub,
        topology: str = "full",
        faults: dict[str, tuple[FaultMode, LieMode | None]] | None = None,
        block_interval: int = DEFAULT_BLOCK_INTERVAL,
    ) -> "ChainNetwork":
        node_ids = [f"node-{i}" for i in range(count)]
        faults = faults or {}
        unknown = set(faults) - set(node_ids)
        if unknown:
            raise ValueError(f"Fault assignment names unknown nodes: {sorted(unknown)}")
        edges = topology_edges(node_ids, topology)
        nodes = {}
        for node_id in node_ids:
            mode, lie = faults.get(node_id, (FaultMode.CORRECT, None))
            nodes[node_id] = ChainNode(
                node_id=node_id,
                pki=pki,
                fault_mode=mode,
                lie_mode=lie,
                block_interval=block_interval,
                peers=edges[node_id],
            )
        correct = sum(1 for node in nodes.values() if node.correct)
        if correct * 2 <= count:
            logger.warning(f"Only {correct} of {count} chain nodes are correct; the majority assumption is broken")
        return cls(nodes=nodes, block_interval=block_interval)

    def node(self, node_id: str) -> ChainNode:
        try:
            return self.nodes[node_id]
        except KeyError as e:
            raise KeyError(f"Unknown chain node {node_id!r}") from e

    def correct_nodes(self) -> list[ChainNode]:
        return [node for node in self.nodes.values() if node.correct]

    def submit(self, node_id: str, term: Term, t: Timestamp) -> SubmitOutcome:
        return self.node(node_id).submit(term, t)

    def gossip_round(self, t: Timestamp) -> int:
        """
        One hop of dissemination: every non-silent node forwards the terms it
        learned since the last round to each neighbour that lacks them. Lying
        fabricators also push a forged evidence, which correct receivers forget.
        """
        batches = {node_id: list(node.outgoing) for node_id, node in self.nodes.items()}
        for node in self.nodes.values():
            node.outgoing.clear()
        delivered = 0
        for node_id, digests in batches.items():
            sender = self.nodes[node_id]
            if sender.silent:
                continue
            for digest in digests:
                term = sender.known[digest]
                for peer_id in sender.peers:
                    peer = self.nodes[peer_id]
                    if digest in peer.known or digest in peer.forgotten:
                        continue
                    peer.submit(term, t)
                    delivered += 1
            if sender.lies(LieMode.FABRICATE) and digests:
                forged = sender._fabricated_evidence(digests[0])
                for peer_id in sender.peers:
                    self.nodes[peer_id].submit(forged, t)
                    delivered += 1
        if delivered:
            logger.debug(f"Gossip round at t={t}: {delivered} messages")
        return delivered

    def gossip_until_quiet(self, t: Timestamp, max_rounds: int | None = None) -> int:
        rounds = 0
        limit = max_rounds if max_rounds is not None else len(self.nodes) + 1
        while rounds < limit and any(node.outgoing for node in self.nodes.values()):
            self.gossip_round(t)
            rounds += 1
        return rounds

    def producer(self) -> ChainNode:
        correct = sorted(self.correct_nodes(), key=lambda node: node.node_id)
        if not correct:
            raise RuntimeError("No correct chain node left to produce blocks")
        return correct[0]

    def create_block(self, t: Timestamp) -> Block:
        """Seal every validated-but-unconfirmed term known to a correct node, then disseminate the block."""
        producer = self.producer()
        candidates: dict[Digest, tuple[Timestamp, int, str]] = {}
        for node in self.correct_nodes():
            for digest in node.pending:
                term = node.known[digest]
                # Certificates first at equal arrival so evidences in the same block can be resolved
                rank = (node.arrival[digest], 0 if isinstance(term, Certificate) else 1, digest.hex())
                if digest not in candidates or rank < candidates[digest]:
                    candidates[digest] = rank
        ordered = sorted(candidates, key=lambda d: candidates[d])
        terms = [self._term(d) for d in ordered]
        block = make_block(producer.tip(), t, terms, self.work_cost)
        for node in self.nodes.values():
            node.accept_block(block)
        logger.info(f"Block {block.height} created at t={t} with {len(terms)} terms (root {block.merkle_root.short()})")
        return block

    def _term(self, digest: Digest) -> Term:
        for node in self.correct_nodes():
            if digest in node.known:
                return node.known[digest]
        raise KeyError(digest)

    def next_boundary(self, after: Timestamp) -> Timestamp:
        """The first block-interval boundary strictly after the given time."""
        return (after // self.block_interval + 1) * self.block_interval

    def bct(self, term_digest: Digest) -> Timestamp | None:
        """BCT as the correct nodes agree on it (majority vote among them)."""
        votes = Counter(node.bct(term_digest) for node in self.correct_nodes())
        if not votes:
            return None
        value, _ = votes.most_common(1)[0]
        return value

    def transcript(self) -> list[bytes]:
        """Every message ever addressed to any chain node."""
        return [message for node in self.nodes.values() for message in node.inbound]
