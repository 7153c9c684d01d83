"""
Off-chain evidence aggregation anchored through a digest-storing contract.

The evidence service collects evidences for a window, builds one Merkle tree
over their digests and stores only the root in the contract. Every evidence
it collects is answered on the spot with a signed bulk proof promising that
the window so far will be in the tree being built; once the root lands, each
promise is reconfirmed with a real inclusion proof against the stored root.

AnchorContract mirrors the deployed anchoring contract call for call:
store() records the block number on first write and is a no-op afterwards,
isStored()/getStored() are free reads. Gas is bookkeeping only.
"""

import logging
from dataclasses import dataclass, field

import merkle
from crypto import (
    Digest,
    FieldTag,
    KeyPair,
    PublicKey,
    Signature,
    encode,
    generate_keypair,
    sign,
    verify,
)
from merkle import MerkleProof, MerkleTree
from reader import Evidence
from world import Timestamp

logger = logging.getLogger(__name__)

DEPLOY_GAS = 149_119
STORE_GAS = 44_241
DEFAULT_BLOCK_INTERVAL = 15


@dataclass
class AnchorContract:
    """digest -> block number; 0 means never stored."""

    block_interval: int = DEFAULT_BLOCK_INTERVAL
    digests: dict[Digest, int] = field(default_factory=dict)
    gas_used: int = DEPLOY_GAS
    first_stores: int = 0
    redundant_stores: int = 0

    def block_number(self, t: Timestamp) -> int:
        """Number of the contract-chain block mined at t (block numbers start at 1)."""
        return t // self.block_interval + 1

    def store(self, digest: Digest, block_no: int) -> bool:
        """Returns whether the digest was already stored; the first block number always wins."""
        if block_no <= 0:
            raise ValueError(f"Block number must be positive, got {block_no}")
        already_stored = self.is_stored(digest)
        if already_stored:
            self.redundant_stores += 1
        else:
            self.digests[digest] = block_no
            self.first_stores += 1
            self.gas_used += STORE_GAS
        return already_stored

    def is_stored(self, digest: Digest) -> bool:
        return self.digests.get(digest, 0) > 0

    def get_stored(self, digest: Digest) -> int:
        return self.digests.get(digest, 0)


@dataclass(frozen=True)
class BulkProof:
    """A signed promise, made at issued_at, that every covered evidence digest is in the tree of window_id."""

    covered: tuple[Digest, ...]
    window_id: int
    issued_at: Timestamp
    sig: Signature
    issuer_key_digest: Digest

    @property
    def signed_bytes(self) -> bytes:
        return bulk_proof_message(self.window_id, self.issued_at, self.covered)

    def to_bytes(self) -> bytes:
        return encode(
            [(FieldTag.WINDOW_ID, self.window_id), (FieldTag.TIMESTAMP, self.issued_at)]
            + [(FieldTag.COVERED, d) for d in self.covered]
            + [(FieldTag.SIGNATURE, self.sig), (FieldTag.KEY_DIGEST, self.issuer_key_digest)]
        )


def bulk_proof_message(window_id: int, issued_at: Timestamp, covered: tuple[Digest, ...]) -> bytes:
    return encode(
        [(FieldTag.WINDOW_ID, window_id), (FieldTag.TIMESTAMP, issued_at)] + [(FieldTag.COVERED, d) for d in covered]
    )


def verify_bulk_proof(proof: BulkProof, issuer: PublicKey) -> bool:
    return proof.issuer_key_digest == issuer.digest and verify(proof.signed_bytes, proof.sig, issuer)


@dataclass
class AnchoredWindow:
    window_id: int
    tree: MerkleTree
    block_no: int
    bulk_proof: BulkProof
    proofs: dict[Digest, MerkleProof]

    @property
    def root(self) -> Digest:
        return self.tree.root


@dataclass
class EvidenceService:
    name: str
    keypair: KeyPair
    pending: list[Evidence] = field(default_factory=list)
    windows: list[AnchoredWindow] = field(default_factory=list)
    # Digests deliberately left out of the next tree (a faulty service)
    omit: set[Digest] = field(default_factory=set)
    seen: set[Digest] = field(default_factory=set)
    # evidence digest -> the bulk proof handed out when it was collected
    receipts: dict[Digest, BulkProof] = field(default_factory=dict)

    @classmethod
    def create(cls, name: str, seed: int | bytes) -> "EvidenceService":
        return cls(name=name, keypair=generate_keypair(seed))

    @property
    def public(self) -> PublicKey:
        return self.keypair.public

    @property
    def promise(self) -> BulkProof | None:
        """The latest bulk proof for the open window, covering everything collected so far."""
        if not self.pending:
            return None
        return self.receipts[self.pending[-1].digest]

    def collect(self, evidence: Evidence, t: Timestamp) -> BulkProof | None:
        """Queue an evidence for the open window and answer with a bulk proof; None for a duplicate."""
        digest = evidence.digest
        if digest in self.seen:
            return None
        self.seen.add(digest)
        self.pending.append(evidence)
        receipt = issue_bulk_proof(self, len(self.windows), [ev.digest for ev in self.pending], t)
        self.receipts[digest] = receipt
        return receipt

    def proof_for(self, digest: Digest) -> tuple[AnchoredWindow, MerkleProof] | None:
        for window in self.windows:
            proof = window.proofs.get(digest)
            if proof is not None:
                return window, proof
        return None


def issue_bulk_proof(service: EvidenceService, window_id: int, covered: list[Digest], t: Timestamp) -> BulkProof:
    digests = tuple(covered)
    sig = sign(bulk_proof_message(window_id, t, digests), service.keypair.private)
    return BulkProof(
        covered=digests, window_id=window_id, issued_at=t, sig=sig, issuer_key_digest=service.keypair.key_digest
    )


def aggregate_and_anchor(service: EvidenceService, contract: AnchorContract, t: Timestamp) -> AnchoredWindow | None:
    """
    Close the open window: build the tree over what was promised, store the
    root and keep one inclusion proof per evidence. The window's bulk proof is
    the last one handed out while collecting. An empty window writes nothing
    and returns None.
    """
    bulk = service.promise
    if bulk is None:
        logger.debug(f"Evidence service {service.name}: empty window at t={t}, nothing anchored")
        return None
    if bulk.issued_at > t:
        raise ValueError(f"Window {bulk.window_id} was promised at t={bulk.issued_at}, after anchoring at t={t}")
    window_id = bulk.window_id
    digests = [evidence.digest for evidence in service.pending]

    leaves = [d for d in digests if d not in service.omit]
    tree = merkle.build(leaves)
    proofs = {}
    for digest in leaves:
        proof = merkle.prove(tree, digest)
        if proof is not None:
            proofs[digest] = proof
    block_no = contract.block_number(t)
    contract.store(tree.root, block_no)

    anchored = AnchoredWindow(window_id=window_id, tree=tree, block_no=block_no, bulk_proof=bulk, proofs=proofs)
    service.windows.append(anchored)
    service.pending = []
    logger.info(
        f"Evidence service {service.name} anchored window {window_id}: "
        f"{len(leaves)} evidences under root {tree.root.short()} at block {block_no}"
    )
    return anchored


def verify_anchored(digest: Digest, root: Digest, proof: MerkleProof, contract: AnchorContract) -> int | None:
    """The block number by which the evidence existed, or None if the proof or the anchor does not hold."""
    if not merkle.verify_proof(digest, proof, root):
        return None
    block_no = contract.get_stored(root)
    return block_no or None


def reconfirm(bulk: BulkProof, service: EvidenceService, contract: AnchorContract) -> list[Digest]:
    """
    Check a bulk proof against the anchored tree of its window. Returns the
    covered digests that could not be reconfirmed; an empty list means the
    promise was kept. A bulk proof the service never signed reconfirms nothing.
    """
    if not verify_bulk_proof(bulk, service.public):
        logger.warning(f"Bulk proof for window {bulk.window_id} is not signed by evidence service {service.name}")
        return list(bulk.covered)
    window = next((w for w in service.windows if w.window_id == bulk.window_id), None)
    if window is None:
        return list(bulk.covered)
    failed = [
        digest
        for digest in bulk.covered
        if digest not in window.proofs or verify_anchored(digest, window.root, window.proofs[digest], contract) is None
    ]
    if failed:
        logger.warning(
            f"Evidence service {service.name} broke bulk proof for window {bulk.window_id}: "
            f"{len(failed)} of {len(bulk.covered)} evidences missing from the anchored tree"
        )
    return failed
