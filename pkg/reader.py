"""
Tamper-evident, location-bound RFID readers.

One observation yields two records built from the same snapshot. The readout
carries the nonce, tag id, time, place and tag data in the clear, plus the
reader signature over (h1, h2) and the digest of the reader key; it goes to
the owning service. The evidence carries only h1, h2, the same signature and
key digest; it goes to a chain node. h1 hashes the nonce with the tag id and
h2 hashes time, place and data.

Both records go into the reader's outbox in one step and are retransmitted
until delivered, so either both reach their destinations or neither does
(pseudo-atomicity). Receivers deduplicate by content digest, which turns
at-least-once into exactly-once.

Tampering changes the reader's private key while it keeps presenting its
certified key digest, so every later signature fails downstream.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import StrEnum

from crypto import (
    Digest,
    EncodingError,
    FieldTag,
    KeyPair,
    PrivateKey,
    Signature,
    decode_int,
    encode,
    expect_fields,
    generate_keypair,
    hash_bytes,
    hash_fields,
    sign,
)
from tag import Tag, TagId, tag_read, tag_write
from world import IndeterminateLocationError, Location, SimulationError, Timestamp, location_near

logger = logging.getLogger(__name__)

NONCE_SIZE = 16
DEFAULT_FORGET_AFTER = 3600

READOUT_LAYOUT = [
    FieldTag.NONCE,
    FieldTag.TAG_ID,
    FieldTag.TIMESTAMP,
    FieldTag.LOCATION,
    FieldTag.DATA,
    FieldTag.SIGNATURE,
    FieldTag.KEY_DIGEST,
]
EVIDENCE_LAYOUT = [FieldTag.H1, FieldTag.H2, FieldTag.SIGNATURE, FieldTag.KEY_DIGEST]


class OutOfRangeError(SimulationError):
    """Raised when the tag is not near the reader's fixed logistical location."""


def compute_h1(n: bytes, tag_id: TagId) -> Digest:
    """The search key: nonce and tag id hashed together."""
    return hash_fields([(FieldTag.NONCE, n), (FieldTag.TAG_ID, tag_id)])


def compute_h2(t: Timestamp, loc: str, data: bytes) -> Digest:
    return hash_fields([(FieldTag.TIMESTAMP, t), (FieldTag.LOCATION, loc), (FieldTag.DATA, data)])


def signed_message(h1: Digest, h2: Digest) -> bytes:
    """The encoded (h1, h2) pair, the exact bytes a reader signs."""
    return encode([(FieldTag.H1, h1), (FieldTag.H2, h2)])


@dataclass(frozen=True)
class Readout:
    n: bytes
    tag_id: TagId
    t: Timestamp
    loc: str
    data: bytes
    sig: Signature
    key_digest: Digest

    @property
    def h1(self) -> Digest:
        return compute_h1(self.n, self.tag_id)

    @property
    def h2(self) -> Digest:
        return compute_h2(self.t, self.loc, self.data)

    def to_bytes(self) -> bytes:
        return encode(
            [
                (FieldTag.NONCE, self.n),
                (FieldTag.TAG_ID, self.tag_id),
                (FieldTag.TIMESTAMP, self.t),
                (FieldTag.LOCATION, self.loc),
                (FieldTag.DATA, self.data),
                (FieldTag.SIGNATURE, self.sig),
                (FieldTag.KEY_DIGEST, self.key_digest),
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Readout":
        n, tag_id, t, loc, payload, sig, key_digest = expect_fields(data, READOUT_LAYOUT)
        try:
            location = loc.decode("utf-8")
        except UnicodeDecodeError as e:
            raise EncodingError(f"Location label is not UTF-8: {e}") from e
        return cls(n, tag_id, decode_int(t), location, payload, Signature(sig), Digest(key_digest))

    @property
    def digest(self) -> Digest:
        return hash_bytes(self.to_bytes())


@dataclass(frozen=True)
class Evidence:
    """Digests and signature only; nothing here reveals n, the tag, the time, the place or the data."""

    h1: Digest
    h2: Digest
    sig: Signature
    key_digest: Digest

    def to_bytes(self) -> bytes:
        return encode(
            [
                (FieldTag.H1, self.h1),
                (FieldTag.H2, self.h2),
                (FieldTag.SIGNATURE, self.sig),
                (FieldTag.KEY_DIGEST, self.key_digest),
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Evidence":
        h1, h2, sig, key_digest = expect_fields(data, EVIDENCE_LAYOUT)
        return cls(Digest(h1), Digest(h2), Signature(sig), Digest(key_digest))

    @property
    def digest(self) -> Digest:
        return hash_bytes(self.to_bytes())

    @property
    def signed_bytes(self) -> bytes:
        return signed_message(self.h1, self.h2)


def evidence_for(readout: Readout) -> Evidence:
    """The evidence a faithful reader would have emitted alongside this readout."""
    return Evidence(h1=readout.h1, h2=readout.h2, sig=readout.sig, key_digest=readout.key_digest)


class DeliveryKind(StrEnum):
    READOUT = "readout"
    EVIDENCE = "evidence"


@dataclass
class Delivery:
    """One queued transmission; pair_id links a readout to its evidence."""

    kind: DeliveryKind
    payload: Readout | Evidence
    destination: str
    pair_id: int
    created_at: Timestamp
    attempts: int = 0
    # Chain nodes that answered without accepting; the next attempt goes elsewhere
    refused_by: list[str] = field(default_factory=list)

    @property
    def content_digest(self) -> Digest:
        return self.payload.digest


@dataclass
class RecentRead:
    tag_id: TagId
    data: bytes
    forget_at: Timestamp


@dataclass
class Reader:
    name: str
    keypair: KeyPair
    owner: str
    location: Location
    chain_entry: str = "node-0"
    forget_after: int = DEFAULT_FORGET_AFTER
    # The key that actually signs; differs from keypair.private once tampered
    signing_key: PrivateKey | None = None
    tampered: bool = False
    # Scenario-injected positioning lies (no physical tampering involved)
    time_offset: int = 0
    reported_location: Location | None = None
    # Non-volatile: survives restart()
    outbox: list[Delivery] = field(default_factory=list)
    recent: list[RecentRead] = field(default_factory=list)
    next_pair_id: int = 0

    def __post_init__(self) -> None:
        if self.signing_key is None:
            self.signing_key = self.keypair.private

    @property
    def id(self) -> Digest:
        """Digest of the provisioned (certified) public key."""
        return self.keypair.key_digest

    @classmethod
    def manufacture(cls, name: str, seed: int | bytes, owner: str, location: Location, **kwargs: object) -> "Reader":
        """A new reader generates its own key pair."""
        return cls(name=name, keypair=generate_keypair(seed), owner=owner, location=location, **kwargs)  # type: ignore[arg-type]


def observe(
    reader: Reader,
    tag: Tag,
    t: Timestamp,
    n: bytes,
    write_data: bytes | None = None,
    read_range: float = 10.0,
) -> tuple[Readout, Evidence]:
    """Read (and optionally first write) a tag, then queue the readout/evidence pair atomically."""
    tag_location = tag.loc(t)
    try:
        near = location_near(reader.location, tag_location, read_range)
    except IndeterminateLocationError as e:
        raise OutOfRangeError(f"Reader {reader.name} cannot place tag: {e}") from e
    if not near:
        raise OutOfRangeError(
            f"Reader {reader.name} at {reader.location.label} cannot reach tag at {tag_location.label}"
        )
    if len(n) != NONCE_SIZE:
        raise ValueError(f"Random number n must be {NONCE_SIZE} bytes, got {len(n)}")

    if write_data is not None:
        tag_write(tag, t, write_data)
    tag_id, data = tag_read(tag, t)

    # A falsified clock can run behind, never before the epoch
    reported_t = max(0, t + reader.time_offset)
    reported_loc = (reader.reported_location or reader.location).label
    h1 = compute_h1(n, tag_id)
    h2 = compute_h2(reported_t, reported_loc, data)
    assert reader.signing_key is not None
    sig = sign(signed_message(h1, h2), reader.signing_key)

    readout = Readout(n=n, tag_id=tag_id, t=reported_t, loc=reported_loc, data=data, sig=sig, key_digest=reader.id)
    evidence = Evidence(h1=h1, h2=h2, sig=sig, key_digest=reader.id)

    pair_id = reader.next_pair_id
    reader.next_pair_id += 1
    reader.outbox.extend(
        [
            Delivery(DeliveryKind.READOUT, readout, reader.owner, pair_id, t),
            Delivery(DeliveryKind.EVIDENCE, evidence, reader.chain_entry, pair_id, t),
        ]
    )
    reader.recent.append(RecentRead(tag_id=tag_id, data=data, forget_at=t + reader.forget_after))
    logger.debug(f"Reader {reader.name} observed tag {tag_id.hex()[:12]} at t={t} (pair {pair_id})")
    return readout, evidence


def flush_outbox(reader: Reader, network: Callable[[Delivery], bool]) -> int:
    """
    Try every queued delivery once, in order. network() returns True when the
    destination acknowledged; anything unacknowledged stays queued for the next
    flush. Returns the number delivered this call.
    """
    delivered = 0
    retained: list[Delivery] = []
    for delivery in reader.outbox:
        delivery.attempts += 1
        if network(delivery):
            delivered += 1
        else:
            retained.append(delivery)
    reader.outbox = retained
    if retained:
        logger.debug(f"Reader {reader.name}: {delivered} delivered, {len(retained)} retained for retransmission")
    return delivered


def forget_expired(reader: Reader, now: Timestamp) -> int:
    """Drop tag id and data plaintext whose retention has run out; returns how many were forgotten."""
    before = len(reader.recent)
    reader.recent = [r for r in reader.recent if r.forget_at > now]
    return before - len(reader.recent)


def tamper(reader: Reader, t: Timestamp) -> Reader:
    """Physical tampering: the active private key changes irreversibly; the certified identity does not."""
    assert reader.signing_key is not None
    new_key = generate_keypair(reader.signing_key.data + t.to_bytes(8, "big"))
    reader.signing_key = new_key.private
    if not reader.tampered:
        logger.info(f"Reader {reader.name} tampered at t={t}; its signatures no longer match its certificate")
    reader.tampered = True
    return reader


def falsify(reader: Reader, time_offset: int = 0, location: Location | None = None) -> Reader:
    """Fool the positioning subsystem: later readouts report a shifted time and/or another place."""
    reader.time_offset = time_offset
    reader.reported_location = location
    return reader


def restart(reader: Reader) -> Reader:
    """Power cycle: volatile working memory is lost, the outbox is not."""
    reader.recent = []
    return reader
