"""
Logistics services and their clients.

A service owns readers and hands out the random numbers that keep the search
key h1 unguessable. It keeps every readout its readers deliver and answers
client queries keyed by h1. Scenarios can switch a service into one of the
dishonest answering modes to exercise client-side detection.
"""

import logging
import random
from dataclasses import dataclass, field, replace
from enum import StrEnum

from crypto import Digest, Signature
from reader import NONCE_SIZE, Readout, compute_h1
from tag import TagId
from world import ConfigurationError, Timestamp

logger = logging.getLogger(__name__)

TAMPERABLE_FIELDS = ("data", "t", "loc")
FALSE_TIME_SHIFT = 7200


class Dishonesty(StrEnum):
    NONE = "none"
    HIDE = "hide"
    TAMPER = "tamper"
    INJECT = "inject"
    WRONG_TAG = "wrong_tag"


class IngestOutcome(StrEnum):
    STORED = "stored"
    DUPLICATE = "duplicate"
    REJECTED = "rejected"


@dataclass
class Client:
    """A party that receives n from a service and later verifies readouts against the chain."""

    name: str
    numbers: dict[TagId, list[bytes]] = field(default_factory=dict)

    def receive(self, tag_id: TagId, n: bytes) -> None:
        known = self.numbers.setdefault(tag_id, [])
        if n not in known:
            known.append(n)

    def keys_for(self, tag_id: TagId) -> list[Digest]:
        return [compute_h1(n, tag_id) for n in self.numbers.get(tag_id, [])]


@dataclass
class SharedNumber:
    n: bytes
    clients: list[str] = field(default_factory=list)


@dataclass
class LogisticsService:
    name: str
    rng: random.Random
    nonce_scope: str = "tag_shipment"
    # Key digest of every reader this service owns
    readers: set[Digest] = field(default_factory=set)
    readouts: dict[Digest, list[Readout]] = field(default_factory=dict)
    seen: set[Digest] = field(default_factory=set)
    shared_numbers: dict[TagId, list[SharedNumber]] = field(default_factory=dict)
    dishonesty: Dishonesty = Dishonesty.NONE
    tamper_field: str | None = None
    injected: list[Readout] = field(default_factory=list)

    @classmethod
    def create(cls, name: str, seed: int, nonce_scope: str = "tag_shipment") -> "LogisticsService":
        return cls(name=name, rng=random.Random(f"{seed}:service:{name}"), nonce_scope=nonce_scope)

    def own(self, reader_id: Digest) -> None:
        self.readers.add(reader_id)

    def latest_number(self, tag_id: TagId) -> bytes | None:
        numbers = self.shared_numbers.get(tag_id)
        return numbers[-1].n if numbers else None

    def all_readouts(self) -> list[Readout]:
        return [ro for bucket in self.readouts.values() for ro in bucket]


def provision_n(service: LogisticsService, tag_id: TagId, clients: list[Client]) -> bytes:
    """
    Pick n for a tag and share it with the named clients. The nonce scope
    decides reuse: a fresh n per shipment, one n per tag, or one n for every
    tag the service handles.
    """
    n: bytes | None = None
    if service.nonce_scope == "tag":
        n = service.latest_number(tag_id)
    elif service.nonce_scope == "service":
        n = next((entries[0].n for entries in service.shared_numbers.values() if entries), None)
    if n is None:
        n = service.rng.randbytes(NONCE_SIZE)

    entries = service.shared_numbers.setdefault(tag_id, [])
    entry = next((e for e in entries if e.n == n), None)
    if entry is None:
        entry = SharedNumber(n=n)
        entries.append(entry)
    for client in clients:
        share_number(service, tag_id, n, client, entry)
    if not clients:
        logger.debug(f"Service {service.name} holds n for tag {tag_id.hex()[:12]} for later distribution")
    return n


def share_number(
    service: LogisticsService, tag_id: TagId, n: bytes, client: Client, entry: SharedNumber | None = None
) -> None:
    if entry is None:
        entry = next((e for e in service.shared_numbers.get(tag_id, []) if e.n == n), None)
        if entry is None:
            raise ConfigurationError(f"Service {service.name} never provisioned this n for the tag")
    client.receive(tag_id, n)
    if client.name not in entry.clients:
        entry.clients.append(client.name)


def ingest_readout(service: LogisticsService, ro: Readout, t: Timestamp) -> IngestOutcome:
    """Store a readout under h1; duplicates are idempotent, strangers' readouts are refused."""
    if ro.key_digest not in service.readers:
        logger.warning(f"Service {service.name} refused a readout from reader {ro.key_digest.short()} it does not own")
        return IngestOutcome.REJECTED
    digest = ro.digest
    if digest in service.seen:
        logger.debug(f"Service {service.name} already holds readout {digest.short()}")
        return IngestOutcome.DUPLICATE
    service.seen.add(digest)
    service.readouts.setdefault(ro.h1, []).append(ro)
    logger.debug(f"Service {service.name} stored readout {digest.short()} at t={t}")
    return IngestOutcome.STORED


def query_readouts(service: LogisticsService, key: Digest, t: Timestamp) -> list[Readout]:
    honest = list(service.readouts.get(key, []))
    match service.dishonesty:
        case Dishonesty.NONE:
            return honest
        case Dishonesty.HIDE:
            return []
        case Dishonesty.TAMPER:
            return [tamper_readout(ro, service.tamper_field or "data") for ro in honest]
        case Dishonesty.INJECT:
            return honest + [ro for ro in service.injected if ro.h1 == key]
        case Dishonesty.WRONG_TAG:
            others = [ro for h1, bucket in service.readouts.items() if h1 != key for ro in bucket]
            return others[:1] or honest


def set_dishonesty(service: LogisticsService, mode: Dishonesty, tamper_field: str | None = None) -> None:
    if mode == Dishonesty.TAMPER and (tamper_field or "data") not in TAMPERABLE_FIELDS:
        raise ConfigurationError(f"Cannot tamper field {tamper_field!r}; choose from {TAMPERABLE_FIELDS}")
    service.dishonesty = mode
    service.tamper_field = tamper_field
    if mode != Dishonesty.NONE:
        logger.info(f"Service {service.name} now answers dishonestly ({mode})")


def tamper_readout(ro: Readout, field_name: str) -> Readout:
    """Alter one field and keep the reader's original signature."""
    match field_name:
        case "data":
            return replace(ro, data=ro.data + b"*")
        case "t":
            return replace(ro, t=ro.t + FALSE_TIME_SHIFT)
        case "loc":
            return replace(ro, loc=f"{ro.loc}-elsewhere")
    raise ConfigurationError(f"Cannot tamper field {field_name!r}")


def fabricate_readout(
    service: LogisticsService, n: bytes, tag_id: TagId, t: Timestamp, loc: str, data: bytes, key_digest: Digest
) -> Readout:
    """A readout no reader ever produced: the service cannot sign as its reader, so the signature is noise."""
    sig = Signature(service.rng.randbytes(64))
    ro = Readout(n=n, tag_id=tag_id, t=t, loc=loc, data=data, sig=sig, key_digest=key_digest)
    service.injected.append(ro)
    return ro
