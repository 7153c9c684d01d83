"""
Reader vendors and the certificates they issue.

A certificate binds a reader public key to a validity window [t_ini, t_exp],
signed by the vendor and tagged with the digest of the vendor key. The window
is inclusive at both ends. Revocation is an early t_exp and nothing more.
Vendor keys themselves come from an external PKI, stubbed here as a static
table of (key, valid_from, valid_to) entries.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Protocol

from crypto import (
    Digest,
    FieldTag,
    KeyPair,
    PublicKey,
    Signature,
    decode_int,
    encode,
    expect_fields,
    generate_keypair,
    get_suite,
    hash_bytes,
    sign,
)
from world import SimulationError, Timestamp

logger = logging.getLogger(__name__)

CERTIFICATE_LAYOUT = [FieldTag.PUBLIC_KEY, FieldTag.T_INI, FieldTag.T_EXP, FieldTag.SIGNATURE, FieldTag.KEY_DIGEST]


class CertificateWindowError(SimulationError):
    """Raised when a certificate window is empty or starts before issuance."""


def certificate_message(reader_public: PublicKey, t_ini: Timestamp, t_exp: Timestamp) -> bytes:
    """The encoded (reader key, t_ini, t_exp), the bytes a vendor signs."""
    return encode([(FieldTag.PUBLIC_KEY, reader_public), (FieldTag.T_INI, t_ini), (FieldTag.T_EXP, t_exp)])


@dataclass(frozen=True)
class Certificate:
    reader_public: PublicKey
    t_ini: Timestamp
    t_exp: Timestamp
    sig: Signature
    vendor_key_digest: Digest

    @property
    def key_digest(self) -> Digest:
        """Digest of the reader key: the lookup key of the chain's certification function."""
        return self.reader_public.digest

    @property
    def signed_bytes(self) -> bytes:
        return certificate_message(self.reader_public, self.t_ini, self.t_exp)

    def covers(self, t: Timestamp) -> bool:
        return self.t_ini <= t <= self.t_exp

    def to_bytes(self) -> bytes:
        return encode(
            [
                (FieldTag.PUBLIC_KEY, self.reader_public),
                (FieldTag.T_INI, self.t_ini),
                (FieldTag.T_EXP, self.t_exp),
                (FieldTag.SIGNATURE, self.sig),
                (FieldTag.KEY_DIGEST, self.vendor_key_digest),
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes, scheme: str | None = None) -> "Certificate":
        public, t_ini, t_exp, sig, vendor_digest = expect_fields(data, CERTIFICATE_LAYOUT)
        return cls(
            reader_public=PublicKey(scheme or get_suite().signature_scheme, public),
            t_ini=decode_int(t_ini),
            t_exp=decode_int(t_exp),
            sig=Signature(sig),
            vendor_key_digest=Digest(vendor_digest),
        )

    @property
    def digest(self) -> Digest:
        return hash_bytes(self.to_bytes())


@dataclass
class PkiEntry:
    public: PublicKey
    valid_from: Timestamp
    valid_to: Timestamp


@dataclass
class PkiStub:
    """The external PKI that vouches for vendor keys, reduced to a lookup table."""

    entries: dict[Digest, PkiEntry] = field(default_factory=dict)

    def register(self, public: PublicKey, valid_from: Timestamp, valid_to: Timestamp) -> Digest:
        digest = public.digest
        self.entries[digest] = PkiEntry(public=public, valid_from=valid_from, valid_to=valid_to)
        return digest

    def expire(self, vendor_key_digest: Digest, t: Timestamp) -> None:
        """The PKI stops vouching for the key after t."""
        entry = self.entries.get(vendor_key_digest)
        if entry is not None:
            entry.valid_to = min(entry.valid_to, t)

    @classmethod
    def from_records(cls, records: list[dict[str, Any]], scheme: str | None = None) -> "PkiStub":
        """Load {"public": hex, "valid_from": int, "valid_to": int} records from configuration."""
        stub = cls()
        for record in records:
            public = PublicKey(scheme or get_suite().signature_scheme, bytes.fromhex(record["public"]))
            stub.register(public, int(record["valid_from"]), int(record["valid_to"]))
        return stub


def pki_lookup(stub: PkiStub, vendor_key_digest: Digest, t: Timestamp) -> PublicKey | None:
    """The vendor key, if the PKI vouches for it at t."""
    entry = stub.entries.get(vendor_key_digest)
    if entry is None or not entry.valid_from <= t <= entry.valid_to:
        return None
    return entry.public


class TermSink(Protocol):
    """Anything a certificate can be submitted to (a chain node)."""

    def submit(self, term: Any, t: Timestamp) -> Any: ...


@dataclass
class Vendor:
    name: str
    keypair: KeyPair
    issued: list[Certificate] = field(default_factory=list)

    @property
    def key_digest(self) -> Digest:
        return self.keypair.key_digest

    @classmethod
    def create(cls, name: str, seed: int | bytes) -> "Vendor":
        return cls(name=name, keypair=generate_keypair(seed))


def issue_certificate(
    vendor: Vendor,
    reader_public: PublicKey,
    t: Timestamp,
    t_ini: Timestamp,
    t_exp: Timestamp,
    chain: TermSink | None = None,
) -> Certificate:
    """Sign a certificate for reader_public and submit it to a chain node at issuance time t."""
    if not t_ini < t_exp:
        raise CertificateWindowError(f"Empty validity window [{t_ini}, {t_exp}]")
    if t > t_ini:
        raise CertificateWindowError(f"Certificate issued at t={t} after its own start t_ini={t_ini}")
    sig = sign(certificate_message(reader_public, t_ini, t_exp), vendor.keypair.private)
    cert = Certificate(
        reader_public=reader_public, t_ini=t_ini, t_exp=t_exp, sig=sig, vendor_key_digest=vendor.key_digest
    )
    vendor.issued.append(cert)
    logger.info(f"Vendor {vendor.name} certified reader key {cert.key_digest.short()} for [{t_ini}, {t_exp}]")
    if chain is not None:
        chain.submit(cert, t)
    return cert
