"""
Hashing, signatures and the canonical term encoding.

Every term that gets hashed or signed goes through encode(): a tag-length-value
layout with a 1-byte registered field tag and a 4-byte big-endian length, so
two distinct field sequences can never produce the same bytes. Without that,
hashing (nonce, tag id) or (time, place, data) would be ambiguous.

The algorithms are pluggable. HASH_ALGORITHM selects the 256-bit hash
(sha3_256 by default) and SIGNATURE_SCHEME the signature scheme (ed25519 by
default, ecdsa_p256 as the alternative). Keys carry the name of the scheme that
made them, so a key minted under one suite still verifies after a switch.
"""

import hashlib
import logging
import os
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519

logger = logging.getLogger(__name__)

DIGEST_SIZE = 32
LENGTH_BYTES = 4
INT_BYTES = 8
# Domain prefix for seed -> private key derivation (simulation plumbing only)
KEY_SEED_PREFIX = b"rfid-evidence:keypair:"


class CryptoError(Exception):
    """Base error for hashing, signing and encoding."""


class KeyMaterialError(CryptoError):
    """Raised when private or public key bytes are corrupt or belong to an unknown scheme."""


class SuiteError(CryptoError):
    """Raised when HASH_ALGORITHM or SIGNATURE_SCHEME names something unsupported."""


class EncodingError(CryptoError):
    """Raised on an unregistered field tag or a malformed canonical encoding."""


HASH_FUNCTIONS: dict[str, Callable[[bytes], bytes]] = {
    "sha3_256": lambda data: hashlib.sha3_256(data).digest(),
    "sha256": lambda data: hashlib.sha256(data).digest(),
    "blake2b_256": lambda data: hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest(),
}


@dataclass(frozen=True, order=True)
class Digest:
    """A 32-byte hash value."""

    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != DIGEST_SIZE:
            raise CryptoError(f"Digest must be {DIGEST_SIZE} bytes, got {len(self.value)}")

    def __bytes__(self) -> bytes:
        return self.value

    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        try:
            return cls(bytes.fromhex(text))
        except ValueError as e:
            raise CryptoError(f"Invalid digest hex: {text!r}") from e

    def short(self) -> str:
        """First 12 hex characters, for log lines."""
        return self.value.hex()[:12]


@dataclass(frozen=True)
class PublicKey:
    scheme: str
    data: bytes

    @property
    def digest(self) -> Digest:
        """Hash of the public key bytes: the key identifier used by readers, vendors and the chain."""
        return hash_bytes(self.data)


@dataclass(frozen=True)
class PrivateKey:
    scheme: str
    data: bytes = field(repr=False)


@dataclass(frozen=True)
class Signature:
    data: bytes


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    private: PrivateKey = field(repr=False)

    @property
    def key_digest(self) -> Digest:
        return self.public.digest


# -- Signature schemes ------------------------------------------------------


class SignatureScheme:
    """Fixed interface every signature algorithm is adapted to."""

    name: str = ""

    def private_from_seed(self, seed: bytes) -> bytes:
        raise NotImplementedError

    def public_from_private(self, private: bytes) -> bytes:
        raise NotImplementedError

    def sign(self, message: bytes, private: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, message: bytes, signature: bytes, public: bytes) -> bool:
        raise NotImplementedError


class Ed25519Scheme(SignatureScheme):
    name = "ed25519"

    def _load(self, private: bytes) -> ed25519.Ed25519PrivateKey:
        try:
            return ed25519.Ed25519PrivateKey.from_private_bytes(private)
        except ValueError as e:
            raise KeyMaterialError(f"Corrupt ed25519 private key: {e}") from e

    def private_from_seed(self, seed: bytes) -> bytes:
        return seed

    def public_from_private(self, private: bytes) -> bytes:
        return (
            self._load(private)
            .public_key()
            .public_bytes(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)
        )

    def sign(self, message: bytes, private: bytes) -> bytes:
        return self._load(private).sign(message)

    def verify(self, message: bytes, signature: bytes, public: bytes) -> bool:
        try:
            ed25519.Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


class EcdsaP256Scheme(SignatureScheme):
    """ECDSA over NIST P-256 with SHA-256. Signatures are randomized (not byte-reproducible)."""

    name = "ecdsa_p256"
    # Order of the P-256 base point
    ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551

    def _load(self, private: bytes) -> ec.EllipticCurvePrivateKey:
        scalar = int.from_bytes(private, "big")
        if len(private) != 32 or not 0 < scalar < self.ORDER:
            raise KeyMaterialError("Corrupt ecdsa_p256 private key: scalar out of range")
        return ec.derive_private_key(scalar, ec.SECP256R1())

    def private_from_seed(self, seed: bytes) -> bytes:
        scalar = int.from_bytes(seed, "big") % (self.ORDER - 1) + 1
        return scalar.to_bytes(32, "big")

    def public_from_private(self, private: bytes) -> bytes:
        return (
            self._load(private)
            .public_key()
            .public_bytes(encoding=serialization.Encoding.X962, format=serialization.PublicFormat.CompressedPoint)
        )

    def sign(self, message: bytes, private: bytes) -> bytes:
        return self._load(private).sign(message, ec.ECDSA(hashes.SHA256()))

    def verify(self, message: bytes, signature: bytes, public: bytes) -> bool:
        try:
            key = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), public)
            key.verify(signature, message, ec.ECDSA(hashes.SHA256()))
        except (InvalidSignature, ValueError):
            return False
        return True


SIGNATURE_SCHEMES: dict[str, SignatureScheme] = {
    Ed25519Scheme.name: Ed25519Scheme(),
    EcdsaP256Scheme.name: EcdsaP256Scheme(),
}


@dataclass(frozen=True)
class CryptoSuite:
    """The configured (hash, signature) pair."""

    hash_algorithm: str = "sha3_256"
    signature_scheme: str = "ed25519"

    def __post_init__(self) -> None:
        if self.hash_algorithm not in HASH_FUNCTIONS:
            raise SuiteError(f"Unknown hash algorithm {self.hash_algorithm!r}; choose from {sorted(HASH_FUNCTIONS)}")
        if self.signature_scheme not in SIGNATURE_SCHEMES:
            raise SuiteError(
                f"Unknown signature scheme {self.signature_scheme!r}; choose from {sorted(SIGNATURE_SCHEMES)}"
            )

    @classmethod
    def from_env(cls) -> "CryptoSuite":
        return cls(
            hash_algorithm=os.getenv("HASH_ALGORITHM", "sha3_256").lower(),
            signature_scheme=os.getenv("SIGNATURE_SCHEME", "ed25519").lower(),
        )


_suite: CryptoSuite = CryptoSuite()


def get_suite() -> CryptoSuite:
    return _suite


def use_suite(suite: CryptoSuite) -> CryptoSuite:
    """Install suite as the active one and return the previous suite."""
    global _suite
    previous = _suite
    _suite = suite
    logger.debug(f"Crypto suite set to {suite.hash_algorithm}/{suite.signature_scheme}")
    return previous


def _scheme(name: str) -> SignatureScheme:
    scheme = SIGNATURE_SCHEMES.get(name)
    if scheme is None:
        raise KeyMaterialError(f"Key belongs to unknown signature scheme {name!r}")
    return scheme


# -- Operations -------------------------------------------------------------


def hash_bytes(data: bytes) -> Digest:
    """H(data) under the active hash algorithm."""
    return Digest(HASH_FUNCTIONS[_suite.hash_algorithm](data))


def generate_keypair(seed: int | bytes) -> KeyPair:
    """Deterministic key pair: the same seed always yields the same pair."""
    if isinstance(seed, int):
        if seed < 0:
            raise KeyMaterialError("Key seed must be non-negative")
        material = seed.to_bytes(max(1, (seed.bit_length() + 7) // 8), "big")
    else:
        material = seed
    seed32 = hashlib.sha256(KEY_SEED_PREFIX + material).digest()
    scheme = _scheme(_suite.signature_scheme)
    private = scheme.private_from_seed(seed32)
    public = scheme.public_from_private(private)
    return KeyPair(public=PublicKey(scheme.name, public), private=PrivateKey(scheme.name, private))


def derive_public(private: PrivateKey) -> PublicKey:
    return PublicKey(private.scheme, _scheme(private.scheme).public_from_private(private.data))


def sign(message: bytes, private: PrivateKey) -> Signature:
    """sig(message, k^-1). Raises KeyMaterialError on corrupt key bytes."""
    return Signature(_scheme(private.scheme).sign(message, private.data))


def verify(message: bytes, signature: Signature, public: PublicKey) -> bool:
    """OK (True) iff signature was made over exactly message by public's private key. Never raises."""
    scheme = SIGNATURE_SCHEMES.get(public.scheme)
    if scheme is None:
        return False
    return scheme.verify(message, signature.data, public.data)


# -- Canonical encoding -----------------------------------------------------


class FieldTag(IntEnum):
    """Registered field tags. Values sit in 0x41-0x7f, clear of common length bytes."""

    NONCE = 0x41
    TAG_ID = 0x42
    TIMESTAMP = 0x43
    LOCATION = 0x44
    DATA = 0x45
    H1 = 0x46
    H2 = 0x47
    SIGNATURE = 0x48
    KEY_DIGEST = 0x49
    PUBLIC_KEY = 0x4A
    T_INI = 0x4B
    T_EXP = 0x4C
    LEFT = 0x4D
    RIGHT = 0x4E
    LEAF_INDEX = 0x4F
    PATH_ENTRY = 0x50
    HEIGHT = 0x51
    PREV_DIGEST = 0x52
    CREATED_AT = 0x53
    MERKLE_ROOT = 0x54
    WORK_COST = 0x55
    EVIDENCE = 0x56
    CERTIFICATE = 0x57
    WINDOW_ID = 0x58
    COVERED = 0x59
    BLOCK = 0x5A
    TERM_DIGEST = 0x5B


type FieldValue = bytes | int | str | Digest | PublicKey | Signature


def _payload(value: FieldValue) -> bytes:
    if isinstance(value, bool):
        raise EncodingError("Booleans have no canonical encoding")
    if isinstance(value, bytes):
        return value
    if isinstance(value, int):
        if value < 0 or value.bit_length() > INT_BYTES * 8:
            raise EncodingError(f"Integer {value} does not fit an unsigned {INT_BYTES}-byte field")
        return value.to_bytes(INT_BYTES, "big")
    if isinstance(value, str):
        return value.encode("utf-8")
    if isinstance(value, Digest):
        return value.value
    if isinstance(value, (PublicKey, Signature)):
        return value.data
    raise EncodingError(f"No canonical encoding for {type(value).__name__}")


def encode(fields: Iterable[tuple[FieldTag | int, FieldValue]]) -> bytes:
    """Tag-length-value concatenation; injective and self-delimiting."""
    out = bytearray()
    for tag, value in fields:
        try:
            registered = FieldTag(tag)
        except ValueError as e:
            raise EncodingError(f"Unregistered field tag 0x{int(tag):02x}") from e
        payload = _payload(value)
        out.append(registered)
        out += len(payload).to_bytes(LENGTH_BYTES, "big")
        out += payload
    return bytes(out)


def decode(data: bytes) -> list[tuple[FieldTag, bytes]]:
    """Inverse of encode(), returning raw payloads. Strict: any trailing or truncated bytes are an error."""
    fields: list[tuple[FieldTag, bytes]] = []
    pos = 0
    while pos < len(data):
        if pos + 1 + LENGTH_BYTES > len(data):
            raise EncodingError(f"Truncated field header at offset {pos}")
        try:
            tag = FieldTag(data[pos])
        except ValueError as e:
            raise EncodingError(f"Unregistered field tag 0x{data[pos]:02x} at offset {pos}") from e
        length = int.from_bytes(data[pos + 1 : pos + 1 + LENGTH_BYTES], "big")
        start = pos + 1 + LENGTH_BYTES
        if start + length > len(data):
            raise EncodingError(f"Field at offset {pos} declares {length} bytes, only {len(data) - start} remain")
        fields.append((tag, data[start : start + length]))
        pos = start + length
    return fields


def decode_int(payload: bytes) -> int:
    if len(payload) != INT_BYTES:
        raise EncodingError(f"Integer field must be {INT_BYTES} bytes, got {len(payload)}")
    return int.from_bytes(payload, "big")


def expect_fields(data: bytes, layout: list[FieldTag]) -> list[bytes]:
    """Decode data and require exactly the given tag sequence; return the payloads."""
    fields = decode(data)
    tags = [tag for tag, _ in fields]
    if tags != layout:
        raise EncodingError(f"Unexpected field layout {[t.name for t in tags]}, want {[t.name for t in layout]}")
    return [payload for _, payload in fields]


def hash_fields(fields: Iterable[tuple[FieldTag | int, FieldValue]]) -> Digest:
    return hash_bytes(encode(fields))


def load_test_vectors(path: Path) -> list[tuple[bytes, Digest]]:
    """
    Read "<message-hex> <digest-hex>" lines; "-" stands for the empty message
    and lines starting with '#' are comments.
    """
    vectors: list[tuple[bytes, Digest]] = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        message_hex, digest_hex = line.split()
        message = b"" if message_hex == "-" else bytes.fromhex(message_hex)
        vectors.append((message, Digest.from_hex(digest_hex)))
    return vectors
