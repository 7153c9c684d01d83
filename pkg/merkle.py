"""
Merkle trees over ordered digest lists: build, prove, verify.

Conventions (total functions, so every size has a defined root):
- empty tree: root = H(b"")
- single leaf: root = the leaf itself
- odd level: the last digest is paired with a copy of itself
- parent = H(encode(LEFT l, RIGHT r)); the LEFT/RIGHT tags keep interior
  nodes from ever colliding with a leaf encoding
"""

from dataclasses import dataclass
from enum import IntEnum

from crypto import DIGEST_SIZE, INT_BYTES, Digest, EncodingError, FieldTag, decode, decode_int, encode, hash_bytes


class MerkleError(Exception):
    """Raised when a serialized proof cannot be decoded."""


class Side(IntEnum):
    """Which side of the running node the sibling sits on."""

    LEFT = 0
    RIGHT = 1


@dataclass(frozen=True)
class ProofStep:
    sibling: Digest
    side: Side


@dataclass(frozen=True)
class MerkleProof:
    leaf_index: int
    path: tuple[ProofStep, ...]

    def to_bytes(self) -> bytes:
        """leaf_index, then one (side byte || 32-byte digest) entry per level."""
        fields: list[tuple[FieldTag, bytes | int]] = [(FieldTag.LEAF_INDEX, self.leaf_index)]
        fields += [(FieldTag.PATH_ENTRY, bytes([step.side]) + step.sibling.value) for step in self.path]
        return encode(fields)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MerkleProof":
        try:
            fields = decode(data)
        except EncodingError as e:
            raise MerkleError(f"Malformed proof encoding: {e}") from e
        if not fields or fields[0][0] != FieldTag.LEAF_INDEX or len(fields[0][1]) != INT_BYTES:
            raise MerkleError("Proof must start with an 8-byte leaf index")
        path: list[ProofStep] = []
        for tag, payload in fields[1:]:
            if tag != FieldTag.PATH_ENTRY or len(payload) != 1 + DIGEST_SIZE:
                raise MerkleError(f"Malformed path entry ({tag.name}, {len(payload)} bytes)")
            if payload[0] not in (Side.LEFT, Side.RIGHT):
                raise MerkleError(f"Invalid side byte {payload[0]}")
            path.append(ProofStep(sibling=Digest(payload[1:]), side=Side(payload[0])))
        return cls(leaf_index=decode_int(fields[0][1]), path=tuple(path))


def hash_pair(left: Digest, right: Digest) -> Digest:
    return hash_bytes(encode([(FieldTag.LEFT, left), (FieldTag.RIGHT, right)]))


@dataclass(frozen=True)
class MerkleTree:
    """Immutable once built; levels[0] are the leaves, levels[-1] is [root]."""

    leaves: tuple[Digest, ...]
    levels: tuple[tuple[Digest, ...], ...]

    @property
    def root(self) -> Digest:
        if not self.leaves:
            return hash_bytes(b"")
        return self.levels[-1][0]

    @property
    def height(self) -> int:
        return max(0, len(self.levels) - 1)

    def __len__(self) -> int:
        return len(self.leaves)


def build(leaves: list[Digest] | tuple[Digest, ...]) -> MerkleTree:
    """Build the tree bottom-up in leaf insertion order."""
    level = tuple(leaves)
    if not level:
        return MerkleTree(leaves=(), levels=())
    levels = [level]
    while len(level) > 1:
        padded = level + (level[-1],) if len(level) % 2 else level
        level = tuple(hash_pair(padded[i], padded[i + 1]) for i in range(0, len(padded), 2))
        levels.append(level)
    return MerkleTree(leaves=tuple(leaves), levels=tuple(levels))


def prove(tree: MerkleTree, leaf: Digest) -> MerkleProof | None:
    """Proof for the first occurrence of leaf, or None (φ) when it is not in the tree."""
    try:
        index = tree.leaves.index(leaf)
    except ValueError:
        return None
    path: list[ProofStep] = []
    position = index
    for level in tree.levels[:-1]:
        if position % 2:
            path.append(ProofStep(sibling=level[position - 1], side=Side.LEFT))
        else:
            # Past the end means this node was paired with its own copy
            sibling = level[position + 1] if position + 1 < len(level) else level[position]
            path.append(ProofStep(sibling=sibling, side=Side.RIGHT))
        position //= 2
    return MerkleProof(leaf_index=index, path=tuple(path))


def verify_proof(leaf: Digest, proof: MerkleProof, root: Digest) -> bool:
    """Fold leaf along the path; the side flags must agree with the bits of leaf_index."""
    if proof.leaf_index < 0 or proof.leaf_index >> len(proof.path):
        return False
    node = leaf
    position = proof.leaf_index
    for step in proof.path:
        expected_side = Side.LEFT if position % 2 else Side.RIGHT
        if step.side != expected_side:
            return False
        node = hash_pair(step.sibling, node) if step.side == Side.LEFT else hash_pair(node, step.sibling)
        position //= 2
    return node == root
