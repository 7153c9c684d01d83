"""
Tests for Merkle tree construction, inclusion proofs and proof encoding.

Roots and proofs are checked against an independent recursive oracle that
pairs digests the straightforward way.
"""

import random

import pytest

import merkle
from crypto import Digest, FieldTag, encode, hash_bytes
from merkle import MerkleError, MerkleProof, ProofStep, Side


def oracle_pair(left: Digest, right: Digest) -> Digest:
    length = (32).to_bytes(4, "big")
    return hash_bytes(bytes([FieldTag.LEFT]) + length + left.value + bytes([FieldTag.RIGHT]) + length + right.value)


def oracle_root(leaves: list[Digest]) -> Digest:
    if not leaves:
        return hash_bytes(b"")
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [oracle_pair(level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def random_leaves(rng: random.Random, count: int) -> list[Digest]:
    return [Digest(rng.randbytes(32)) for _ in range(count)]


def flip_bit(data: bytes, bit: int) -> bytes:
    mutated = bytearray(data)
    mutated[bit // 8] ^= 1 << (bit % 8)
    return bytes(mutated)


@pytest.mark.unit
class TestBuild:
    def test_empty_tree(self):
        tree = merkle.build([])
        assert tree.root == hash_bytes(b"")
        assert tree.height == 0
        assert len(tree) == 0

    def test_single_leaf_is_root(self):
        leaf = hash_bytes(b"x")
        tree = merkle.build([leaf])
        assert tree.root == leaf
        assert tree.height == 0

    def test_pair_hash_matches_oracle(self):
        a, b = hash_bytes(b"a"), hash_bytes(b"b")
        assert merkle.hash_pair(a, b) == oracle_pair(a, b)
        assert merkle.hash_pair(a, b) == hash_bytes(encode([(FieldTag.LEFT, a), (FieldTag.RIGHT, b)]))

    def test_odd_level_duplicates_last(self):
        a, b, c = (hash_bytes(x) for x in (b"a", b"b", b"c"))
        expected = merkle.hash_pair(merkle.hash_pair(a, b), merkle.hash_pair(c, c))
        assert merkle.build([a, b, c]).root == expected

    def test_order_matters(self):
        a, b = hash_bytes(b"a"), hash_bytes(b"b")
        assert merkle.build([a, b]).root != merkle.build([b, a]).root

    @pytest.mark.parametrize(("size", "height"), [(2, 1), (3, 2), (4, 2), (5, 3), (64, 6)])
    def test_height(self, size, height):
        assert merkle.build(random_leaves(random.Random(size), size)).height == height


@pytest.mark.unit
class TestOracleEquivalence:
    """Every size from 1 to 64: same root as the oracle, every proof verifies."""

    @pytest.mark.parametrize("size", range(1, 65))
    def test_root_and_all_proofs(self, size):
        leaves = random_leaves(random.Random(f"merkle:{size}"), size)
        tree = merkle.build(leaves)
        assert tree.root == oracle_root(leaves)
        for index, leaf in enumerate(leaves):
            proof = merkle.prove(tree, leaf)
            assert proof is not None
            assert proof.leaf_index == index
            assert len(proof.path) == tree.height
            assert merkle.verify_proof(leaf, proof, tree.root)

    def test_absent_leaf_has_no_proof(self):
        tree = merkle.build(random_leaves(random.Random(1), 5))
        assert merkle.prove(tree, hash_bytes(b"not there")) is None

    def test_duplicate_leaf_proves_first_occurrence(self):
        a, b = hash_bytes(b"a"), hash_bytes(b"b")
        tree = merkle.build([a, b, a])
        proof = merkle.prove(tree, a)
        assert proof is not None and proof.leaf_index == 0


@pytest.mark.unit
class TestProofRejection:
    def test_wrong_leaf(self):
        leaves = random_leaves(random.Random(2), 8)
        tree = merkle.build(leaves)
        proof = merkle.prove(tree, leaves[3])
        assert not merkle.verify_proof(leaves[4], proof, tree.root)

    def test_wrong_root(self):
        leaves = random_leaves(random.Random(2), 8)
        tree = merkle.build(leaves)
        assert not merkle.verify_proof(leaves[0], merkle.prove(tree, leaves[0]), hash_bytes(b"other"))

    def test_side_flag_must_match_index(self):
        leaves = random_leaves(random.Random(2), 4)
        tree = merkle.build(leaves)
        proof = merkle.prove(tree, leaves[0])
        flipped = MerkleProof(
            leaf_index=proof.leaf_index,
            path=(ProofStep(proof.path[0].sibling, Side.LEFT),) + proof.path[1:],
        )
        assert not merkle.verify_proof(leaves[0], flipped, tree.root)

    def test_index_beyond_path(self):
        leaf = hash_bytes(b"a")
        assert not merkle.verify_proof(leaf, MerkleProof(leaf_index=1, path=()), leaf)
        assert not merkle.verify_proof(leaf, MerkleProof(leaf_index=-1, path=()), leaf)

    @pytest.mark.parametrize("size", [2, 3, 7, 16, 33])
    def test_every_single_bit_mutation_rejected(self, size):
        leaves = random_leaves(random.Random(f"mutate:{size}"), size)
        tree = merkle.build(leaves)
        index = size // 2
        encoded = merkle.prove(tree, leaves[index]).to_bytes()
        for bit in range(len(encoded) * 8):
            try:
                mutated = MerkleProof.from_bytes(flip_bit(encoded, bit))
            except MerkleError:
                continue
            assert not merkle.verify_proof(leaves[index], mutated, tree.root), f"bit {bit} survived"


@pytest.mark.unit
class TestProofEncoding:
    def test_layout(self):
        leaves = random_leaves(random.Random(3), 3)
        proof = merkle.prove(merkle.build(leaves), leaves[2])
        data = proof.to_bytes()
        assert data[0] == FieldTag.LEAF_INDEX
        assert MerkleProof.from_bytes(data) == proof

    def test_rejects_garbage(self):
        with pytest.raises(MerkleError):
            MerkleProof.from_bytes(b"\xff\xff")

    def test_rejects_missing_index(self):
        with pytest.raises(MerkleError):
            MerkleProof.from_bytes(encode([(FieldTag.PATH_ENTRY, b"\x00" + bytes(32))]))

    def test_rejects_bad_side_byte(self):
        data = encode([(FieldTag.LEAF_INDEX, 0), (FieldTag.PATH_ENTRY, b"\x02" + bytes(32))])
        with pytest.raises(MerkleError):
            MerkleProof.from_bytes(data)

    def test_rejects_short_entry(self):
        data = encode([(FieldTag.LEAF_INDEX, 0), (FieldTag.PATH_ENTRY, b"\x00" + bytes(31))])
        with pytest.raises(MerkleError):
            MerkleProof.from_bytes(data)
