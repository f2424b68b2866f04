"""Binary Merkle hash tree over fixed-size blocks.

Leaves are ``H(0x00 || block)`` with the last block zero-padded to the block
size, internal nodes are ``H(0x01 || left || right)`` and an unpaired node is
promoted unchanged to the next level.  ``H`` is SHA-512/224.

A proof for a contiguous block range carries only the boundary siblings
("uncles"): at each level, the left neighbour of the first covered node when
that node is a right child, and the right neighbour of the last covered node
when it is a left child with a sibling.  Uncles are listed bottom-up, left
before right within a level.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

DIGEST_BYTES = 28
LEFT, RIGHT = 0, 1

_LEAF = b"\x00"
_NODE = b"\x01"


class MerkleError(ValueError):
    pass


def _h(*parts: bytes) -> bytes:
    h = hashlib.new("sha512_224")
    for p in parts:
        h.update(p)
    return h.digest()


def leaf_hash(block: bytes, block_bytes: int) -> bytes:
    if len(block) > block_bytes:
        raise MerkleError("block larger than block size")
    pad = block_bytes - len(block)
    return _h(_LEAF, block, bytes(pad)) if pad else _h(_LEAF, block)


def node_hash(left: bytes, right: bytes) -> bytes:
    return _h(_NODE, left, right)


def leaf_count(n_bytes: int, block_bytes: int) -> int:
    return max(1, -(-n_bytes // block_bytes))


def level_sizes(leaves: int) -> list[int]:
    sizes = [leaves]
    while sizes[-1] > 1:
        sizes.append((sizes[-1] + 1) // 2)
    return sizes


@dataclass
class MerklePath:
    uncles: list[tuple[int, bytes]]

    def encode(self) -> bytes:
        out = [struct.pack(">H", len(self.uncles))]
        for side, digest in self.uncles:
            if len(digest) != DIGEST_BYTES or side not in (LEFT, RIGHT):
                raise MerkleError("malformed uncle")
            out.append(bytes([side]) + digest)
        return b"".join(out)

    @classmethod
    def decode(cls, data: bytes, offset: int = 0) -> tuple["MerklePath", int]:
        """Parse a path starting at ``offset``; returns the path and the end offset."""
        if len(data) < offset + 2:
            raise MerkleError("truncated path")
        (count,) = struct.unpack_from(">H", data, offset)
        offset += 2
        end = offset + count * (1 + DIGEST_BYTES)
        if len(data) < end:
            raise MerkleError("truncated path")
        uncles = []
        for k in range(count):
            o = offset + k * (1 + DIGEST_BYTES)
            side = data[o]
            if side not in (LEFT, RIGHT):
                raise MerkleError("bad side marker")
            uncles.append((side, bytes(data[o + 1:o + 1 + DIGEST_BYTES])))
        return cls(uncles), end

    def __len__(self):
        return len(self.uncles)


class MerkleTree:
    """Level-ordered digests; ``levels[0]`` are the leaves, ``levels[-1] == [root]``."""

    def __init__(self, levels: list[list[bytes]], block_bytes: int):
        self.levels = levels
        self.block_bytes = block_bytes

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def leaf_count(self) -> int:
        return len(self.levels[0])

    @property
    def node_count(self) -> int:
        """Distinct digests; promoted nodes are shared, not stored twice."""
        return self.leaf_count + sum(len(lv) // 2 for lv in self.levels[:-1])

    @classmethod
    def from_leaves(cls, leaves: list[bytes], block_bytes: int) -> "MerkleTree":
        if not leaves:
            raise MerkleError("tree needs at least one leaf")
        levels = [leaves]
        while len(levels[-1]) > 1:
            prev = levels[-1]
            nxt = [node_hash(prev[k], prev[k + 1]) for k in range(0, len(prev) - 1, 2)]
            if len(prev) % 2:
                nxt.append(prev[-1])
            levels.append(nxt)
        return cls(levels, block_bytes)

    def prove(self, lo: int, hi: int) -> MerklePath:
        """Boundary uncles for leaves ``[lo, hi)``."""
        if not 0 <= lo < hi <= self.leaf_count:
            raise MerkleError(f"block range [{lo}, {hi}) outside 0..{self.leaf_count}")
        uncles = []
        for level in self.levels[:-1]:
            if lo % 2:
                uncles.append((LEFT, level[lo - 1]))
            last = hi - 1
            if last % 2 == 0 and last + 1 < len(level):
                uncles.append((RIGHT, level[last + 1]))
            lo, hi = lo // 2, last // 2 + 1
        return MerklePath(uncles)

    def update(self, lo: int, blocks: Sequence[bytes]) -> bytes:
        """Replace leaves ``lo..lo+len(blocks)`` and rehash their root paths."""
        hi = lo + len(blocks)
        if not blocks or not 0 <= lo < hi <= self.leaf_count:
            raise MerkleError("update range out of bounds")
        self.levels[0][lo:hi] = [leaf_hash(b, self.block_bytes) for b in blocks]
        for d in range(1, len(self.levels)):
            prev, cur = self.levels[d - 1], self.levels[d]
            lo, hi = lo // 2, (hi - 1) // 2 + 1
            for k in range(lo, hi):
                a = 2 * k
                cur[k] = node_hash(prev[a], prev[a + 1]) if a + 1 < len(prev) else prev[a]
        return self.root

    def to_bytes(self) -> bytes:
        """Header, then each level's hashed nodes (promoted copies are implied)."""
        head = struct.pack(">IQ", self.block_bytes, self.leaf_count)
        body = [b"".join(self.levels[0])]
        for prev, lv in zip(self.levels, self.levels[1:]):
            body.append(b"".join(lv[:len(prev) // 2]))
        return head + b"".join(body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MerkleTree":
        if len(data) < 12:
            raise MerkleError("truncated tree file")
        block_bytes, leaves = struct.unpack_from(">IQ", data, 0)
        if leaves == 0:
            raise MerkleError("tree needs at least one leaf")
        if len(data) != 12 + (2 * leaves - 1) * DIGEST_BYTES:
            raise MerkleError("tree file has the wrong size")
        off = 12
        levels = []
        prev = None
        for size in level_sizes(leaves):
            hashed = size if prev is None else prev // 2
            end = off + hashed * DIGEST_BYTES
            lv = [bytes(data[k:k + DIGEST_BYTES]) for k in range(off, end, DIGEST_BYTES)]
            if prev is not None and prev % 2:
                lv.append(levels[-1][-1])
            levels.append(lv)
            off, prev = end, size
        return cls(levels, block_bytes)


def iter_blocks(data, block_bytes: int) -> Iterable[bytes]:
    mv = memoryview(data)
    for off in range(0, max(len(mv), 1), block_bytes):
        yield mv[off:off + block_bytes]


def mt_init(data, block_bytes: int) -> tuple[MerkleTree, bytes]:
    """Build the tree over ``data``; returns ``(tree, root)``."""
    if block_bytes <= 0:
        raise MerkleError("block size must be positive")
    if len(data) == 0:
        raise MerkleError("cannot build a tree over empty data")
    leaves = [leaf_hash(b, block_bytes) for b in iter_blocks(data, block_bytes)]
    tree = MerkleTree.from_leaves(leaves, block_bytes)
    return tree, tree.root


def mt_prove(tree: MerkleTree, lo: int, hi: int, data) -> tuple[list[bytes], MerklePath]:
    """Blocks ``[lo, hi)`` of ``data`` plus their boundary path."""
    b = tree.block_bytes
    blocks = [bytes(data[k * b:(k + 1) * b]) for k in range(lo, hi)]
    return blocks, tree.prove(lo, hi)


def root_from_path(leaves: int, lo: int, blocks: Sequence[bytes], path: MerklePath,
                   block_bytes: int) -> bytes:
    """Recompute the root from a contiguous run of blocks and their uncles.

    Raises :class:`MerkleError` when the path does not have the shape implied
    by ``leaves`` and the range.
    """
    hi = lo + len(blocks)
    if not blocks or not 0 <= lo < hi <= leaves:
        raise MerkleError("range out of bounds")
    for k, blk in enumerate(blocks):
        full = block_bytes if lo + k < leaves - 1 else None
        if len(blk) > block_bytes or (full is not None and len(blk) != full):
            raise MerkleError("block has wrong length")
    nodes = [leaf_hash(bytes(blk), block_bytes) for blk in blocks]
    uncles = iter(path.uncles)
    used = 0
    for size in level_sizes(leaves)[:-1]:
        if lo % 2:
            side, dig = next(uncles, (None, None))
            used += 1
            if side != LEFT:
                raise MerkleError("path shape mismatch")
            nodes.insert(0, dig)
            lo -= 1
        last = hi - 1
        if last % 2 == 0 and last + 1 < size:
            side, dig = next(uncles, (None, None))
            used += 1
            if side != RIGHT:
                raise MerkleError("path shape mismatch")
            nodes.append(dig)
            hi += 1
        paired = [node_hash(nodes[k], nodes[k + 1]) for k in range(0, len(nodes) - 1, 2)]
        if len(nodes) % 2:
            paired.append(nodes[-1])
        nodes = paired
        lo, hi = lo // 2, last // 2 + 1
    if used != len(path.uncles) or len(nodes) != 1:
        raise MerkleError("path shape mismatch")
    return nodes[0]


def mt_verify(root: bytes, leaves: int, lo: int, blocks: Sequence[bytes], path: MerklePath,
              block_bytes: int) -> bool:
    """True iff the blocks and uncles hash to ``root``.  Never raises."""
    try:
        return root_from_path(leaves, lo, blocks, path, block_bytes) == root
    except (MerkleError, TypeError, ValueError):
        return False


def mt_update(tree: MerkleTree, lo: int, new_blocks: Sequence[bytes]) -> tuple[MerkleTree, bytes]:
    root = tree.update(lo, new_blocks)
    return tree, root
