"""Server-side storage: the raw file, its Merkle tree and the optional W matrix.

The server never holds client secrets.  It answers four kinds of requests:
block proofs and blind block writes on either tree, and audits ``y = M x``.
Audits and reads share a reader lock; writes take the writer lock, so an
audit always sees one consistent snapshot of ``M``.
"""

from __future__ import annotations

import json
import os
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import field as F
from .merkle import MerkleError, MerklePath, MerkleTree, leaf_count, leaf_hash, mt_init
from .params import PorParams


class RWLock:
    """Many readers or one writer; writers are not starved."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._waiting = 0

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer or self._waiting:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            self._waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class TreeBuilder:
    """Hash leaves as bytes arrive, without holding the whole file."""

    def __init__(self, block_bytes: int):
        self.block_bytes = block_bytes
        self.leaves: list[bytes] = []
        self._pending = bytearray()
        self.size = 0

    def feed(self, data) -> None:
        self.size += len(data)
        self._pending += data
        b = self.block_bytes
        full = len(self._pending) // b * b
        for off in range(0, full, b):
            self.leaves.append(leaf_hash(bytes(self._pending[off:off + b]), b))
        del self._pending[:full]

    def finish(self) -> MerkleTree:
        if self._pending or not self.leaves:
            self.leaves.append(leaf_hash(bytes(self._pending), self.block_bytes))
            self._pending.clear()
        return MerkleTree.from_leaves(self.leaves, self.block_bytes)


class ServerStore:
    """``st_S``: file bytes, ``T_M`` and, when externalized or public, ``W`` and ``T_W``.

    ``data`` is a writable buffer (``bytearray`` or ``np.memmap``).  When the
    store lives on disk, ``directory`` is set and writes are flushed to it.
    """

    def __init__(self, params: PorParams, data, tree_m: MerkleTree,
                 w: bytearray | None = None, tree_w: MerkleTree | None = None,
                 directory: Path | None = None):
        self.params = params
        self.data = data
        self.tree_m = tree_m
        self.w = w
        self.tree_w = tree_w
        self.directory = directory
        self.lock = RWLock()
        if params.has_w and (w is None or tree_w is None):
            raise ValueError("strategy requires W and its tree")

    # construction -------------------------------------------------------

    @classmethod
    def in_memory(cls, params: PorParams, data, w: bytes | None = None) -> "ServerStore":
        buf = bytearray(data)
        if len(buf) != params.n_bytes:
            raise ValueError("data length does not match params")
        tree_m, _ = mt_init(buf, params.block_bytes)
        tree_w = None
        if w is not None:
            w = bytearray(w)
            tree_w, _ = mt_init(w, params.block_bytes)
        return cls(params, buf, tree_m, w, tree_w)

    @classmethod
    def create(cls, directory, params: PorParams, chunks, w: bytes | None = None) -> "ServerStore":
        """Write a new on-disk store from an iterable of data chunks."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        builder = TreeBuilder(params.block_bytes)
        with open(d / "data.bin", "wb") as fh:
            for chunk in chunks:
                builder.feed(chunk)
                fh.write(chunk)
        if builder.size != params.n_bytes:
            raise ValueError(f"received {builder.size} bytes, expected {params.n_bytes}")
        tree_m = builder.finish()
        tree_w = None
        if w is not None:
            (d / "w.bin").write_bytes(w)
            tree_w, _ = mt_init(w, params.block_bytes)
        (d / "meta.json").write_text(json.dumps(params.to_dict()))
        store = cls(params, None, tree_m, bytearray(w) if w is not None else None, tree_w, d)
        store._save_trees()
        store.data = store._map_data()
        return store

    @classmethod
    def open(cls, directory) -> "ServerStore":
        d = Path(directory)
        params = PorParams.from_dict(json.loads((d / "meta.json").read_text()))
        store = cls.__new__(cls)
        store.params, store.directory, store.lock = params, d, RWLock()
        store.data = store._map_data()
        store.tree_m = store._load_tree("tree_m.bin", store.data)
        store.w = store.tree_w = None
        if params.has_w:
            store.w = bytearray((d / "w.bin").read_bytes())
            store.tree_w = store._load_tree("tree_w.bin", store.w)
        return store

    def _map_data(self):
        return np.memmap(self.directory / "data.bin", dtype=np.uint8, mode="r+",
                         shape=(self.params.n_bytes,))

    def _load_tree(self, name: str, data) -> MerkleTree:
        path = self.directory / name
        src = self.directory / ("data.bin" if name == "tree_m.bin" else "w.bin")
        if path.exists() and path.stat().st_mtime_ns >= src.stat().st_mtime_ns:
            try:
                tree = MerkleTree.from_bytes(path.read_bytes())
                if tree.leaf_count == leaf_count(len(data), self.params.block_bytes):
                    return tree
            except MerkleError:
                pass
        tree, _ = mt_init(data, self.params.block_bytes)
        path.write_bytes(tree.to_bytes())
        return tree

    def _save_trees(self) -> None:
        if self.directory is None:
            return
        _atomic_write(self.directory / "tree_m.bin", self.tree_m.to_bytes())
        if self.tree_w is not None:
            _atomic_write(self.directory / "tree_w.bin", self.tree_w.to_bytes())

    # views ----------------------------------------------------------------

    def matrix(self) -> F.MatrixView:
        p = self.params
        return F.MatrixView(self.data, p.m, p.n, p.chunk_bytes, p.n_bytes)

    # requests ---------------------------------------------------------------

    def _tree(self, which: str):
        if which == "m":
            return self.tree_m, self.data
        if which == "w" and self.tree_w is not None:
            return self.tree_w, self.w
        raise ValueError(f"no tree {which!r}")

    def prove(self, which: str, lo: int, hi: int) -> tuple[list[bytes], MerklePath]:
        with self.lock.read():
            tree, data = self._tree(which)
            path = tree.prove(lo, hi)
            b = tree.block_bytes
            blocks = [bytes(data[k * b:(k + 1) * b]) for k in range(lo, hi)]
            return blocks, path

    def write(self, which: str, lo: int, blocks: Sequence[bytes]) -> bytes:
        """Blind overwrite of whole blocks; returns the server's new root."""
        with self.lock.write():
            tree, data = self._tree(which)
            b = tree.block_bytes
            size = len(data)
            if not blocks or lo < 0 or lo + len(blocks) > tree.leaf_count:
                raise MerkleError("write range out of bounds")
            for k, blk in enumerate(blocks):
                off = (lo + k) * b
                want = min(b, size - off)
                if len(blk) != want:
                    raise MerkleError("block has wrong length")
            for k, blk in enumerate(blocks):
                off = (lo + k) * b
                data[off:off + len(blk)] = np.frombuffer(blk, dtype=np.uint8) \
                    if isinstance(data, np.ndarray) else blk
            root = tree.update(lo, [bytes(x) for x in blocks])
            if self.directory is not None:
                if which == "m":
                    data.flush()
                else:
                    _atomic_write(self.directory / "w.bin", bytes(self.w))
                self._save_trees()
            return root

    def iter_audit(self, rho: int, rows_per_block: int = 4096, workers: int = 1) -> Iterator[list[int]]:
        """Yield ``y = M x`` in row blocks; holds the reader lock throughout."""
        p = self.params
        x = F.powers(rho, p.n, p.q)
        with self.lock.read():
            yield from F.iter_mat_vec(self.matrix(), x, p.q, rows_per_block, workers)

    def audit(self, rho: int, workers: int = 1) -> list[int]:
        p = self.params
        x = F.powers(rho, p.n, p.q)
        with self.lock.read():
            return F.mat_vec_stream(self.matrix(), x, p.q, workers)

    # convenience used by the in-process client interface
    def prove_m(self, lo, hi):
        return self.prove("m", lo, hi)

    def prove_w(self, lo, hi):
        return self.prove("w", lo, hi)

    def write_m(self, lo, blocks):
        return self.write("m", lo, blocks)

    def write_w(self, lo, blocks):
        return self.write("w", lo, blocks)

    def corrupt(self, offset: int, xor: int = 1) -> None:
        """Flip bits in the stored file without touching the tree (test hook)."""
        with self.lock.write():
            self.data[offset] = int(self.data[offset]) ^ xor
            if self.directory is not None:
                self.data.flush()

    def close(self) -> None:
        if self.directory is not None:
            self._save_trees()
            if isinstance(self.data, np.memmap):
                self.data.flush()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
