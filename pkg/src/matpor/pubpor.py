"""Publicly verifiable variant: control vectors hidden in the exponent.

The writer publishes ``K = g**U`` together with both Merkle roots in a
signed manifest.  The server stores ``M`` and ``w = g**(U M)``.  Anyone
holding the manifest audits by checking, for every control row ``k``::

    prod_i K[k][i] ** y[i]  ==  prod_j w[k][j] ** x[j]

Writes update ``w`` homomorphically: the writer multiplies the affected
column by ``g**delta`` and never needs ``V`` in the clear.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives import serialization

from . import field as F
from .group import GroupError, Ristretto255, group_by_id
from .merkle import mt_init, root_from_path
from .params import PorParams, Strategy, derive_params, effective_kappa
from .porcore import (AuditTranscript, Reject, _cell_deltas, _cell_range, _check_range,
                      _patched_blocks, _verify_fetch, _w_column_window, control_rows_u,
                      por_extract, sample_seeds)
from .store import ServerStore

ELEM = 32


class ManifestError(ValueError):
    pass


@dataclass
class PublicKeyMaterial:
    """The signed manifest a verifier needs: ``K``, both roots, dimensions."""

    m: int
    n: int
    t: int
    n_bytes: int
    group_id: int
    seq: int
    timestamp: int
    kappa_eff: float
    K: list[list[bytes]]
    root_m: bytes
    root_w: bytes
    verify_key: bytes
    signature: bytes = b""

    MAGIC = b"PORK"
    VERSION = 1

    def body(self) -> bytes:
        head = self.MAGIC + struct.pack("<BB", self.VERSION, self.group_id)
        head += struct.pack("<QQQQQQH", self.m, self.n, self.t, self.n_bytes, self.seq,
                            self.timestamp, int(round(self.kappa_eff * 100)))
        keys = b"".join(e for row in self.K for e in row)
        return head + keys + self.root_m + self.root_w + self.verify_key

    def to_bytes(self) -> bytes:
        return self.body() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "PublicKeyMaterial":
        if data[:4] != cls.MAGIC:
            raise ManifestError("not a manifest file")
        version, gid = struct.unpack_from("<BB", data, 4)
        if version != cls.VERSION:
            raise ManifestError(f"unsupported manifest version {version}")
        m, n, t, n_bytes, seq, ts, kc = struct.unpack_from("<QQQQQQH", data, 6)
        off = 6 + 50
        K = []
        for _ in range(t):
            K.append([bytes(data[off + i * ELEM:off + (i + 1) * ELEM]) for i in range(m)])
            off += m * ELEM
        root_m, root_w = data[off:off + 28], data[off + 28:off + 56]
        vk = data[off + 56:off + 88]
        sig = data[off + 88:]
        if len(sig) != 64:
            raise ManifestError("truncated manifest")
        return cls(m, n, t, n_bytes, gid, seq, ts, kc / 100, K, root_m, root_w, vk, sig)

    def verify_signature(self) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(self.verify_key).verify(self.signature, self.body())
            return True
        except (InvalidSignature, ValueError):
            return False

    def params(self, lam: int = 40) -> PorParams:
        if self.group_id != Ristretto255.group_id:
            raise ManifestError("only ristretto255 manifests map to wire parameters")
        return derive_params(self.n_bytes, lam=lam, mode="public", shape=(self.m, self.n), t=self.t)


@dataclass
class WriterState:
    params: PorParams
    group: object
    s: tuple[int, ...]
    root_m: bytes
    root_w: bytes
    signing_seed: bytes
    seq: int = 0

    def u_entry(self, k: int, i: int) -> int:
        return pow(self.s[k], i + 1, self.group.order)

    def manifest(self) -> PublicKeyMaterial:
        p, g = self.params, self.group
        K = [[g.encode(g.base_exp(u)) for u in row] for row in control_rows_u(self.s, p.m, g.order)]
        key = Ed25519PrivateKey.from_private_bytes(self.signing_seed)
        vk = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        pk = PublicKeyMaterial(p.m, p.n, p.t, p.n_bytes, g.group_id, self.seq, int(time.time()),
                               effective_kappa(g.order, p.m), K, self.root_m, self.root_w, vk)
        pk.signature = key.sign(pk.body())
        return pk

    MAGIC = b"PORC"

    def to_bytes(self) -> bytes:
        p = self.params
        if p.field.insecure:
            raise ValueError("insecure test parameters cannot be persisted")
        out = self.MAGIC + struct.pack("<BBH", 1, 2, p.lam)
        out += struct.pack("<QQQQ", p.m, p.n, p.t, p.n_bytes)
        out += b"".join(x.to_bytes(ELEM, "little") for x in self.s)
        out += self.root_m + self.root_w + self.signing_seed + struct.pack("<QB", self.seq, self.group.group_id)
        return out

    @classmethod
    def from_bytes(cls, data: bytes) -> "WriterState":
        if data[:4] != cls.MAGIC or data[5] != 2:
            raise ValueError("not a public writer state file")
        (lam,) = struct.unpack_from("<H", data, 6)
        m, n, t, n_bytes = struct.unpack_from("<QQQQ", data, 8)
        off = 40
        s = tuple(int.from_bytes(data[off + k * ELEM:off + (k + 1) * ELEM], "little") for k in range(t))
        off += t * ELEM
        root_m, root_w, seed = data[off:off + 28], data[off + 28:off + 56], data[off + 56:off + 88]
        seq, gid = struct.unpack_from("<QB", data, off + 88)
        params = derive_params(n_bytes, lam=lam, mode="public", shape=(m, n), t=t)
        return cls(params, group_by_id(gid), s, root_m, root_w, seed, seq)


def _w_bytes(group, V) -> bytes:
    cols = zip(*V)
    return b"".join(b"".join(group.encode(group.base_exp(v)) for v in col) for col in cols)


def pub_client_setup(params: PorParams, data, group=None, rng=None, signing_seed: bytes | None = None):
    """Writer half of Init.  Returns ``(writer, manifest, w_bytes)``."""
    if not params.public:
        raise ValueError("params are not in public mode")
    group = group or Ristretto255()
    if group.order != params.q:
        raise ValueError("field modulus must equal the group order")
    if len(data) != params.n_bytes:
        raise ValueError("data length does not match params")
    view = F.MatrixView(data, params.m, params.n, params.chunk_bytes, params.n_bytes)
    s = sample_seeds(params.t, group.order, rng)
    V = F.vec_mat_stream(view, control_rows_u(s, params.m, group.order), group.order)
    w = _w_bytes(group, V)
    _, root_m = mt_init(view.buf, params.block_bytes)
    _, root_w = mt_init(w, params.block_bytes)
    seed = signing_seed or Ed25519PrivateKey.generate().private_bytes(
        serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption())
    writer = WriterState(params, group, s, root_m, root_w, seed)
    return writer, writer.manifest(), w


def pub_init(params: PorParams, data, group=None, rng=None):
    """Init with an in-memory server: ``(writer, manifest, server)``."""
    writer, manifest, w = pub_client_setup(params, data, group, rng)
    server = ServerStore.in_memory(params, data, w)
    return writer, manifest, server


def pub_write_bytes(writer: WriterState, server, offset: int, data: bytes) -> PublicKeyMaterial:
    """Verified write with a homomorphic update of ``w``; returns the new manifest."""
    p, g = writer.params, writer.group
    data = bytes(data)
    _check_range(p, offset, len(data))
    b = p.block_bytes
    lo, hi = offset // b, (offset + len(data) - 1) // b + 1
    blocks, path = _verify_fetch(server.prove_m, writer.root_m, p.leaf_count, lo, hi, b)
    old, new, new_blocks = _patched_blocks(p, blocks, lo, offset, data)
    c0, c1 = _cell_range(p, offset, len(data))
    deltas = list(_cell_deltas(p, old, new, lo * b, c0, c1))
    new_root_m = root_from_path(p.leaf_count, lo, new_blocks, path, b)
    new_w = None
    if deltas:
        cols, wlo, whi = _w_column_window(p, (j for _, j, _ in deltas))
        wblocks, wpath = _verify_fetch(server.prove_w, writer.root_w, p.w_leaf_count, wlo, whi, b)
        wj = bytearray(b"".join(wblocks))
        base = wlo * b
        r = p.w_record_bytes
        shift = {j: [0] * p.t for j in cols}
        for i, j, d in deltas:
            for k in range(p.t):
                shift[j][k] = (shift[j][k] + writer.u_entry(k, i) * d) % g.order
        for j in cols:
            rec = wj[j * r - base:(j + 1) * r - base]
            try:
                elems = [g.decode(rec[k * ELEM:(k + 1) * ELEM]) for k in range(p.t)]
            except GroupError as exc:
                raise Reject(str(exc)) from None
            upd = [g.mul(e, g.base_exp(dk)) for e, dk in zip(elems, shift[j])]
            wj[j * r - base:(j + 1) * r - base] = b"".join(g.encode(e) for e in upd)
        sizes = [len(x) for x in wblocks]
        new_wblocks, o = [], 0
        for sz in sizes:
            new_wblocks.append(bytes(wj[o:o + sz]))
            o += sz
        new_w = (wlo, new_wblocks, root_from_path(p.w_leaf_count, wlo, new_wblocks, wpath, b))
    server.write_m(lo, new_blocks)
    if new_w is not None:
        server.write_w(new_w[0], new_w[1])
        writer.root_w = new_w[2]
    writer.root_m = new_root_m
    writer.seq += 1
    return writer.manifest()


def pub_write(writer: WriterState, server, i: int, j: int, value: int) -> PublicKeyMaterial:
    p = writer.params
    if not (0 <= i < p.m and 0 <= j < p.n):
        raise IndexError((i, j))
    c = p.chunk_bytes
    off = (i * p.n + j) * c
    avail = min(c, p.n_bytes - off)
    if avail <= 0:
        raise IndexError("cell lies entirely past the end of the file")
    if not 0 <= value < min(p.q, 256 ** avail):
        raise F.FieldError(f"value does not fit in {avail} bytes of this cell")
    return pub_write_bytes(writer, server, off, value.to_bytes(avail, "little"))


def fetch_w(manifest: PublicKeyMaterial, server, params: PorParams, group) -> list[list]:
    """Verified ``w`` as ``t`` rows of group elements; raises :class:`Reject`."""
    blocks, _ = _verify_fetch(server.prove_w, manifest.root_w, params.w_leaf_count, 0,
                              params.w_leaf_count, params.block_bytes)
    raw = b"".join(blocks)
    r = params.w_record_bytes
    try:
        cols = [[group.decode(raw[j * r + k * ELEM:j * r + (k + 1) * ELEM]) for k in range(params.t)]
                for j in range(params.n)]
    except GroupError as exc:
        raise Reject(str(exc)) from None
    return [list(row) for row in zip(*cols)]


def group_check(manifest: PublicKeyMaterial, group, W, r: int, y) -> bool:
    """``K**y == W**x`` in the group, row by row."""
    x = F.powers(r, manifest.n, group.order)
    for k in range(manifest.t):
        K = [group.decode(e) for e in manifest.K[k]]
        if group.encode(group.multi_exp(K, y)) != group.encode(group.multi_exp(W[k], x)):
            return False
    return True


def pub_audit(manifest: PublicKeyMaterial, server, params: PorParams, group=None, rng=None) -> AuditTranscript:
    """Audit with public material only."""
    if not manifest.verify_signature():
        raise ManifestError("manifest signature does not verify")
    group = group or group_by_id(manifest.group_id)
    r = F.random_nonzero(group.order, rng)
    try:
        y = list(server.audit(r))
    except F.FieldError:
        return AuditTranscript(r, [], False)
    if len(y) != manifest.m or any(not 0 <= v < group.order for v in y):
        return AuditTranscript(r, y, False)
    try:
        W = fetch_w(manifest, server, params, group)
    except Reject:
        return AuditTranscript(r, y, False)
    return AuditTranscript(r, y, group_check(manifest, group, W, r, y))


def writer_check(writer: WriterState, W, r: int, y) -> bool:
    """Writer shortcut: ``g**(U y) == W**x`` with one dot product per row."""
    g, p = writer.group, writer.params
    x = F.powers(r, p.n, g.order)
    for k in range(p.t):
        lhs = g.base_exp(F.horner_powers(y, writer.s[k], g.order))
        if g.encode(lhs) != g.encode(g.multi_exp(W[k], x)):
            return False
    return True


def pub_extract(params: PorParams, transcripts) -> bytes:
    """Identical to the private extractor; ``x`` and ``y`` are public anyway."""
    return por_extract(params, transcripts)
