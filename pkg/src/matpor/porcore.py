"""Privately verifiable proof of retrievability: Init, Read, Write, Audit, Extract.

The client keeps ``t`` secret seeds ``s_k``; the control matrix is
``U[k, i] = s_k**(i+1)`` and is regenerated on demand, never stored.  Its
companion ``V = U M`` is either kept by the client (``Strategy.LOCAL``) or
stored on the server encrypted column by column with an AEAD cipher
(``Strategy.EXTERN``).

An audit sends one nonzero ``rho``; the server answers ``y = M x`` with
``x = [rho, ..., rho**n]`` and the client accepts iff ``U y == V x``.

``server`` arguments are duck-typed: anything with ``prove_m``, ``write_m``,
``prove_w``, ``write_w`` and ``audit`` works, e.g.
:class:`matpor.store.ServerStore` in process or
:class:`matpor.wire.RemoteServer` over TCP.

Indices are 0-based throughout.
"""

from __future__ import annotations

import hashlib
import secrets
import struct
from dataclasses import dataclass, field as dc_field, replace
from typing import Iterable, Sequence

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from . import field as F
from .merkle import MerkleError, mt_init, mt_verify, root_from_path
from .params import COUNTER_BYTES, ParameterError, PorParams, Strategy, derive_params
from .store import ServerStore

__all__ = [
    "PorParams", "Strategy", "derive_params", "ParameterError",
    "ClientState", "AuditTranscript", "Reject", "ExtractionFailure",
    "client_setup", "por_init", "por_read", "por_write", "read_bytes", "write_bytes",
    "por_audit", "por_extract", "control_rows_u", "sample_seeds",
]


class Reject(Exception):
    """The server's answer failed verification.  Client state is unchanged."""


class ExtractionFailure(Exception):
    def __init__(self, distinct: int, needed: int):
        super().__init__(f"only {distinct} distinct accepted challenges, need {needed}")
        self.distinct = distinct
        self.needed = needed


# ---------------------------------------------------------------------------
# state


@dataclass
class ClientState:
    params: PorParams
    s: tuple[int, ...]
    root_m: bytes
    V: list[list[int]] | None = None
    key: bytes | None = None
    root_w: bytes | None = None

    def u_entry(self, k: int, i: int) -> int:
        return pow(self.s[k], i + 1, self.params.q)

    MAGIC = b"PORC"
    VERSION = 1
    _MODES = {Strategy.LOCAL: 0, Strategy.EXTERN: 1}

    def to_bytes(self) -> bytes:
        p = self.params
        if p.field.insecure:
            raise ValueError("insecure test parameters cannot be persisted")
        if p.strategy not in self._MODES:
            raise ValueError("public writer state is stored by matpor.pubpor")
        out = [self.MAGIC, struct.pack("<BBH", self.VERSION, self._MODES[p.strategy], p.lam),
               struct.pack("<QQQQ", p.m, p.n, p.t, p.n_bytes),
               p.field.encode_vector(self.s), self.root_m]
        if p.strategy is Strategy.LOCAL:
            out.append(b"".join(p.field.encode_vector(row) for row in self.V))
        else:
            out += [self.key, self.root_w]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClientState":
        if data[:4] != cls.MAGIC:
            raise ValueError("not a client state file")
        version, mode, lam = struct.unpack_from("<BBH", data, 4)
        if version != cls.VERSION:
            raise ValueError(f"unsupported state version {version}")
        strategy = {v: k for k, v in cls._MODES.items()}.get(mode)
        if strategy is None:
            raise ValueError(f"unknown mode byte {mode}")
        m, n, t, n_bytes = struct.unpack_from("<QQQQ", data, 8)
        params = derive_params(n_bytes, lam=lam, strategy=strategy, shape=(m, n), t=t)
        fld = params.field
        off = 40
        w = fld.elem_bytes
        s = tuple(fld.decode_vector(data[off:off + t * w], t))
        off += t * w
        root_m = data[off:off + 28]
        off += 28
        if strategy is Strategy.LOCAL:
            V = [fld.decode_vector(data[off + k * n * w: off + (k + 1) * n * w], n) for k in range(t)]
            off += t * n * w
            state = cls(params, s, root_m, V=V)
        else:
            state = cls(params, s, root_m, key=data[off:off + 32], root_w=data[off + 32:off + 60])
            off += 60
        if off != len(data):
            raise ValueError("trailing bytes in state file")
        return state


@dataclass
class AuditTranscript:
    rho: int
    y: list[int]
    accepted: bool
    # wall-clock bookkeeping, not part of the serialized record
    bytes_up: int = dc_field(default=0, compare=False)
    bytes_down: int = dc_field(default=0, compare=False)

    MAGIC = b"PORT"

    def to_bytes(self, fld: F.Field) -> bytes:
        head = self.MAGIC + struct.pack("<BBBQ", 1, fld.elem_bytes, int(self.accepted), len(self.y))
        return head + fld.encode(self.rho) + fld.encode_vector(self.y)

    @classmethod
    def from_bytes(cls, data: bytes, fld: F.Field) -> "AuditTranscript":
        if data[:4] != cls.MAGIC:
            raise ValueError("not a transcript file")
        version, width, verdict, m = struct.unpack_from("<BBBQ", data, 4)
        if version != 1 or width != fld.elem_bytes:
            raise ValueError("transcript does not match this field")
        off = 15
        rho = fld.decode(data[off:off + width])
        y = fld.decode_vector(data[off + width:], m)
        return cls(rho, y, bool(verdict))

    def rho_digest(self) -> str:
        return hashlib.sha256(str(self.rho).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# helpers


def sample_seeds(t: int, q: int, rng=None) -> tuple[int, ...]:
    """``t`` distinct nonzero field elements."""
    if t >= q:
        raise ParameterError("t must be below q")
    seen: list[int] = []
    while len(seen) < t:
        s = F.random_nonzero(q, rng)
        if s not in seen:
            seen.append(s)
    return tuple(seen)


def control_rows_u(s: Sequence[int], m: int, q: int) -> list[list[int]]:
    return [F.powers(sk, m, q) for sk in s]


def _aead_nonce(j: int, counter: int) -> bytes:
    return struct.pack("<IQ", j, counter)


def _aad(j: int) -> bytes:
    return b"matpor/W" + struct.pack("<I", j)


def encrypt_column(key: bytes, params: PorParams, j: int, counter: int, col: Sequence[int]) -> bytes:
    body = params.field.encode_vector(col)
    ct = ChaCha20Poly1305(key).encrypt(_aead_nonce(j, counter), body, _aad(j))
    return struct.pack("<Q", counter) + ct


def decrypt_column(key: bytes, params: PorParams, j: int, record: bytes) -> tuple[int, list[int]]:
    (counter,) = struct.unpack_from("<Q", record, 0)
    try:
        body = ChaCha20Poly1305(key).decrypt(_aead_nonce(j, counter), bytes(record[COUNTER_BYTES:]), _aad(j))
    except InvalidTag:
        raise Reject(f"W column {j} failed authentication") from None
    return counter, params.field.decode_vector(body, params.t)


def _verify_fetch(server_prove, root: bytes, leaves: int, lo: int, hi: int, block_bytes: int):
    try:
        blocks, path = server_prove(lo, hi)
    except MerkleError as exc:
        raise Reject(str(exc)) from None
    if len(blocks) != hi - lo or not mt_verify(root, leaves, lo, blocks, path, block_bytes):
        raise Reject("Merkle verification failed")
    return [bytes(b) for b in blocks], path


def _cell_range(params: PorParams, offset: int, length: int) -> tuple[int, int]:
    c = params.chunk_bytes
    return offset // c, (offset + length - 1) // c + 1


def _check_range(params: PorParams, offset: int, length: int) -> None:
    if length <= 0 or offset < 0 or offset + length > params.n_bytes:
        raise IndexError(f"byte range [{offset}, {offset + length}) outside file of {params.n_bytes} bytes")


# ---------------------------------------------------------------------------
# Init


def client_setup(params: PorParams, data, rng=None, key: bytes | None = None):
    """Client half of Init.  Returns ``(state, w_bytes)``; ``w_bytes`` is ``None`` for LOCAL."""
    if len(data) != params.n_bytes:
        raise ValueError("data length does not match params")
    if params.public:
        raise ParameterError("use matpor.pubpor for public mode")
    view = F.MatrixView(data if not isinstance(data, (bytes, bytearray)) else memoryview(data),
                        params.m, params.n, params.chunk_bytes, params.n_bytes)
    s = sample_seeds(params.t, params.q, rng)
    V = F.vec_mat_stream(view, control_rows_u(s, params.m, params.q), params.q)
    _, root_m = mt_init(view.buf, params.block_bytes)
    if params.strategy is Strategy.LOCAL:
        return ClientState(params, s, root_m, V=V), None
    key = key or ChaCha20Poly1305.generate_key()
    cols = list(zip(*V))
    w = b"".join(encrypt_column(key, params, j, 0, cols[j]) for j in range(params.n))
    _, root_w = mt_init(w, params.block_bytes)
    return ClientState(params, s, root_m, key=key, root_w=root_w), w


def por_init(params: PorParams, data, rng=None) -> tuple[ClientState, ServerStore]:
    """Both halves of Init in one process (in-memory server)."""
    client, w = client_setup(params, data, rng)
    server = ServerStore.in_memory(params, data, w)
    if server.tree_m.root != client.root_m or (w is not None and server.tree_w.root != client.root_w):
        raise RuntimeError("server and client disagree on Merkle roots")
    return client, server


# ---------------------------------------------------------------------------
# Read / Write


def read_bytes(client: ClientState, server, offset: int, length: int) -> bytes:
    """Verified read of ``length`` bytes at ``offset``; raises :class:`Reject`."""
    p = client.params
    _check_range(p, offset, length)
    b = p.block_bytes
    lo, hi = offset // b, (offset + length - 1) // b + 1
    blocks, _ = _verify_fetch(server.prove_m, client.root_m, p.leaf_count, lo, hi, b)
    joined = b"".join(blocks)
    start = offset - lo * b
    return joined[start:start + length]


def por_read(client: ClientState, server, i: int, j: int) -> int:
    p = client.params
    if not (0 <= i < p.m and 0 <= j < p.n):
        raise IndexError((i, j))
    c = p.chunk_bytes
    off = (i * p.n + j) * c
    if off >= p.n_bytes:
        return 0
    return int.from_bytes(read_bytes(client, server, off, min(c, p.n_bytes - off)), "little")


def _cell_deltas(params: PorParams, old: bytes, new: bytes, base: int, c0: int, c1: int):
    """Yield ``(i, j, new - old)`` for touched cells with a nonzero change."""
    c = params.chunk_bytes
    for cell in range(c0, c1):
        a = cell * c - base
        o = int.from_bytes(old[a:a + c], "little")
        nv = int.from_bytes(new[a:a + c], "little")
        if o != nv:
            yield divmod(cell, params.n) + ((nv - o) % params.q,)


def _patched_blocks(params: PorParams, blocks: list[bytes], lo: int, offset: int, data: bytes):
    b = params.block_bytes
    joined = bytearray(b"".join(blocks))
    start = offset - lo * b
    old = bytes(joined)
    joined[start:start + len(data)] = data
    new_blocks = [bytes(joined[k:k + len(blk)]) for k, blk in
                  zip(np.cumsum([0] + [len(x) for x in blocks[:-1]]).tolist(), blocks)]
    return old, bytes(joined), new_blocks


def _w_column_window(params: PorParams, cols: Iterable[int]):
    cols = sorted(set(cols))
    r = params.w_record_bytes
    b = params.block_bytes
    first, last = cols[0] * r, (cols[-1] + 1) * r - 1
    return cols, first // b, last // b + 1


def write_bytes(client: ClientState, server, offset: int, data: bytes) -> None:
    """Verified write; updates ``client`` in place only after every check passed."""
    p = client.params
    data = bytes(data)
    _check_range(p, offset, len(data))
    b = p.block_bytes
    lo, hi = offset // b, (offset + len(data) - 1) // b + 1
    blocks, path = _verify_fetch(server.prove_m, client.root_m, p.leaf_count, lo, hi, b)
    old, new, new_blocks = _patched_blocks(p, blocks, lo, offset, data)
    c0, c1 = _cell_range(p, offset, len(data))
    deltas = list(_cell_deltas(p, old, new, lo * b, c0, c1))
    new_root_m = root_from_path(p.leaf_count, lo, new_blocks, path, b)

    new_V = new_w = None
    if deltas and p.strategy is Strategy.LOCAL:
        new_V = [list(row) for row in client.V]
        for i, j, d in deltas:
            for k in range(p.t):
                new_V[k][j] = (new_V[k][j] + client.u_entry(k, i) * d) % p.q
    elif deltas and p.strategy is Strategy.EXTERN:
        cols, wlo, whi = _w_column_window(p, (j for _, j, _ in deltas))
        wblocks, wpath = _verify_fetch(server.prove_w, client.root_w, p.w_leaf_count, wlo, whi, b)
        wjoined = bytearray(b"".join(wblocks))
        r = p.w_record_bytes
        base = wlo * b
        columns = {}
        for j in cols:
            rec = wjoined[j * r - base:(j + 1) * r - base]
            counter, col = decrypt_column(client.key, p, j, rec)
            columns[j] = (counter, col)
        for i, j, d in deltas:
            counter, col = columns[j]
            for k in range(p.t):
                col[k] = (col[k] + client.u_entry(k, i) * d) % p.q
        for j, (counter, col) in columns.items():
            wjoined[j * r - base:(j + 1) * r - base] = encrypt_column(client.key, p, j, counter + 1, col)
        sizes = [len(x) for x in wblocks]
        offs = np.cumsum([0] + sizes[:-1]).tolist()
        new_wblocks = [bytes(wjoined[o:o + s]) for o, s in zip(offs, sizes)]
        new_w = (wlo, new_wblocks, root_from_path(p.w_leaf_count, wlo, new_wblocks, wpath, b))

    server.write_m(lo, new_blocks)
    if new_w is not None:
        server.write_w(new_w[0], new_w[1])
        client.root_w = new_w[2]
    if new_V is not None:
        client.V = new_V
    client.root_m = new_root_m


def por_write(client: ClientState, server, i: int, j: int, value: int) -> None:
    """Set cell ``(i, j)`` to ``value``."""
    p = client.params
    if not (0 <= i < p.m and 0 <= j < p.n):
        raise IndexError((i, j))
    c = p.chunk_bytes
    off = (i * p.n + j) * c
    avail = min(c, p.n_bytes - off)
    if avail <= 0:
        raise IndexError("cell lies entirely past the end of the file")
    if not 0 <= value < min(p.q, 256 ** avail):
        raise F.FieldError(f"value does not fit in {avail} bytes of this cell")
    write_bytes(client, server, off, value.to_bytes(avail, "little"))


# ---------------------------------------------------------------------------
# Audit


def _server_audit(server, rho: int):
    y = server.audit(rho)
    return list(y)


def current_V(client: ClientState, server) -> list[list[int]]:
    """``V`` from the client, or fetched, verified and decrypted from the server."""
    p = client.params
    if p.strategy is Strategy.LOCAL:
        return client.V
    blocks, _ = _verify_fetch(server.prove_w, client.root_w, p.w_leaf_count, 0, p.w_leaf_count,
                              p.block_bytes)
    w = b"".join(blocks)
    r = p.w_record_bytes
    cols = [decrypt_column(client.key, p, j, w[j * r:(j + 1) * r])[1] for j in range(p.n)]
    return [list(row) for row in zip(*cols)]


def check_response(client: ClientState, V: list[list[int]], rho: int, y: Sequence[int]) -> bool:
    """``U y == V x`` for every control row."""
    p = client.params
    if len(y) != p.m or any(not 0 <= int(v) < p.q for v in y):
        return False
    for k in range(p.t):
        if F.horner_powers(y, client.s[k], p.q) != F.horner_powers(V[k], rho, p.q):
            return False
    return True


def por_audit(client: ClientState, server, rng=None) -> AuditTranscript:
    p = client.params
    rho = F.random_nonzero(p.q, rng)
    try:
        y = _server_audit(server, rho)
    except F.FieldError:
        return AuditTranscript(rho, [], False)
    try:
        V = current_V(client, server)
    except Reject:
        return AuditTranscript(rho, y, False)
    return AuditTranscript(rho, y, check_response(client, V, rho, y))


# ---------------------------------------------------------------------------
# Extract


def distinct_accepted(transcripts: Iterable[AuditTranscript]) -> list[AuditTranscript]:
    seen = set()
    out = []
    for tr in transcripts:
        if tr.accepted and tr.rho not in seen:
            seen.add(tr.rho)
            out.append(tr)
    return out


def cells_to_bytes(M: Sequence[Sequence[int]], params: PorParams) -> bytes:
    """Serialize a recovered matrix; fails if a cell cannot come from real bytes."""
    c = params.chunk_bytes
    limit = 256 ** c
    flat = [int(v) for row in M for v in row]
    if any(v >= limit for v in flat):
        raise F.InconsistentSystemError("recovered cell exceeds the chunk width")
    if c <= 7:
        raw = np.array(flat, dtype="<u8").view(np.uint8).reshape(-1, 8)[:, :c].tobytes()
    else:
        raw = b"".join(v.to_bytes(c, "little") for v in flat)
    if any(raw[params.n_bytes:]):
        raise F.InconsistentSystemError("recovered matrix has data past the end of the file")
    return raw[:params.n_bytes]


def por_extract(params: PorParams, transcripts: Iterable[AuditTranscript]) -> bytes:
    """Rebuild the file from accepted audit transcripts.

    Needs at least ``n`` distinct accepted challenges; any further distinct
    transcripts are checked against the reconstruction.
    """
    good = distinct_accepted(transcripts)
    if len(good) < params.n:
        raise ExtractionFailure(len(good), params.n)
    for tr in good:
        if len(tr.y) != params.m:
            raise F.InconsistentSystemError("transcript has the wrong response length")
    Y = [list(col) for col in zip(*(tr.y for tr in good))]
    M = F.interpolate_rows([tr.rho for tr in good], Y, params.q, params.n)
    return cells_to_bytes(M, params)
