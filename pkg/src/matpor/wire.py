"""Binary client/server protocol and the storage daemon.

Every frame is ``length:u32be | type:u8 | payload`` with
``length = 1 + len(payload)``; every payload starts with a ``u64be``
correlation id that the response echoes.  Field elements are little-endian
at the mode's width (8 bytes private, 32 public).

A session opens with ``HELLO(version)``; the server replies ``HELLO_OK``
(or ``ERROR`` and hangs up).  Framing errors drop the connection, payload
errors are answered with ``ERROR`` and the session continues.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

from . import field as F
from .merkle import DIGEST_BYTES, MerkleError, MerklePath, mt_init
from .params import ParameterError, PorParams, Strategy, derive_params
from .store import ServerStore, TreeBuilder

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_PORT = 7007
MAX_FRAME = 64 * 1024 * 1024
HEADER = struct.Struct(">IB")
CORR = struct.Struct(">Q")
INIT_WINDOW = 8
INIT_CHUNK = 1 << 20


class MsgType(IntEnum):
    HELLO = 0x01
    HELLO_OK = 0x02
    INIT_BEGIN = 0x10
    INIT_DATA = 0x11
    INIT_ACK = 0x12
    INIT_W = 0x13
    INIT_END = 0x14
    INIT_DONE = 0x15
    READ_REQ = 0x20
    READ_RESP = 0x21
    WRITE_REQ = 0x30
    WRITE_RESP = 0x31
    AUDIT_CHALLENGE = 0x40
    AUDIT_RESPONSE = 0x41
    ERROR = 0x7F


class ErrorCode(IntEnum):
    PROTOCOL = 1
    NOT_INITIALIZED = 2
    BAD_REQUEST = 3
    IO = 4
    VERSION = 5
    EXISTS = 6


class WireError(Exception):
    pass


class ProtocolError(WireError):
    """Malformed, truncated, oversize or unexpected frame."""


class TransportError(WireError):
    pass


class TransportTimeout(TransportError):
    pass


class ConnectionRefused(TransportError):
    pass


class RemoteError(WireError):
    def __init__(self, code: int, detail: str):
        super().__init__(f"server error {code}: {detail}")
        self.code = code
        self.detail = detail


@dataclass
class Message:
    type: MsgType
    corr: int
    body: bytes = b""


# ---------------------------------------------------------------------------
# framing


def encode_frame(msg: Message) -> bytes:
    payload = CORR.pack(msg.corr) + msg.body
    if 1 + len(payload) > MAX_FRAME:
        raise ProtocolError("frame exceeds 64 MiB")
    return HEADER.pack(1 + len(payload), int(msg.type)) + payload


def decode_frame(data: bytes) -> Message:
    """Decode exactly one complete frame."""
    if len(data) < HEADER.size:
        raise ProtocolError("truncated header")
    length, mtype = HEADER.unpack_from(data)
    if length > MAX_FRAME:
        raise ProtocolError("frame exceeds 64 MiB")
    if len(data) != 4 + length:
        raise ProtocolError("frame length does not match payload")
    return _message(mtype, data[5:])


def _message(mtype: int, payload: bytes) -> Message:
    try:
        t = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype:#x}") from None
    if len(payload) < CORR.size:
        raise ProtocolError("payload lacks correlation id")
    return Message(t, CORR.unpack_from(payload)[0], bytes(payload[CORR.size:]))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ProtocolError("connection closed mid-frame" if buf else "connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[Message, int]:
    """Read one frame; returns the message and the number of bytes consumed."""
    head = _recv_exact(sock, HEADER.size)
    length, mtype = HEADER.unpack(head)
    if length == 0 or length > MAX_FRAME:
        raise ProtocolError("bad frame length")
    payload = _recv_exact(sock, length - 1)
    return _message(mtype, payload), HEADER.size + len(payload)


# ---------------------------------------------------------------------------
# payload codecs

_PARAMS = struct.Struct("<BHHQQQQI")
_MODE = {Strategy.LOCAL: 0, Strategy.EXTERN: 1, Strategy.PUBLIC: 2}


def encode_params(p: PorParams) -> bytes:
    if p.field.insecure:
        raise ParameterError("insecure parameters never go on the wire")
    return _PARAMS.pack(_MODE[p.strategy], p.lam, p.kappa, p.n_bytes, p.m, p.n, p.t, p.block_bytes)


def decode_params(body: bytes) -> PorParams:
    if len(body) < _PARAMS.size:
        raise ProtocolError("truncated parameter block")
    mode, lam, kappa, n_bytes, m, n, t, block = _PARAMS.unpack_from(body)
    strategy = {v: k for k, v in _MODE.items()}.get(mode)
    if strategy is None:
        raise ProtocolError(f"unknown mode {mode}")
    if not (0 < n_bytes <= 1 << 50 and 0 < m and 0 < n and 0 < t <= 64 and m * n <= 1 << 48):
        raise ProtocolError("parameters out of range")
    public = strategy is Strategy.PUBLIC
    try:
        p = derive_params(n_bytes, lam=lam, kappa=kappa, mode="public" if public else "private",
                          strategy=Strategy.LOCAL if public else strategy, shape=(m, n), t=t)
    except ParameterError as exc:
        raise ProtocolError(str(exc)) from None
    if p.block_bytes != block:
        raise ProtocolError("block size does not match mode")
    return p


def encode_blocks(blocks) -> bytes:
    out = [struct.pack(">I", len(blocks))]
    for b in blocks:
        out.append(struct.pack(">I", len(b)))
        out.append(bytes(b))
    return b"".join(out)


def decode_blocks(body: bytes, offset: int = 0) -> tuple[list[bytes], int]:
    if len(body) < offset + 4:
        raise ProtocolError("truncated block list")
    (count,) = struct.unpack_from(">I", body, offset)
    offset += 4
    blocks = []
    for _ in range(count):
        if len(body) < offset + 4:
            raise ProtocolError("truncated block list")
        (ln,) = struct.unpack_from(">I", body, offset)
        offset += 4
        if len(body) < offset + ln:
            raise ProtocolError("truncated block")
        blocks.append(body[offset:offset + ln])
        offset += ln
    return blocks, offset


_TREES = {b"m"[0]: "m", b"w"[0]: "w"}


def read_req(tree: str, lo: int, hi: int) -> bytes:
    return struct.pack(">cQQ", tree.encode(), lo, hi)


def write_req(tree: str, lo: int, blocks) -> bytes:
    return struct.pack(">cQ", tree.encode(), lo) + encode_blocks(blocks)


def audit_bytes(params: PorParams) -> tuple[int, int]:
    """Exact ``(bytes_up, bytes_down)`` of one audit exchange on the wire."""
    frame = HEADER.size + CORR.size
    e = params.elem_bytes
    up = frame + e
    down = frame + e * params.m
    if params.has_w:
        leaves = params.w_leaf_count
        up += frame + 17
        down += frame + 4 + 4 * leaves + params.w_bytes + 2
    return up, down


# ---------------------------------------------------------------------------
# server


class _Session:
    def __init__(self, server: "PorServer", sock: socket.socket):
        self.server = server
        self.sock = sock
        self.init = None

    def send(self, mtype: MsgType, corr: int, body: bytes = b"") -> None:
        self.sock.sendall(encode_frame(Message(mtype, corr, body)))

    def error(self, corr: int, code: ErrorCode, detail: str) -> None:
        self.send(MsgType.ERROR, corr, struct.pack(">H", int(code)) + detail.encode()[:1024])

    def run(self) -> None:
        try:
            msg, _ = read_frame(self.sock)
            if msg.type is not MsgType.HELLO or len(msg.body) != 2:
                self.error(msg.corr, ErrorCode.PROTOCOL, "expected HELLO")
                return
            (version,) = struct.unpack(">H", msg.body)
            if version != PROTOCOL_VERSION:
                self.error(msg.corr, ErrorCode.VERSION, f"server speaks version {PROTOCOL_VERSION}")
                return
            store = self.server.store
            info = b"\x01" + encode_params(store.params) if store is not None else b"\x00"
            self.send(MsgType.HELLO_OK, msg.corr, struct.pack(">H", PROTOCOL_VERSION) + info)
            while True:
                msg, _ = read_frame(self.sock)
                self.dispatch(msg)
        except ProtocolError as exc:
            if "connection closed" != str(exc):
                log.debug("dropping session: %s", exc)
                try:
                    self.error(0, ErrorCode.PROTOCOL, str(exc))
                except OSError:
                    pass
        except OSError as exc:
            log.debug("session I/O error: %s", exc)
        finally:
            if self.init is not None:
                self.init.abort()

    def dispatch(self, msg: Message) -> None:
        handler = {
            MsgType.INIT_BEGIN: self.on_init_begin,
            MsgType.INIT_DATA: self.on_init_data,
            MsgType.INIT_W: self.on_init_w,
            MsgType.INIT_END: self.on_init_end,
            MsgType.READ_REQ: self.on_read,
            MsgType.WRITE_REQ: self.on_write,
            MsgType.AUDIT_CHALLENGE: self.on_audit,
        }.get(msg.type)
        if handler is None:
            self.error(msg.corr, ErrorCode.PROTOCOL, f"unexpected {msg.type.name}")
            return
        try:
            handler(msg)
        except _NotReady:
            self.error(msg.corr, ErrorCode.NOT_INITIALIZED, "no store on this server")
        except (ProtocolError, ParameterError, MerkleError, F.FieldError, struct.error,
                ValueError, IndexError) as exc:
            self.error(msg.corr, ErrorCode.BAD_REQUEST, str(exc))
        except OSError as exc:
            self.error(msg.corr, ErrorCode.IO, str(exc))

    def _store(self) -> ServerStore:
        store = self.server.store
        if store is None:
            raise _NotReady()
        return store

    # init ---------------------------------------------------------------

    def on_init_begin(self, msg: Message) -> None:
        if self.init is not None:
            raise ProtocolError("init already in progress")
        params = decode_params(msg.body)
        force = msg.body[_PARAMS.size:_PARAMS.size + 1] == b"\x01"
        if self.server.store is not None and not force:
            self.error(msg.corr, ErrorCode.EXISTS, "store already initialized")
            return
        self.init = _InitUpload(self.server.data_dir, params)
        self.send(MsgType.INIT_ACK, msg.corr, struct.pack(">I", 0))

    def on_init_data(self, msg: Message) -> None:
        if self.init is None:
            raise ProtocolError("INIT_DATA without INIT_BEGIN")
        self.init.feed(msg.body)
        if self.init.frames % INIT_WINDOW == 0:
            self.send(MsgType.INIT_ACK, msg.corr, struct.pack(">I", self.init.frames))

    def on_init_w(self, msg: Message) -> None:
        if self.init is None:
            raise ProtocolError("INIT_W without INIT_BEGIN")
        self.init.feed_w(msg.body)

    def on_init_end(self, msg: Message) -> None:
        if self.init is None:
            raise ProtocolError("INIT_END without INIT_BEGIN")
        init, self.init = self.init, None
        try:
            store = init.finish()
        except ValueError:
            init.abort()
            raise
        store = self.server.install(store)
        root_w = store.tree_w.root if store.tree_w is not None else bytes(DIGEST_BYTES)
        self.send(MsgType.INIT_DONE, msg.corr, store.tree_m.root + root_w)

    # operations -----------------------------------------------------------

    def on_read(self, msg: Message) -> None:
        store = self._store()
        tree, lo, hi = struct.unpack(">cQQ", msg.body)
        if tree[0] not in _TREES:
            raise ProtocolError("unknown tree")
        blocks, path = store.prove(_TREES[tree[0]], lo, hi)
        self.send(MsgType.READ_RESP, msg.corr, encode_blocks(blocks) + path.encode())

    def on_write(self, msg: Message) -> None:
        store = self._store()
        tree, lo = struct.unpack_from(">cQ", msg.body)
        if tree[0] not in _TREES:
            raise ProtocolError("unknown tree")
        blocks, end = decode_blocks(msg.body, 9)
        if end != len(msg.body):
            raise ProtocolError("trailing bytes in WRITE_REQ")
        root = store.write(_TREES[tree[0]], lo, blocks)
        self.send(MsgType.WRITE_RESP, msg.corr, root)

    def on_audit(self, msg: Message) -> None:
        store = self._store()
        p = store.params
        rho = p.field.decode(msg.body)
        if rho == 0:
            raise F.FieldError("challenge must be nonzero")
        e = p.elem_bytes
        length = 1 + CORR.size + e * p.m
        # header goes out first; y follows block by block as it is computed
        self.sock.sendall(HEADER.pack(length, int(MsgType.AUDIT_RESPONSE)) + CORR.pack(msg.corr))
        try:
            for part in store.iter_audit(rho, workers=self.server.workers):
                self.sock.sendall(b"".join(int(v).to_bytes(e, "little") for v in part))
        except Exception as exc:
            # the frame is half written; the only honest option is to hang up
            raise ConnectionAbortedError(f"audit failed mid-response: {exc}") from exc


class _NotReady(ProtocolError):
    pass


class _InitUpload:
    def __init__(self, data_dir: Path, params: PorParams):
        self.params = params
        self.tmp = data_dir / f"store.upload-{os.getpid()}-{threading.get_ident()}"
        shutil.rmtree(self.tmp, ignore_errors=True)
        self.tmp.mkdir(parents=True)
        self.fh = open(self.tmp / "data.bin", "wb")
        self.builder = TreeBuilder(params.block_bytes)
        self.w = bytearray()
        self.frames = 0

    def feed(self, chunk: bytes) -> None:
        if self.builder.size + len(chunk) > self.params.n_bytes:
            raise ProtocolError("more data than announced")
        self.builder.feed(chunk)
        self.fh.write(chunk)
        self.frames += 1

    def feed_w(self, chunk: bytes) -> None:
        if not self.params.has_w or len(self.w) + len(chunk) > self.params.w_bytes:
            raise ProtocolError("unexpected W data")
        self.w += chunk

    def finish(self) -> Path:
        import json
        self.fh.close()
        p = self.params
        if self.builder.size != p.n_bytes:
            raise ValueError(f"received {self.builder.size} of {p.n_bytes} bytes")
        if p.has_w and len(self.w) != p.w_bytes:
            raise ValueError("incomplete W upload")
        tree_m = self.builder.finish()
        (self.tmp / "tree_m.bin").write_bytes(tree_m.to_bytes())
        if p.has_w:
            (self.tmp / "w.bin").write_bytes(bytes(self.w))
            tree_w, _ = mt_init(self.w, p.block_bytes)
            (self.tmp / "tree_w.bin").write_bytes(tree_w.to_bytes())
        (self.tmp / "meta.json").write_text(json.dumps(p.to_dict()))
        return self.tmp

    def abort(self) -> None:
        try:
            self.fh.close()
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        _Session(self.server, self.request).run()


class PorServer(socketserver.ThreadingTCPServer):
    """Storage daemon serving one store directory.

    ``data_dir/store`` holds the live store; uploads land in a temporary
    sibling and are renamed into place once complete.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, data_dir, workers: int = 1):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.workers = workers
        self._install_lock = threading.Lock()
        live = self.data_dir / "store"
        self.store = ServerStore.open(live) if (live / "meta.json").exists() else None
        super().__init__(address, _Handler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def install(self, tmp_dir: Path) -> ServerStore:
        with self._install_lock:
            live = self.data_dir / "store"
            old = self.store
            if old is not None:
                with old.lock.write():
                    old.close()
                    shutil.rmtree(live, ignore_errors=True)
                    os.replace(tmp_dir, live)
                    self.store = ServerStore.open(live)
            else:
                shutil.rmtree(live, ignore_errors=True)
                os.replace(tmp_dir, live)
                self.store = ServerStore.open(live)
            return self.store

    def start(self) -> threading.Thread:
        """Serve on a background thread (tests, benchmarks)."""
        th = threading.Thread(target=self.serve_forever, daemon=True)
        th.start()
        return th

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self.store is not None:
            self.store.close()


def serve(endpoint: str, data_dir, workers: int = 1) -> None:
    host, port = parse_endpoint(endpoint)
    with PorServer((host, port), data_dir, workers) as srv:
        log.info("serving %s on %s", data_dir, srv.endpoint)
        srv.serve_forever()


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host:
        return endpoint or "127.0.0.1", DEFAULT_PORT
    return host, int(port)


# ---------------------------------------------------------------------------
# client


class RemoteServer:
    """Client side of the protocol; same interface as :class:`ServerStore`.

    ``params`` is the client's own view of the store and is needed to size
    audit responses.  Byte counters cover everything sent and received.
    """

    def __init__(self, endpoint: str, params: PorParams | None = None, timeout: float = 60.0):
        self.endpoint = endpoint
        self.params = params
        self.timeout = timeout
        self.bytes_up = 0
        self.bytes_down = 0
        self._corr = 0
        host, port = parse_endpoint(endpoint)
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except ConnectionRefusedError as exc:
            raise ConnectionRefused(f"{endpoint}: connection refused") from exc
        except socket.timeout as exc:
            raise TransportTimeout(f"{endpoint}: connect timed out") from exc
        except OSError as exc:
            raise TransportError(f"{endpoint}: {exc}") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        reply = self.call(MsgType.HELLO, struct.pack(">H", PROTOCOL_VERSION), MsgType.HELLO_OK)
        self.server_params = decode_params(reply[3:]) if reply[2:3] == b"\x01" else None

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _send(self, mtype: MsgType, body: bytes) -> int:
        self._corr += 1
        frame = encode_frame(Message(mtype, self._corr, body))
        try:
            self.sock.sendall(frame)
        except socket.timeout as exc:
            raise TransportTimeout("send timed out") from exc
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        self.bytes_up += len(frame)
        return self._corr

    def _recv(self, corr: int, expect: MsgType) -> bytes:
        try:
            msg, n = read_frame(self.sock)
        except socket.timeout as exc:
            raise TransportTimeout("response timed out") from exc
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        self.bytes_down += n
        if msg.type is MsgType.ERROR:
            code = struct.unpack_from(">H", msg.body)[0] if len(msg.body) >= 2 else 0
            raise RemoteError(code, msg.body[2:].decode(errors="replace"))
        if msg.corr != corr:
            raise ProtocolError(f"correlation id {msg.corr} != {corr}")
        if msg.type is not expect:
            raise ProtocolError(f"expected {expect.name}, got {msg.type.name}")
        return msg.body

    def call(self, mtype: MsgType, body: bytes, expect: MsgType) -> bytes:
        return self._recv(self._send(mtype, body), expect)

    # store interface ------------------------------------------------------------

    def prove(self, which: str, lo: int, hi: int):
        body = self.call(MsgType.READ_REQ, read_req(which, lo, hi), MsgType.READ_RESP)
        try:
            blocks, off = decode_blocks(body)
            path, end = MerklePath.decode(body, off)
        except MerkleError as exc:
            raise ProtocolError(str(exc)) from None
        if end != len(body):
            raise ProtocolError("trailing bytes in READ_RESP")
        return blocks, path

    def write(self, which: str, lo: int, blocks) -> bytes:
        return self.call(MsgType.WRITE_REQ, write_req(which, lo, blocks), MsgType.WRITE_RESP)

    def prove_m(self, lo, hi):
        return self.prove("m", lo, hi)

    def prove_w(self, lo, hi):
        return self.prove("w", lo, hi)

    def write_m(self, lo, blocks):
        return self.write("m", lo, blocks)

    def write_w(self, lo, blocks):
        return self.write("w", lo, blocks)

    def audit(self, rho: int) -> list[int]:
        """Send ``rho``; returns ``y``.  A wrong-length ``y`` raises ``FieldError``."""
        p = self.params
        if p is None:
            raise WireError("client parameters are required for audits")
        body = self.call(MsgType.AUDIT_CHALLENGE, p.field.encode(rho), MsgType.AUDIT_RESPONSE)
        if len(body) != p.elem_bytes * p.m:
            raise F.FieldError(f"response has {len(body)} bytes, expected {p.elem_bytes * p.m}")
        return p.field.decode_vector(body, p.m)

    def init_push(self, params: PorParams, data, w: bytes | None = None, force: bool = False):
        """Upload a new store; returns the server's ``(root_m, root_w)``."""
        body = encode_params(params) + (b"\x01" if force else b"\x00")
        self.call(MsgType.INIT_BEGIN, body, MsgType.INIT_ACK)
        mv = memoryview(data)
        frames = 0
        for off in range(0, len(mv), INIT_CHUNK):
            corr = self._send(MsgType.INIT_DATA, bytes(mv[off:off + INIT_CHUNK]))
            frames += 1
            if frames % INIT_WINDOW == 0:
                self._recv(corr, MsgType.INIT_ACK)
        if w is not None:
            for off in range(0, len(w), INIT_CHUNK):
                self._send(MsgType.INIT_W, bytes(w[off:off + INIT_CHUNK]))
        body = self.call(MsgType.INIT_END, b"", MsgType.INIT_DONE)
        self.params = params
        return body[:DIGEST_BYTES], body[DIGEST_BYTES:2 * DIGEST_BYTES]


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(prog="matpor-server", description="storage daemon")
    ap.add_argument("--listen", default=os.environ.get("POR_ENDPOINT", f"127.0.0.1:{DEFAULT_PORT}"))
    ap.add_argument("--store", required=True, help="data directory")
    ap.add_argument("--workers", type=int, default=1, help="audit threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    serve(args.listen, args.store, args.workers)


if __name__ == "__main__":
    main()
