"""``matpor`` command line: init, read, write, audit, extract, bench.

Exit codes: 0 success, 1 operational failure (usage, I/O, transport),
2 integrity failure (a verification rejected the server).
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import field as F
from . import porcore as pc
from . import pubpor as pub
from .params import ParameterError, Strategy, derive_params
from .wire import RemoteServer, WireError, audit_bytes, DEFAULT_PORT

EXIT_OK, EXIT_OPERATIONAL, EXIT_INTEGRITY = 0, 1, 2
MODES = ("private-local", "private-extern", "public-writer", "public-verifier")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_OPERATIONAL, kind: str = "operational"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def integrity(message: str) -> CliError:
    return CliError(message, EXIT_INTEGRITY, "integrity")


# ---------------------------------------------------------------------------
# helpers

_SIZE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([kmgt]?i?b?)?\s*$", re.I)
_UNITS = {"": 1, "b": 1, "k": 10**3, "m": 10**6, "g": 10**9, "t": 10**12,
          "ki": 2**10, "mi": 2**20, "gi": 2**30, "ti": 2**40}


def parse_size(text: str) -> int:
    """``"10MB"`` -> 10**7, ``"1MiB"`` -> 2**20, plain integers pass through."""
    mt = _SIZE.match(text)
    if not mt:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    unit = (mt.group(2) or "").lower()
    unit = unit[:-1] if unit.endswith("b") else unit
    return int(float(mt.group(1)) * _UNITS[unit])


def atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _state_kind(data: bytes) -> str:
    if data[:4] == b"PORC" and len(data) > 5:
        return {0: "private-local", 1: "private-extern", 2: "public-writer"}.get(data[5], "?")
    if data[:4] == b"PORK":
        return "public-verifier"
    return "?"


class Session:
    """Resolved configuration plus lazily opened state and connection."""

    def __init__(self, args):
        self.args = args
        self.endpoint = args.endpoint or os.environ.get("POR_ENDPOINT") or f"127.0.0.1:{DEFAULT_PORT}"
        self.state_path = Path(args.state)
        self.manifest_path = Path(args.manifest)
        self.mode = args.mode
        self.state = None
        self.manifest = None
        self._remote = None

    def load(self):
        """Load client state (or manifest) and check it matches ``--mode``."""
        if self.mode == "public-verifier":
            if not self.manifest_path.exists():
                raise CliError(f"no manifest at {self.manifest_path}")
            self.manifest = pub.PublicKeyMaterial.from_bytes(self.manifest_path.read_bytes())
            if not self.manifest.verify_signature():
                raise integrity("manifest signature does not verify")
            self.params = self.manifest.params(self.args.lam)
            return
        if not self.state_path.exists():
            raise CliError(f"no client state at {self.state_path}; run init first")
        raw = self.state_path.read_bytes()
        kind = _state_kind(raw)
        if self.mode is None:
            self.mode = kind
        elif kind != self.mode:
            raise CliError(f"state file holds {kind} state but --mode is {self.mode}")
        try:
            if kind == "public-writer":
                self.state = pub.WriterState.from_bytes(raw)
                if self.manifest_path.exists():
                    self.manifest = pub.PublicKeyMaterial.from_bytes(self.manifest_path.read_bytes())
            else:
                self.state = pc.ClientState.from_bytes(raw)
        except (ValueError, ParameterError) as exc:
            raise CliError(f"corrupt state file: {exc}") from None
        self.params = self.state.params

    def remote(self, params=None) -> RemoteServer:
        if self._remote is None:
            self._remote = RemoteServer(self.endpoint, params or getattr(self, "params", None),
                                        timeout=self.args.timeout)
        return self._remote

    def save_state(self):
        atomic_write(self.state_path, self.state.to_bytes())

    def save_manifest(self, manifest):
        self.manifest = manifest
        atomic_write(self.manifest_path, manifest.to_bytes())

    def reader(self):
        if self.state is not None:
            return self.state
        return SimpleNamespace(params=self.params, root_m=self.manifest.root_m)

    def close(self):
        if self._remote is not None:
            self._remote.close()


def emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    elif text is not None:
        print(text)


# ---------------------------------------------------------------------------
# commands


def cmd_init(sess: Session) -> int:
    args = sess.args
    path = Path(args.file)
    if not path.is_file():
        raise CliError(f"cannot read {path}")
    size = path.stat().st_size
    if size == 0:
        raise CliError("cannot initialize an empty file")
    mode = sess.mode or "private-local"
    if mode == "public-verifier":
        raise CliError("a verifier cannot initialize a store")
    target = sess.state_path
    if target.exists() and not args.force:
        raise CliError(f"{target} already exists; pass --force to replace it")
    data = np.memmap(path, dtype=np.uint8, mode="r")
    remote = sess.remote()
    if mode == "public-writer":
        params = derive_params(size, lam=args.lam, mode="public")
        writer, manifest, w = pub.pub_client_setup(params, data)
        root_m, root_w = remote.init_push(params, data, w, force=args.force)
        if (root_m, root_w) != (writer.root_m, writer.root_w):
            raise integrity("server roots differ from the client's")
        sess.state = writer
        sess.save_manifest(manifest)
    else:
        strategy = Strategy.EXTERN if mode == "private-extern" else Strategy.LOCAL
        params = derive_params(size, lam=args.lam, strategy=strategy)
        state, w = pc.client_setup(params, data)
        root_m, root_w = remote.init_push(params, data, w, force=args.force)
        if root_m != state.root_m or (w is not None and root_w != state.root_w):
            raise integrity("server roots differ from the client's")
        sess.state = state
    sess.save_state()
    up, down = audit_bytes(params)
    report = dict(command="init", ok=True, mode=mode, n_bytes=size, m=params.m, n=params.n,
                  t=params.t, e=params.e, audit_bytes_up=up, audit_bytes_down=down)
    emit(args, report, f"initialized {size} bytes ({mode}): m={params.m} n={params.n} t={params.t} "
                       f"e={params.e} audit bytes up={up} down={down}")
    return EXIT_OK


def cmd_read(sess: Session) -> int:
    args = sess.args
    sess.load()
    try:
        data = pc.read_bytes(sess.reader(), sess.remote(), args.offset, args.length)
    except IndexError as exc:
        raise CliError(str(exc)) from None
    if args.out:
        Path(args.out).write_bytes(data)
    if args.json:
        emit(args, dict(command="read", ok=True, offset=args.offset, length=len(data), hex=data.hex()))
    elif not args.out:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    return EXIT_OK


def cmd_write(sess: Session) -> int:
    args = sess.args
    sess.load()
    if sess.mode == "public-verifier":
        raise CliError("a verifier cannot write")
    if args.data is not None:
        payload = args.data.encode()
    elif args.hex is not None:
        payload = bytes.fromhex(args.hex)
    else:
        payload = Path(args.from_file).read_bytes()
    try:
        if sess.mode == "public-writer":
            manifest = pub.pub_write_bytes(sess.state, sess.remote(), args.offset, payload)
            sess.save_manifest(manifest)
        else:
            pc.write_bytes(sess.state, sess.remote(), args.offset, payload)
    except IndexError as exc:
        raise CliError(str(exc)) from None
    sess.save_state()
    emit(args, dict(command="write", ok=True, offset=args.offset, length=len(payload)),
         f"wrote {len(payload)} bytes at {args.offset}")
    return EXIT_OK


def _one_audit(sess: Session, rng=None) -> tuple[pc.AuditTranscript, float, float]:
    """Returns the transcript, server round-trip seconds and client seconds."""
    remote = sess.remote()
    up0, down0 = remote.bytes_up, remote.bytes_down
    public = sess.mode.startswith("public")
    q = F.PUBLIC_Q if public else sess.params.q
    rho = F.random_nonzero(q, rng)
    t0 = time.perf_counter()
    try:
        y = [int(v) for v in remote.audit(rho)]
        ok = True
    except F.FieldError:
        y, ok = [], False
    t1 = time.perf_counter()
    if ok:
        try:
            if public:
                manifest = sess.manifest or sess.state.manifest()
                g = sess.state.group if sess.state is not None else pub.group_by_id(manifest.group_id)
                W = pub.fetch_w(manifest, remote, sess.params, g)
                if sess.state is not None:
                    ok = pub.writer_check(sess.state, W, rho, y)
                else:
                    ok = len(y) == manifest.m and pub.group_check(manifest, g, W, rho, y)
            else:
                ok = pc.check_response(sess.state, pc.current_V(sess.state, remote), rho, y)
        except pc.Reject:
            ok = False
    t2 = time.perf_counter()
    tr = pc.AuditTranscript(rho, y, ok, remote.bytes_up - up0, remote.bytes_down - down0)
    return tr, t1 - t0, t2 - t1


def cmd_audit(sess: Session) -> int:
    args = sess.args
    sess.load()
    fld = F.PUBLIC if sess.mode.startswith("public") else sess.params.field
    save = Path(args.save) if args.save else None
    if save:
        save.mkdir(parents=True, exist_ok=True)
    audits = []
    rejected = False
    for k in range(args.repeat):
        tr, server_s, client_s = _one_audit(sess)
        if save:
            atomic_write(save / f"audit-{tr.rho_digest()}.port", tr.to_bytes(fld))
        rec = dict(index=k, rho_hash=tr.rho_digest(), accepted=tr.accepted, server_s=server_s,
                   client_s=client_s, bytes_up=tr.bytes_up, bytes_down=tr.bytes_down)
        audits.append(rec)
        if not args.json:
            verdict = "ACCEPT" if tr.accepted else "REJECT"
            print(f"audit {k}: {verdict} rho={rec['rho_hash']} server={server_s:.4f}s "
                  f"client={client_s:.4f}s up={tr.bytes_up}B down={tr.bytes_down}B")
        if not tr.accepted:
            rejected = True
            break
    if args.json:
        emit(args, dict(command="audit", ok=not rejected, mode=sess.mode, audits=audits))
    if rejected:
        if not args.json:
            print("INTEGRITY ALARM: audit rejected", file=sys.stderr)
        return EXIT_INTEGRITY
    return EXIT_OK


def load_transcripts(directory: Path, fld: F.Field) -> list[pc.AuditTranscript]:
    out = []
    for path in sorted(directory.glob("*.port")):
        try:
            out.append(pc.AuditTranscript.from_bytes(path.read_bytes(), fld))
        except (ValueError, F.FieldError) as exc:
            raise integrity(f"unreadable transcript {path.name}: {exc}") from None
    return out


def cmd_extract(sess: Session) -> int:
    args = sess.args
    sess.load()
    public = sess.mode.startswith("public")
    fld = F.PUBLIC if public else sess.params.field
    transcripts = load_transcripts(Path(args.transcripts), fld)
    try:
        data = (pub.pub_extract if public else pc.por_extract)(sess.params, transcripts)
    except pc.ExtractionFailure as exc:
        emit(args, dict(command="extract", ok=False, distinct=exc.distinct, needed=exc.needed))
        raise CliError(str(exc)) from None
    except (F.InconsistentSystemError, F.SingularSystemError) as exc:
        raise integrity(f"transcripts are inconsistent: {exc}") from None
    atomic_write(Path(args.out), data)
    distinct = len(pc.distinct_accepted(transcripts))
    emit(args, dict(command="extract", ok=True, bytes=len(data), distinct=distinct, out=args.out),
         f"recovered {len(data)} bytes from {distinct} distinct transcripts into {args.out}")
    return EXIT_OK


def cmd_bench(sess: Session) -> int:
    from .harness import bench_audit
    args = sess.args
    mode = sess.mode or "private-local"
    if mode not in ("private-local", "private-extern"):
        raise CliError("bench covers the private modes")
    rows = bench_audit(args.sizes, args.threads, mode, repeats=args.repeats, workdir=args.workdir,
                       csv_path=args.csv,
                       log=None if args.json else lambda r: print(
                           f"{r['size_bytes']:>14} bytes  {r['threads']} thread(s)  "
                           f"{r['median_s']:.4f}s  up={r['bytes_up']}B down={r['bytes_down']}B"))
    emit(args, dict(command="bench", ok=True, mode=mode, rows=rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(parser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--endpoint", default=d(None), help="server host:port (default $POR_ENDPOINT)")
    parser.add_argument("--state", default=d("matpor.state"), help="client state file")
    parser.add_argument("--manifest", default=d("matpor.manifest"), help="public manifest file")
    parser.add_argument("--mode", choices=MODES, default=d(None))
    parser.add_argument("--lambda", dest="lam", type=int, default=d(40), help="statistical security")
    parser.add_argument("--json", action="store_true", default=d(False), help="machine-readable output")
    parser.add_argument("--timeout", type=float, default=d(120.0), help="socket timeout in seconds")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="matpor", description="proofs of retrievability client")
    _common(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _common(common, suppress=True)

    p = sub.add_parser("init", parents=[common], help="upload a file and create client state")
    p.add_argument("file")
    p.add_argument("--force", action="store_true", help="replace existing state and server store")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("read", parents=[common], help="verified read of a byte range")
    p.add_argument("offset", type=int)
    p.add_argument("length", type=int)
    p.add_argument("--out", help="write bytes here instead of stdout")
    p.set_defaults(func=cmd_read)

    p = sub.add_parser("write", parents=[common], help="verified overwrite of a byte range")
    p.add_argument("offset", type=int)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="UTF-8 text to write")
    src.add_argument("--hex", help="hex-encoded bytes to write")
    src.add_argument("--from", dest="from_file", help="file whose bytes to write")
    p.set_defaults(func=cmd_write)

    p = sub.add_parser("audit", parents=[common], help="challenge the server")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--save", help="directory for transcript files")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("extract", parents=[common], help="rebuild the file from saved transcripts")
    p.add_argument("--transcripts", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("bench", parents=[common], help="local audit benchmark")
    p.add_argument("--sizes", type=lambda s: [parse_size(x) for x in s.split(",")],
                   default=[10**6, 10**7])
    p.add_argument("--threads", type=lambda s: [int(x) for x in s.split(",")], default=[1])
    p.add_argument("--repeats", type=int, default=11)
    p.add_argument("--csv", help="write results as CSV")
    p.add_argument("--workdir", help="scratch directory for generated stores")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    sess = Session(args)
    try:
        return args.func(sess)
    except CliError as exc:
        return _fail(args, exc.kind, str(exc), exc.code)
    except pc.Reject as exc:
        return _fail(args, "integrity", f"verification failed: {exc}", EXIT_INTEGRITY)
    except pub.ManifestError as exc:
        return _fail(args, "integrity", str(exc), EXIT_INTEGRITY)
    except (WireError, OSError, ValueError) as exc:
        return _fail(args, "operational", f"{type(exc).__name__}: {exc}", EXIT_OPERATIONAL)
    finally:
        sess.close()


def _fail(args, kind: str, message: str, code: int) -> int:
    if args.json:
        print(json.dumps(dict(command=args.command, ok=False, error=kind, detail=message)),
              file=sys.stderr)
    else:
        print(f"matpor: {kind} error: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
