"""Adversaries, security games and benchmarks.

Adversaries wrap a real server object and tamper only with what the server
controls: its stored bytes or the messages it sends back.  The games then
drive the ordinary client code against them and count outcomes.

Reduced-size fields (``Field.reduced``) make forgery rates large enough to
measure; they are flagged insecure and never touch the wire or disk.
"""

from __future__ import annotations

import csv
import math
import random
import statistics
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import field as F
from . import porcore as pc
from .params import PorParams, Strategy, derive_params
from .store import ServerStore


# ---------------------------------------------------------------------------
# adversaries


class Adversary:
    """Honest pass-through; subclasses override ``audit`` or mutate storage."""

    name = "honest"

    def __init__(self, server, rng=None):
        self.server = server
        self.rng = rng or random.Random()
        self.params: PorParams = server.params

    def __getattr__(self, item):
        return getattr(self.server, item)

    def honest_y(self, rho: int) -> list[int]:
        return [int(v) for v in self.server.audit(rho)]

    def audit(self, rho: int) -> list[int]:
        return self.honest_y(rho)


Honest = Adversary


class BitFlip(Adversary):
    """Corrupts ``k`` distinct random cells of the stored file up front."""

    name = "bitflip"

    def __init__(self, server, k: int = 1, rng=None):
        super().__init__(server, rng)
        p = self.params
        cells = (p.n_bytes + p.chunk_bytes - 1) // p.chunk_bytes
        self.cells = self.rng.sample(range(cells), k)
        self.offsets = []
        for c in self.cells:
            lo = c * p.chunk_bytes
            off = self.rng.randrange(lo, min(lo + p.chunk_bytes, p.n_bytes))
            server.corrupt(off, 1 << self.rng.randrange(8))
            self.offsets.append(off)


class ForgeUniformY(Adversary):
    """Answers every audit with a uniformly random vector."""

    name = "forge_uniform_y"

    def audit(self, rho):
        p = self.params
        return [self.rng.randrange(p.q) for _ in range(p.m)]


class ForgeSparseY(Adversary):
    """Adds random nonzero offsets to ``y`` at the given positions only."""

    name = "forge_sparse_y"

    def __init__(self, server, positions: Sequence[int] = (0,), rng=None):
        super().__init__(server, rng)
        self.positions = list(positions)

    def audit(self, rho):
        q = self.params.q
        y = self.honest_y(rho)
        for i in self.positions:
            y[i] = (y[i] + self.rng.randrange(1, q)) % q
        return y


def rooted_offsets(roots: Sequence[int], m: int, q: int) -> list[int]:
    """Coefficients ``d_0..d_{m-1}`` with ``sum d_i z**(i+1) = z * prod (z - r)``.

    Any control seed equal to one of ``roots`` then cancels the offset.
    """
    if len(roots) > m - 1:
        raise ValueError("at most m-1 roots fit")
    poly = [1]
    for r in roots:
        nxt = [0] * (len(poly) + 1)
        for i, c in enumerate(poly):
            nxt[i + 1] = (nxt[i + 1] + c) % q
            nxt[i] = (nxt[i] - r * c) % q
        poly = nxt
    return poly + [0] * (m - len(poly))


class ForgeRootedY(Adversary):
    """The strongest blind forger: an offset vanishing at ``m-1`` random points.

    It wins exactly when every control seed lands on a planted root, which
    makes its success rate ``((m-1)/(q-1))**t``, just under ``(m/q)**t``.
    """

    name = "forge_rooted_y"

    def audit(self, rho):
        p = self.params
        y = self.honest_y(rho)
        roots = self.rng.sample(range(1, p.q), min(p.m - 1, p.q - 1))
        d = rooted_offsets(roots, p.m, p.q)
        return [(a + b) % p.q for a, b in zip(y, d)]


class StaleReplay(Adversary):
    """Keeps a snapshot of the file from construction time and audits against it.

    Reads and writes go to the live server, so the client sees its updates
    applied while audits silently use the old contents.
    """

    name = "stale_state_replay"

    def __init__(self, server, rng=None):
        super().__init__(server, rng)
        p = self.params
        self.snapshot = ServerStore.in_memory(p, bytes(server.data), None if server.w is None else bytes(server.w)) \
            if isinstance(server, ServerStore) else None

    def audit(self, rho):
        if self.snapshot is None:
            return self.honest_y(rho)
        return [int(v) for v in self.snapshot.audit(rho)]


class Refusing(Adversary):
    """Fails to answer a fraction of audits (returns an empty response)."""

    name = "refusing"

    def __init__(self, server, fraction: float = 0.6, rng=None):
        super().__init__(server, rng)
        self.fraction = fraction

    def audit(self, rho):
        if self.rng.random() < self.fraction:
            return []
        return self.honest_y(rho)


ADVERSARIES: dict[str, Callable] = {
    cls.name: cls for cls in (Honest, BitFlip, ForgeUniformY, ForgeSparseY, ForgeRootedY,
                              StaleReplay, Refusing)
}


# ---------------------------------------------------------------------------
# authenticity game


@dataclass
class TrialReport:
    adversary: str
    trials: int
    accepts: int
    rejects: int
    empirical_rate: float
    bound: float
    slack: float
    passed: bool

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.adversary}: {self.accepts}/{self.trials} forged accepts "
                f"(rate {self.empirical_rate:.3g}, bound {self.bound:.3g} + 3 sigma {self.slack:.2g})")


def binomial_slack(p: float, trials: int, sigmas: float = 3.0) -> float:
    return sigmas * math.sqrt(max(p * (1 - p), 0.0) / trials)


def fresh_client(params: PorParams, server: ServerStore, rng) -> pc.ClientState:
    """A new honest client for an existing store (new secret seeds, same file)."""
    s = pc.sample_seeds(params.t, params.q, rng)
    V = F.vec_mat_stream(server.matrix(), pc.control_rows_u(s, params.m, params.q), params.q)
    return pc.ClientState(params, s, server.tree_m.root, V=V)


def reduced_params(q: int, m: int, n: int, t: int, lam: int = 40) -> PorParams:
    """Insecure parameters for a ``m x n`` matrix of one-byte cells mod ``q``."""
    fld = F.Field.reduced(q, chunk_bytes=1)
    return derive_params(m * n, lam=lam, field=fld, shape=(m, n), t=t)


def run_authenticity_game(params: PorParams, adversary: str | Callable, trials: int,
                          rng=None, data: bytes | None = None, **adv_kwargs) -> TrialReport:
    """Count audits where a modified response is accepted.

    Each trial draws fresh control seeds and a fresh challenge, so the trials
    are independent.  Only responses that differ from the honest ``y`` count
    as forgeries; the bound is ``(m/q)**t`` with three-sigma binomial slack.
    """
    rng = rng or random.Random()
    if data is None:
        data = bytes(rng.getrandbits(8) for _ in range(params.n_bytes))
    server = ServerStore.in_memory(params, data)
    factory = ADVERSARIES[adversary] if isinstance(adversary, str) else adversary
    adv = factory(server, rng=rng, **adv_kwargs)
    accepts = 0
    for _ in range(trials):
        client = fresh_client(params, server, rng)
        rho = F.random_nonzero(params.q, rng)
        y = adv.audit(rho)
        honest = adv.honest_y(rho)
        if y != honest and pc.check_response(client, client.V, rho, y):
            accepts += 1
    bound = (params.m / params.q) ** params.t
    slack = binomial_slack(bound, trials)
    rate = accepts / trials
    return TrialReport(getattr(adv, "name", str(adversary)), trials, accepts, trials - accepts,
                       rate, bound, slack, rate <= bound + slack)


# ---------------------------------------------------------------------------
# retrievability game


@dataclass
class GameResult:
    audits: int
    accepted: int
    distinct: int
    status: str  # "recovered", "failed" or "n/a"

    @property
    def won(self) -> bool:
        return self.status == "recovered"


def run_retrievability_game(client: pc.ClientState, adversary, e: int, expected: bytes,
                            rng=None) -> GameResult:
    """Run ``e`` audits through ``adversary`` and try to extract the file.

    Below ``e/2`` accepted audits the adversary has not played the game and
    the result is ``n/a``.  Otherwise extraction must reproduce ``expected``.
    """
    transcripts = [pc.por_audit(client, adversary, rng) for _ in range(e)]
    accepted = sum(tr.accepted for tr in transcripts)
    distinct = len(pc.distinct_accepted(transcripts))
    if 2 * accepted < e:
        return GameResult(e, accepted, distinct, "n/a")
    try:
        got = pc.por_extract(client.params, transcripts)
    except (pc.ExtractionFailure, F.FieldError):
        return GameResult(e, accepted, distinct, "failed")
    return GameResult(e, accepted, distinct, "recovered" if got == expected else "failed")


def next_prime(k: int) -> int:
    def is_prime(v):
        if v < 2:
            return False
        return all(v % d for d in range(2, math.isqrt(v) + 1))
    while not is_prime(k):
        k += 1
    return k


def retrievability_experiment(n: int = 16, lam: int = 10, reps: int = 100, e: int | None = None,
                              q: int | None = None, adversary: str = "honest", rng=None):
    """Repeat the retrievability game on fresh ``n x n`` files.

    By default the field is the smallest prime allowed by ``q >= 16n + 96 lam``,
    the tightest setting in which challenge collisions are still plausible.
    Returns the list of :class:`GameResult`.
    """
    rng = rng or random.Random()
    q = q or next_prime(16 * n + 96 * lam)
    e = e or 4 * n + 24 * lam
    results = []
    for _ in range(reps):
        data = bytes(rng.getrandbits(8) for _ in range(n * n))
        fld = F.Field.reduced(q, chunk_bytes=1)
        params = derive_params(n * n, lam=lam, field=fld, shape=(n, n))
        client, server = pc.por_init(params, data, rng)
        adv = ADVERSARIES[adversary](server, rng=rng)
        results.append(run_retrievability_game(client, adv, e, data, rng))
    return results


# ---------------------------------------------------------------------------
# benchmarks

CSV_COLUMNS = ["size_bytes", "threads", "median_s", "bytes_up", "bytes_down", "mode"]


def write_random_file(path, size: int, seed: int = 0, chunk: int = 1 << 26) -> None:
    gen = np.random.default_rng(seed)
    with open(path, "wb") as fh:
        left = size
        while left:
            k = min(chunk, left)
            fh.write(gen.integers(0, 256, k, dtype=np.uint8).tobytes())
            left -= k


def _file_chunks(path, chunk: int = 1 << 24):
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            yield block


def prepare_store(directory, size: int, strategy=Strategy.LOCAL, seed: int = 0, rng=None):
    """Create ``directory/store`` holding ``size`` random bytes; returns ``(client, store)``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    raw = d / "raw.bin"
    write_random_file(raw, size, seed)
    params = derive_params(size, strategy=strategy)
    data = np.memmap(raw, dtype=np.uint8, mode="r")
    client, w = pc.client_setup(params, data, rng)
    del data
    store = ServerStore.create(d / "store", params, _file_chunks(raw), w)
    raw.unlink()
    return client, store


def time_audits(store: ServerStore, threads: int, repeats: int = 11, rng=None) -> float:
    """Median wall-clock seconds of the server's ``y = M x``."""
    rng = rng or random.SystemRandom()
    times = []
    for _ in range(repeats):
        rho = F.random_nonzero(store.params.q, rng)
        t0 = time.perf_counter()
        store.audit(rho, workers=threads)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def wire_audit(client: pc.ClientState, directory) -> tuple[pc.AuditTranscript, int, int]:
    """One audit over loopback TCP; returns the transcript and bytes up/down."""
    from .wire import PorServer, RemoteServer
    srv = PorServer(("127.0.0.1", 0), directory)
    srv.start()
    try:
        with RemoteServer(srv.endpoint, client.params) as remote:
            up0, down0 = remote.bytes_up, remote.bytes_down
            tr = pc.por_audit(client, remote)
            return tr, remote.bytes_up - up0, remote.bytes_down - down0
    finally:
        srv.stop()


def bench_audit(sizes: Sequence[int], threads: Sequence[int] = (1,), mode: str = "private-local",
                repeats: int = 11, workdir=None, csv_path=None, log=None) -> list[dict]:
    """Median audit time and wire bytes for each ``size x threads`` pair."""
    strategy = Strategy.EXTERN if mode == "private-extern" else Strategy.LOCAL
    rows = []
    for size in sizes:
        with tempfile.TemporaryDirectory(dir=workdir) as tmp:
            client, store = prepare_store(tmp, size, strategy)
            try:
                tr, up, down = wire_audit(client, tmp)
                if not tr.accepted:
                    raise RuntimeError(f"honest audit rejected at size {size}")
                for th in threads:
                    med = time_audits(store, th, repeats)
                    row = dict(size_bytes=size, threads=th, median_s=med,
                               bytes_up=up, bytes_down=down, mode=mode)
                    rows.append(row)
                    if log:
                        log(row)
            finally:
                store.close()
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows
