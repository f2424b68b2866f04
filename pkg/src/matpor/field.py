"""Prime-field arithmetic over raw file bytes.

A file of ``n_bytes`` bytes is read in place as an ``m x n`` row-major matrix
whose cells are ``chunk_bytes``-byte little-endian integers.  Nothing is
re-encoded: cell ``(i, j)`` (0-based) lives at byte offset
``(i * n + j) * chunk_bytes`` and anything past the end of the file reads as
zero.

Two moduli are used in production:

* ``PRIVATE`` -- the 57-bit prime ``2**57 - 13`` with 7-byte cells, so every
  cell is below ``2**56 < q`` and no conversion is needed;
* ``PUBLIC`` -- the ristretto255 group order with 31-byte cells.

Small moduli are accepted when ``insecure=True`` so that failure
probabilities become measurable in tests.
"""

from __future__ import annotations

import math
import secrets
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import _kernels

PRIVATE_Q = _kernels.Q
PUBLIC_Q = 2**252 + 27742317777372353535851937790883648493

__all__ = [
    "PRIVATE_Q", "PUBLIC_Q", "Field", "PRIVATE", "PUBLIC",
    "FieldError", "SingularSystemError", "InconsistentSystemError",
    "MatrixView", "matrix_shape", "elem_from_chunk", "chunk_from_elem",
    "powers", "dot", "mat_vec_stream", "iter_mat_vec", "vec_mat_stream",
    "matmul_mod", "interpolate_rows", "random_nonzero",
]


class FieldError(ValueError):
    """Contract violation in field arithmetic (bad length, zero challenge...)."""


class SingularSystemError(FieldError):
    pass


class InconsistentSystemError(FieldError):
    pass


@dataclass(frozen=True)
class Field:
    """A prime modulus together with its byte packing.

    ``chunk_bytes`` is the cell width in the data file; ``elem_bytes`` is the
    width of a serialized element on the wire.
    """

    q: int
    chunk_bytes: int
    elem_bytes: int
    insecure: bool = False

    def __post_init__(self):
        if self.q < 2:
            raise FieldError("modulus must be >= 2")
        if not self.insecure and self.q not in (PRIVATE_Q, PUBLIC_Q):
            raise FieldError(
                "only the 57-bit prime and the group order are supported; "
                "pass insecure=True for reduced test parameters")
        if 256 ** self.chunk_bytes > self.q and not self.insecure:
            raise FieldError("chunk does not fit below the modulus")
        if 256 ** self.elem_bytes < self.q:
            raise FieldError("elem_bytes too small for the modulus")

    @classmethod
    def reduced(cls, q: int, chunk_bytes: int = 1) -> "Field":
        """Insecure small field for statistical tests."""
        return cls(q, chunk_bytes, max(1, (q.bit_length() + 7) // 8), insecure=True)

    @property
    def is_private(self) -> bool:
        return self.q == PRIVATE_Q and self.chunk_bytes == 7

    def elem_from_chunk(self, chunk: bytes) -> int:
        if len(chunk) != self.chunk_bytes:
            raise FieldError(f"expected {self.chunk_bytes}-byte chunk, got {len(chunk)}")
        return int.from_bytes(chunk, "little")

    def chunk_from_elem(self, value: int) -> bytes:
        if not 0 <= value < 256 ** self.chunk_bytes:
            raise FieldError(f"value does not fit in {self.chunk_bytes} bytes")
        return value.to_bytes(self.chunk_bytes, "little")

    def encode(self, value: int) -> bytes:
        """Canonical wire encoding (little-endian, ``elem_bytes`` wide)."""
        if not 0 <= value < self.q:
            raise FieldError("non-canonical element")
        return value.to_bytes(self.elem_bytes, "little")

    def decode(self, data: bytes) -> int:
        if len(data) != self.elem_bytes:
            raise FieldError("wrong element length")
        value = int.from_bytes(data, "little")
        if value >= self.q:
            raise FieldError("non-canonical element")
        return value

    def encode_vector(self, values: Sequence[int]) -> bytes:
        return b"".join(self.encode(int(v)) for v in values)

    def decode_vector(self, data: bytes, count: int | None = None) -> list[int]:
        w = self.elem_bytes
        if len(data) % w or (count is not None and len(data) != count * w):
            raise FieldError("vector length mismatch")
        return [self.decode(data[k:k + w]) for k in range(0, len(data), w)]


PRIVATE = Field(PRIVATE_Q, 7, 8)
PUBLIC = Field(PUBLIC_Q, 31, 32)


def elem_from_chunk(chunk: bytes, field: Field = PRIVATE) -> int:
    return field.elem_from_chunk(chunk)


def chunk_from_elem(value: int, field: Field = PRIVATE) -> bytes:
    return field.chunk_from_elem(value)


def random_nonzero(q: int, rng=None) -> int:
    """Uniform element of F_q minus zero."""
    rng = rng or secrets.SystemRandom()
    return rng.randrange(1, q)


def powers(rho: int, n: int, q: int) -> list[int]:
    """``[rho, rho**2, ..., rho**n] mod q``."""
    rho %= q
    if rho == 0:
        raise FieldError("challenge must be nonzero")
    if n < 1:
        raise FieldError("dimension must be positive")
    out = []
    acc = 1
    for _ in range(n):
        acc = acc * rho % q
        out.append(acc)
    return out


def dot(a: Sequence[int], b: Sequence[int], q: int) -> int:
    if len(a) != len(b):
        raise FieldError(f"length mismatch: {len(a)} vs {len(b)}")
    return sum(int(x) * int(y) for x, y in zip(a, b)) % q


def horner_powers(coeffs: Sequence[int], s: int, q: int) -> int:
    """``sum_k coeffs[k] * s**(k+1) mod q`` in one pass."""
    acc = 0
    for c in reversed(coeffs):
        acc = (acc + int(c)) * s % q
    return acc


def matrix_shape(n_bytes: int, chunk_bytes: int) -> tuple[int, int]:
    """Near-square ``(m, n)`` with ``m * n >= ceil(n_bytes / chunk_bytes)``."""
    if n_bytes < 1:
        raise FieldError("file must be nonempty")
    cells = -(-n_bytes // chunk_bytes)
    n = math.isqrt(cells)
    if n * n < cells:
        n += 1
    m = -(-cells // n)
    return m, n


class MatrixView:
    """Random-access byte source seen as an ``m x n`` matrix of cells.

    ``source`` can be anything exposing the buffer protocol (``bytes``,
    ``bytearray``, ``mmap``, ``np.memmap``).  Only the first ``n_bytes`` bytes
    are part of the matrix.
    """

    def __init__(self, source, m: int, n: int, chunk_bytes: int, n_bytes: int | None = None):
        self.buf = np.frombuffer(source, dtype=np.uint8) if not isinstance(source, np.ndarray) else source
        self.n_bytes = len(self.buf) if n_bytes is None else n_bytes
        if self.n_bytes > len(self.buf):
            raise FieldError("n_bytes exceeds source length")
        self.m, self.n, self.chunk_bytes = m, n, chunk_bytes
        if m * n * chunk_bytes < self.n_bytes:
            raise FieldError("matrix too small for the file")

    @classmethod
    def for_field(cls, source, field: Field, n_bytes: int | None = None) -> "MatrixView":
        size = len(source) if n_bytes is None else n_bytes
        m, n = matrix_shape(size, field.chunk_bytes)
        return cls(source, m, n, field.chunk_bytes, size)

    @classmethod
    def from_cells(cls, cells: Sequence[Sequence[int]], chunk_bytes: int) -> "MatrixView":
        """Pack an explicit matrix into bytes (used by tests and demos)."""
        m, n = len(cells), len(cells[0])
        data = b"".join(int(v).to_bytes(chunk_bytes, "little") for row in cells for v in row)
        return cls(data, m, n, chunk_bytes)

    @property
    def row_bytes(self) -> int:
        return self.n * self.chunk_bytes

    def cell(self, i: int, j: int) -> int:
        if not (0 <= i < self.m and 0 <= j < self.n):
            raise IndexError((i, j))
        off = (i * self.n + j) * self.chunk_bytes
        end = min(off + self.chunk_bytes, self.n_bytes)
        if off >= end:
            return 0
        return int.from_bytes(bytes(self.buf[off:end]), "little")

    def row_block(self, r0: int, r1: int) -> np.ndarray:
        """Raw bytes of rows ``[r0, r1)``, zero-padded past the file tail."""
        lo, hi = r0 * self.row_bytes, r1 * self.row_bytes
        if hi <= self.n_bytes:
            return self.buf[lo:hi]
        out = np.zeros(hi - lo, dtype=np.uint8)
        if lo < self.n_bytes:
            out[:self.n_bytes - lo] = self.buf[lo:self.n_bytes]
        return out

    def cells(self, r0: int = 0, r1: int | None = None) -> np.ndarray:
        """Decoded cells of rows ``[r0, r1)``.

        uint64 for chunks up to 7 bytes, Python ints (object) otherwise.
        """
        r1 = self.m if r1 is None else r1
        raw = self.row_block(r0, r1)
        c = self.chunk_bytes
        rows = r1 - r0
        if c <= 7:
            padded = np.zeros((rows * self.n, 8), dtype=np.uint8)
            padded[:, :c] = np.asarray(raw).reshape(-1, c)
            return padded.view("<u8").reshape(rows, self.n)
        raw = bytes(raw)
        out = np.empty((rows, self.n), dtype=object)
        for k in range(rows * self.n):
            out.flat[k] = int.from_bytes(raw[k * c:(k + 1) * c], "little")
        return out

    def to_matrix(self) -> list[list[int]]:
        return [[int(v) for v in row] for row in self.cells()]


def _full_rows(view: MatrixView) -> int:
    return min(view.m, view.n_bytes // view.row_bytes)


def _split(values: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([int(v) for v in values], dtype=np.int64)
    return a & ((1 << 28) - 1), a >> 28


def _generic_matvec(cells: np.ndarray, x: Sequence[int], q: int) -> list[int]:
    if cells.dtype != object and q <= 2**31:
        c = cells.astype(np.int64) % q
        xv = np.array([int(v) for v in x], dtype=np.int64)
        group = max(1, (2**63 - 1) // max(1, (q - 1) ** 2))
        acc = np.zeros(c.shape[0], dtype=np.int64)
        for j in range(0, c.shape[1], group):
            acc = (acc + c[:, j:j + group] @ xv[j:j + group]) % q
        return [int(v) for v in acc]
    xo = np.array([int(v) for v in x], dtype=object)
    return [int(v) % q for v in cells.astype(object).dot(xo)]


def iter_mat_vec(view: MatrixView, x: Sequence[int], q: int,
                 rows_per_block: int = 4096, workers: int = 1) -> Iterator[list[int]]:
    """Yield ``M x`` in consecutive row blocks (constant memory per block)."""
    if len(x) != view.n:
        raise FieldError(f"challenge length {len(x)} != n={view.n}")
    private = q == PRIVATE_Q and view.chunk_bytes == 7
    if private:
        xlo, xhi = _split(x)
    full = _full_rows(view) if private else 0
    pool = ThreadPoolExecutor(workers) if private and workers > 1 else None
    try:
        for r0 in range(0, view.m, rows_per_block):
            r1 = min(view.m, r0 + rows_per_block)
            if private:
                out = np.zeros(r1 - r0, dtype=np.int64)
                if r1 <= full:
                    _run_rows(pool, workers, view.buf, view.n, r0, r1, xlo, xhi, out)
                else:
                    if r0 < full:
                        _run_rows(pool, workers, view.buf, view.n, r0, full, xlo, xhi, out[:full - r0])
                    s = max(r0, full)
                    tail = np.ascontiguousarray(view.row_block(s, r1))
                    _kernels.matvec_rows(tail, view.n, 0, r1 - s, xlo, xhi, out[s - r0:])
                yield [int(v) for v in out]
            else:
                yield _generic_matvec(view.cells(r0, r1), x, q)
    finally:
        if pool is not None:
            pool.shutdown()


def _run_rows(pool, workers, buf, n, r0, r1, xlo, xhi, out):
    if pool is None or r1 - r0 < 2 * workers:
        _kernels.matvec_rows(buf, n, r0, r1, xlo, xhi, out)
        return
    bounds = np.linspace(r0, r1, workers + 1).astype(int)
    futs = [pool.submit(_kernels.matvec_rows, buf, n, a, b, xlo, xhi, out[a - r0:b - r0])
            for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    for f in futs:
        f.result()


def mat_vec_stream(view: MatrixView, x: Sequence[int], q: int, workers: int = 1) -> list[int]:
    """``y = M x mod q``; identical for any ``workers`` count."""
    rows = view.m if workers > 1 else 4096
    y: list[int] = []
    for part in iter_mat_vec(view, x, q, rows_per_block=rows, workers=workers):
        y.extend(part)
    return y


def vec_mat_stream(view: MatrixView, u_rows: Sequence[Sequence[int]], q: int) -> list[list[int]]:
    """``U M mod q`` for a ``t x m`` matrix ``U``, one streaming pass per row of ``U``."""
    out = []
    for u in u_rows:
        if len(u) != view.m:
            raise FieldError(f"control row length {len(u)} != m={view.m}")
        if q == PRIVATE_Q and view.chunk_bytes == 7:
            ulo, uhi = _split(u)
            acc = [np.zeros(view.n, dtype=np.int64) for _ in range(3)]
            full = _full_rows(view)
            _kernels.vecmat_rows(view.buf, view.n, 0, full, ulo, uhi, *acc)
            if full < view.m:
                tail = np.ascontiguousarray(view.row_block(full, view.m))
                _kernels.vecmat_rows(tail, view.n, 0, view.m - full,
                                     ulo[full:], uhi[full:], *acc)
            res = np.zeros(view.n, dtype=np.int64)
            _kernels.combine_limbs(*acc, res)
            out.append([int(v) for v in res])
        else:
            acc = [0] * view.n
            step = 1024
            for r0 in range(0, view.m, step):
                r1 = min(view.m, r0 + step)
                cells = view.cells(r0, r1).astype(object)
                uo = np.array([int(v) for v in u[r0:r1]], dtype=object)
                part = uo.dot(cells)
                acc = [(a + int(p)) % q for a, p in zip(acc, part)]
            out.append(acc)
    return out


def matmul_mod(a: Sequence[Sequence[int]], b: Sequence[Sequence[int]], q: int) -> list[list[int]]:
    if q == PRIVATE_Q:
        res = _kernels.matmul_mod(np.array(a, dtype=np.int64).reshape(len(a), -1),
                                  np.array(b, dtype=np.int64).reshape(len(b), -1))
        return res.tolist()
    ao = np.array([[int(v) for v in row] for row in a], dtype=object)
    bo = np.array([[int(v) for v in row] for row in b], dtype=object)
    return [[int(v) % q for v in row] for row in ao.dot(bo)]


def _inverse(a: int, q: int) -> int:
    try:
        return pow(a, -1, q)
    except ValueError:
        raise SingularSystemError(f"{a} is not invertible modulo {q}") from None


def interpolate_rows(points: Sequence[int], Y: Sequence[Sequence[int]], q: int,
                     n: int | None = None) -> list[list[int]]:
    """Solve ``Y = M X`` where column ``l`` of ``X`` is ``powers(points[l], n)``.

    Row ``i`` of ``Y`` holds evaluations of ``rho * P_i(rho)`` with ``P_i`` the
    polynomial whose coefficients are row ``i`` of ``M``, so each row is a
    Lagrange interpolation on the first ``n`` points.  Any further columns
    are checked against the solution.
    """
    pts = [int(p) % q for p in points]
    n = len(pts) if n is None else n
    if len(pts) < n:
        raise SingularSystemError(f"need {n} points, got {len(pts)}")
    if len(set(pts)) != len(pts):
        raise SingularSystemError("evaluation points are not distinct")
    if 0 in pts:
        raise SingularSystemError("evaluation point 0 is not allowed")
    Y = [[int(v) % q for v in row] for row in Y]
    if any(len(row) != len(pts) for row in Y):
        raise FieldError("Y must have one column per point")
    base = pts[:n]

    # master polynomial prod (X - p), coefficients low -> high
    master = [1]
    for p in base:
        nxt = [0] * (len(master) + 1)
        for k, c in enumerate(master):
            nxt[k] = (nxt[k] - p * c) % q
            nxt[k + 1] = (nxt[k + 1] + c) % q
        master = nxt

    basis = []
    scale = []
    for l, p in enumerate(base):
        # synthetic division master / (X - p)
        quo = [0] * n
        carry = 0
        for k in range(n, 0, -1):
            carry = (master[k] + carry * p) % q if k < n else master[k]
            quo[k - 1] = carry
        denom = 1
        for k, r in enumerate(base):
            if k != l:
                denom = denom * (p - r) % q
        basis.append(quo)
        scale.append(_inverse(denom * p % q, q))

    scaled = [[row[l] * scale[l] % q for l in range(n)] for row in Y]
    M = matmul_mod(scaled, basis, q)

    if len(pts) > n:
        extra = pts[n:]
        X = [powers(p, n, q) for p in extra]
        Xt = [list(col) for col in zip(*X)]
        check = matmul_mod(M, Xt, q)
        for i, row in enumerate(Y):
            if check[i] != row[n:]:
                raise InconsistentSystemError(
                    f"row {i}: extra transcripts disagree with the reconstruction")
    return M
