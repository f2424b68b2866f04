"""Protocol parameters shared by client, server and wire."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from . import field as F
from .merkle import leaf_count


class Strategy(str, Enum):
    LOCAL = "local"
    EXTERN = "extern"
    PUBLIC = "public"


class ParameterError(ValueError):
    pass


# largest multiples of the cell width not above 8 KiB
PRIVATE_BLOCK = 8190
PUBLIC_BLOCK = 8184
TAG_BYTES = 16
COUNTER_BYTES = 8


def block_bytes_for(chunk_bytes: int) -> int:
    return 8192 // chunk_bytes * chunk_bytes


@dataclass(frozen=True)
class PorParams:
    n_bytes: int
    lam: int
    kappa: int
    field: F.Field
    m: int
    n: int
    t: int
    block_bytes: int
    strategy: Strategy = Strategy.LOCAL

    @property
    def q(self) -> int:
        return self.field.q

    @property
    def chunk_bytes(self) -> int:
        return self.field.chunk_bytes

    @property
    def elem_bytes(self) -> int:
        return self.field.elem_bytes

    @property
    def e(self) -> int:
        """Number of audit transcripts the extractor asks for."""
        return 4 * self.n + 24 * self.lam

    @property
    def public(self) -> bool:
        return self.strategy is Strategy.PUBLIC

    @property
    def has_w(self) -> bool:
        return self.strategy is not Strategy.LOCAL

    @property
    def leaf_count(self) -> int:
        return leaf_count(self.n_bytes, self.block_bytes)

    @property
    def w_record_bytes(self) -> int:
        """Bytes per column of W: AEAD record, or ``t`` group elements."""
        if self.strategy is Strategy.EXTERN:
            return COUNTER_BYTES + self.t * self.elem_bytes + TAG_BYTES
        if self.strategy is Strategy.PUBLIC:
            return 32 * self.t
        return 0

    @property
    def w_bytes(self) -> int:
        return self.w_record_bytes * self.n

    @property
    def w_leaf_count(self) -> int:
        return leaf_count(self.w_bytes, self.block_bytes) if self.has_w else 0

    def to_dict(self) -> dict:
        return {
            "n_bytes": self.n_bytes, "lam": self.lam, "kappa": self.kappa,
            "q": self.q, "chunk_bytes": self.chunk_bytes, "elem_bytes": self.elem_bytes,
            "insecure": self.field.insecure, "m": self.m, "n": self.n, "t": self.t,
            "block_bytes": self.block_bytes, "strategy": self.strategy.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PorParams":
        fld = F.Field(int(d["q"]), d["chunk_bytes"], d["elem_bytes"], d.get("insecure", False))
        return cls(d["n_bytes"], d["lam"], d["kappa"], fld, d["m"], d["n"], d["t"],
                   d["block_bytes"], Strategy(d["strategy"]))


def control_rows(lam: int, q: int, m: int) -> int:
    """``t = ceil(lam / (log2 q - log2 m))``."""
    gap = math.log2(q) - math.log2(m)
    if gap <= 0:
        raise ParameterError(f"q={q} is not larger than m={m}; no control row count works")
    return max(1, math.ceil(lam / gap))


def derive_params(n_bytes: int, lam: int = 40, kappa: int = 128, mode: str = "private",
                  strategy: Strategy | str = Strategy.LOCAL, field: F.Field | None = None,
                  shape: tuple[int, int] | None = None, t: int | None = None) -> PorParams:
    """Pick the matrix shape, ``t`` and block size for a file of ``n_bytes``.

    ``mode`` is ``"private"`` or ``"public"``.  Passing an explicit insecure
    ``field`` (and optionally ``shape`` / ``t``) skips the ``q >= 16n + 96 lam``
    check; that path exists only for statistical tests.
    """
    if n_bytes < 1:
        raise ParameterError("file must be nonempty")
    strategy = Strategy(strategy)
    if field is None:
        field = F.PUBLIC if mode == "public" else F.PRIVATE
    if mode == "public":
        strategy = Strategy.PUBLIC
    elif strategy is Strategy.PUBLIC:
        raise ParameterError("public strategy requires mode='public'")
    if shape is None:
        m, n = F.matrix_shape(n_bytes, field.chunk_bytes)
    else:
        m, n = shape
        if m * n * field.chunk_bytes < n_bytes:
            raise ParameterError("shape too small for the file")
    if not field.insecure and field.q < 16 * n + 96 * lam:
        raise ParameterError(f"q >= 16n + 96*lambda violated: {field.q} < {16 * n + 96 * lam}")
    if t is None:
        t = control_rows(lam, field.q, m)
    if field.chunk_bytes == 7:
        block = PRIVATE_BLOCK
    elif field.chunk_bytes == 31:
        block = PUBLIC_BLOCK
    else:
        block = block_bytes_for(field.chunk_bytes)
    return PorParams(n_bytes, lam, kappa, field, m, n, t, block, strategy)


def effective_kappa(q: int, m: int) -> float:
    """Largest kappa with ``q >= m * 2**(2 kappa)``."""
    return (math.log2(q) - math.log2(m)) / 2
