"""Prime-order groups for the publicly verifiable audit.

``Ristretto255`` wraps libsodium through ctypes; elements are their canonical
32-byte encodings.  ``ZModGroup`` is a tiny multiplicative group mod a small
prime, used to check the algebra with hand-computable numbers.

Both expose the same handful of operations: ``exp``, ``base_exp``, ``mul``,
``multi_exp``, ``encode`` and ``decode``.
"""

from __future__ import annotations

import ctypes
import ctypes.util
from functools import reduce
from typing import Sequence

from .field import PUBLIC_Q


class GroupError(ValueError):
    pass


def _load_sodium():
    name = ctypes.util.find_library("sodium")
    if name is None:
        return None
    lib = ctypes.CDLL(name)
    if lib.sodium_init() < 0 or not hasattr(lib, "crypto_scalarmult_ristretto255"):
        return None
    return lib


class Ristretto255:
    """The ristretto255 group (order ``2**252 + 277423...493``)."""

    name = "ristretto255"
    group_id = 0
    order = PUBLIC_Q
    IDENTITY = bytes(32)

    def __init__(self):
        lib = _load_sodium()
        if lib is None:
            raise GroupError("libsodium with ristretto255 support is required")
        self._lib = lib
        self.generator = self.base_exp(1)

    def identity(self) -> bytes:
        return self.IDENTITY

    def _scalar(self, k: int) -> bytes:
        return (k % self.order).to_bytes(32, "little")

    def base_exp(self, k: int) -> bytes:
        k %= self.order
        if k == 0:
            return self.IDENTITY
        out = ctypes.create_string_buffer(32)
        if self._lib.crypto_scalarmult_ristretto255_base(out, self._scalar(k)) != 0:
            return self.IDENTITY
        return out.raw

    def exp(self, a: bytes, k: int) -> bytes:
        k %= self.order
        if k == 0 or a == self.IDENTITY:
            return self.IDENTITY
        out = ctypes.create_string_buffer(32)
        if self._lib.crypto_scalarmult_ristretto255(out, self._scalar(k), a) != 0:
            # libsodium refuses to output the identity
            return self.IDENTITY
        return out.raw

    def mul(self, a: bytes, b: bytes) -> bytes:
        out = ctypes.create_string_buffer(32)
        if self._lib.crypto_core_ristretto255_add(out, a, b) != 0:
            raise GroupError("invalid group element")
        return out.raw

    def multi_exp(self, elems: Sequence[bytes], scalars: Sequence[int]) -> bytes:
        if len(elems) != len(scalars):
            raise GroupError("length mismatch")
        acc = self.IDENTITY
        for a, k in zip(elems, scalars):
            if k % self.order:
                acc = self.mul(acc, self.exp(a, k))
        return acc

    def encode(self, a: bytes) -> bytes:
        return a

    def decode(self, data: bytes) -> bytes:
        data = bytes(data)
        if len(data) != 32:
            raise GroupError("group elements are 32 bytes")
        if data != self.IDENTITY and not self._lib.crypto_core_ristretto255_is_valid_point(data):
            raise GroupError("non-canonical or invalid ristretto255 encoding")
        return data


class ZModGroup:
    """The multiplicative group mod a small prime ``p`` with generator ``g``.

    Exponents are reduced modulo ``order`` (the order of ``g``).
    Insecure; for tests only.
    """

    name = "zmod"
    group_id = 1

    def __init__(self, p: int = 23, g: int = 5, order: int | None = None):
        self.p = p
        self.generator = g % p
        self.order = order or self._order_of(self.generator)

    def _order_of(self, g: int) -> int:
        k, acc = 1, g
        while acc != 1:
            acc = acc * g % self.p
            k += 1
        return k

    def identity(self) -> int:
        return 1

    def base_exp(self, k: int) -> int:
        return pow(self.generator, k % self.order, self.p)

    def exp(self, a: int, k: int) -> int:
        return pow(a, k % self.order, self.p)

    def mul(self, a: int, b: int) -> int:
        return a * b % self.p

    def multi_exp(self, elems, scalars) -> int:
        if len(elems) != len(scalars):
            raise GroupError("length mismatch")
        return reduce(self.mul, (self.exp(a, k) for a, k in zip(elems, scalars)), 1)

    def encode(self, a: int) -> bytes:
        return int(a).to_bytes(32, "little")

    def decode(self, data: bytes) -> int:
        if len(data) != 32:
            raise GroupError("group elements are 32 bytes")
        v = int.from_bytes(data, "little")
        if not 0 < v < self.p:
            raise GroupError("element outside the group")
        return v


def group_by_id(group_id: int):
    if group_id == Ristretto255.group_id:
        return Ristretto255()
    if group_id == ZModGroup.group_id:
        return ZModGroup()
    raise GroupError(f"unknown group id {group_id}")
