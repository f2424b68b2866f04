import dataclasses
import random

import pytest
from hypothesis import given, settings, strategies as st

from matpor import field as F
from matpor import porcore as pc
from matpor.params import ParameterError, Strategy, control_rows, derive_params

Q = F.PRIVATE_Q


def cells_bytes(M):
    return b"".join(v.to_bytes(7, "little") for row in M for v in row)


def with_seeds(client, server, s):
    """Replace the secret seeds (and V) of a LOCAL client, for hand examples."""
    p = client.params
    V = F.vec_mat_stream(server.matrix(), pc.control_rows_u(s, p.m, p.q), p.q)
    return dataclasses.replace(client, s=tuple(s), V=V)


def recompute_V(client, server):
    p = client.params
    return F.vec_mat_stream(server.matrix(), pc.control_rows_u(client.s, p.m, p.q), p.q)


# -- parameters -------------------------------------------------------------

def test_derive_params_1gb():
    p = derive_params(10**9, lam=40)
    assert (p.n, p.m, p.t) == (11953, 11952, 1)
    assert p.block_bytes == 8190 and p.block_bytes % 7 == 0


def test_e_formula():
    p = derive_params(64 * 64 * 7, lam=40)
    assert p.n == 64 and p.e == 4 * 64 + 960 == 1216


def test_t_two_for_lambda_80():
    assert control_rows(80, Q, 2**13) == 2
    assert control_rows(40, Q, 2**13) == 1


def test_field_size_constraint_is_enforced():
    with pytest.raises(ParameterError, match="16n"):
        derive_params(7 * 2**108)


def test_params_reject_empty_and_tiny_shape():
    with pytest.raises(ParameterError):
        derive_params(0)
    with pytest.raises(ParameterError):
        derive_params(100, shape=(1, 1))


def test_public_block_size():
    p = derive_params(10**5, mode="public")
    assert p.block_bytes == 8184 and p.block_bytes % 31 == 0 and p.elem_bytes == 32


# -- init / write hand examples ---------------------------------------------

def test_init_and_write_hand_example(rng):
    M = [[1, 2], [3, 4]]
    p = derive_params(28)
    assert (p.m, p.n) == (2, 2)
    client, server = pc.por_init(p, cells_bytes(M), rng)
    client = with_seeds(client, server, [2])
    assert client.V == [[14, 20]]
    pc.por_write(client, server, 0, 0, 5)
    assert client.V == [[22, 20]]
    assert pc.por_read(client, server, 0, 0) == 5
    assert pc.por_audit(client, server, rng).accepted


def test_zero_matrix_gives_zero_V(rng):
    p = derive_params(7 * 9)
    client, _ = pc.por_init(p, bytes(63), rng)
    assert client.V == [[0] * p.n for _ in range(p.t)]


def test_writing_same_value_changes_nothing(rng, blob):
    p = derive_params(len(blob))
    client, server = pc.por_init(p, blob, rng)
    before = (client.root_m, [row[:] for row in client.V])
    v = pc.por_read(client, server, 3, 4)
    pc.por_write(client, server, 3, 4, v)
    assert (client.root_m, client.V) == before


def test_write_spanning_two_cells_updates_both_columns(rng, blob):
    p = derive_params(len(blob))
    client, server = pc.por_init(p, blob, rng)
    pc.write_bytes(client, server, 7 * 5 + 3, b"\xaa" * 9)  # touches cells 5, 6 (and 7)
    assert client.V == recompute_V(client, server)
    assert pc.read_bytes(client, server, 7 * 5 + 3, 9) == b"\xaa" * 9


def test_write_across_merkle_blocks(rng, blob):
    for strategy in Strategy.LOCAL, Strategy.EXTERN:
        p = derive_params(len(blob), strategy=strategy)
        client, server = pc.por_init(p, blob, rng)
        off = p.block_bytes - 5
        pc.write_bytes(client, server, off, b"0123456789")
        assert pc.read_bytes(client, server, off, 10) == b"0123456789"
        assert pc.por_audit(client, server, rng).accepted


def test_range_errors(rng, blob):
    p = derive_params(len(blob))
    client, server = pc.por_init(p, blob, rng)
    with pytest.raises(IndexError):
        pc.read_bytes(client, server, len(blob) - 2, 5)
    with pytest.raises(IndexError):
        pc.por_read(client, server, p.m, 0)
    with pytest.raises(F.FieldError):
        pc.por_write(client, server, 0, 0, 2**56)


# -- honest runs --------------------------------------------------------------

ops = st.lists(st.tuples(st.sampled_from(["read", "write", "audit"]),
                         st.integers(0, 10**9), st.integers(1, 40)), min_size=1, max_size=12)


@settings(max_examples=25)
@given(st.integers(1, 30000), st.sampled_from([Strategy.LOCAL, Strategy.EXTERN]), ops,
       st.integers(0, 2**32))
def test_honest_sequences_never_reject(size, strategy, seq, seed):
    r = random.Random(seed)
    data = bytearray(r.getrandbits(8) for _ in range(size))
    p = derive_params(size, strategy=strategy)
    client, server = pc.por_init(p, bytes(data), r)
    for op, where, length in seq:
        off = where % size
        length = min(length, size - off)
        if op == "read":
            assert pc.read_bytes(client, server, off, length) == bytes(data[off:off + length])
        elif op == "write":
            new = bytes(r.getrandbits(8) for _ in range(length))
            pc.write_bytes(client, server, off, new)
            data[off:off + length] = new
        else:
            assert pc.por_audit(client, server, r).accepted
    assert pc.current_V(client, server) == recompute_V(client, server)
    assert bytes(server.data) == bytes(data)


def test_extract_reproduces_current_file(rng):
    data = bytearray(rng.getrandbits(8) for _ in range(7 * 20 * 20 - 3))
    p = derive_params(len(data), lam=2)
    client, server = pc.por_init(p, bytes(data), rng)
    pc.write_bytes(client, server, 100, b"fresh bytes")
    data[100:111] = b"fresh bytes"
    transcripts = [pc.por_audit(client, server, rng) for _ in range(p.e)]
    assert pc.por_extract(p, transcripts) == bytes(data)


# -- rejects -------------------------------------------------------------------

class FlippingServer:
    """Serves honest proofs but flips one bit in the returned blocks."""

    def __init__(self, inner, bit):
        self.inner, self.bit = inner, bit

    def __getattr__(self, k):
        return getattr(self.inner, k)

    def prove_m(self, lo, hi):
        blocks, path = self.inner.prove_m(lo, hi)
        b = bytearray(blocks[0])
        b[self.bit // 8 % len(b)] ^= 1 << (self.bit % 8)
        return [bytes(b)] + blocks[1:], path


@given(st.integers(0, 10**6))
def test_flipped_block_rejects_read_and_write(bit):
    r = random.Random(bit)
    data = bytes(r.getrandbits(8) for _ in range(9000))
    p = derive_params(len(data))
    client, server = pc.por_init(p, data, r)
    bad = FlippingServer(server, bit)
    before = pc.ClientState.to_bytes(client)
    with pytest.raises(pc.Reject):
        pc.read_bytes(client, bad, 10, 20)
    with pytest.raises(pc.Reject):
        pc.write_bytes(client, bad, 10, b"zz")
    assert client.to_bytes() == before


def test_stale_block_after_write_rejects(rng, blob):
    p = derive_params(len(blob))
    client, server = pc.por_init(p, blob, rng)
    old = server.prove_m(0, 1)
    pc.write_bytes(client, server, 5, b"new")

    class Stale:
        def prove_m(self, lo, hi):
            return old

    with pytest.raises(pc.Reject):
        pc.read_bytes(client, Stale(), 5, 3)


def test_corrupted_cell_fails_audit(rng, blob):
    p = derive_params(len(blob))
    client, server = pc.por_init(p, blob, rng)
    server.corrupt(4321)
    assert not any(pc.por_audit(client, server, rng).accepted for _ in range(50))


def test_perturbed_y_rejects(rng, blob):
    p = derive_params(len(blob))
    client, server = pc.por_init(p, blob, rng)

    class Liar:
        def audit(self, rho):
            y = server.audit(rho)
            y[0] = (y[0] + 1) % Q
            return y

    assert not pc.por_audit(client, Liar(), rng).accepted


def test_wrong_length_y_rejects(rng, blob):
    p = derive_params(len(blob))
    client, server = pc.por_init(p, blob, rng)

    class Short:
        def audit(self, rho):
            return server.audit(rho)[:-1]

    assert not pc.por_audit(client, Short(), rng).accepted
    assert not pc.check_response(client, client.V, 5, [Q] * p.m)


def test_tampered_w_rejects(rng, blob):
    p = derive_params(len(blob), strategy=Strategy.EXTERN)
    client, server = pc.por_init(p, blob, rng)
    server.w[20] ^= 1  # the server's own tree is not updated
    assert not pc.por_audit(client, server, rng).accepted
    # re-hashing the tree does not help: the root is the client's
    from matpor.merkle import mt_init
    server.tree_w, _ = mt_init(server.w, p.block_bytes)
    assert not pc.por_audit(client, server, rng).accepted


def test_w_records_are_authenticated(rng):
    p = derive_params(7 * 50, strategy=Strategy.EXTERN)
    key = bytes(range(32))
    rec = pc.encrypt_column(key, p, 3, 0, [123])
    assert len(rec) == p.w_record_bytes
    assert pc.decrypt_column(key, p, 3, rec) == (0, [123])
    with pytest.raises(pc.Reject):  # moved to another column
        pc.decrypt_column(key, p, 4, rec)
    forged = bytearray(rec)
    forged[0] ^= 1  # counter is bound through the nonce
    with pytest.raises(pc.Reject):
        pc.decrypt_column(key, p, 3, bytes(forged))


# -- extraction -------------------------------------------------------------------

def test_extract_hand_example():
    p = derive_params(28)
    trs = [pc.AuditTranscript(1, [3, 7], True), pc.AuditTranscript(2, [10, 22], True)]
    assert pc.por_extract(p, trs) == cells_bytes([[1, 2], [3, 4]])


def test_extract_needs_distinct_points():
    p = derive_params(28)
    trs = [pc.AuditTranscript(1, [3, 7], True)] * 5
    with pytest.raises(pc.ExtractionFailure) as err:
        pc.por_extract(p, trs)
    assert (err.value.distinct, err.value.needed) == (1, 2)


def test_extract_ignores_rejected():
    p = derive_params(28)
    trs = [pc.AuditTranscript(1, [3, 7], True), pc.AuditTranscript(2, [0, 0], False),
           pc.AuditTranscript(3, [21, 45], True)]
    assert pc.por_extract(p, trs) == cells_bytes([[1, 2], [3, 4]])


def test_extract_detects_forged_extra_transcript():
    p = derive_params(28)
    trs = [pc.AuditTranscript(1, [3, 7], True), pc.AuditTranscript(2, [10, 22], True),
           pc.AuditTranscript(3, [21, 44], True)]
    with pytest.raises(F.InconsistentSystemError):
        pc.por_extract(p, trs)


@given(st.integers(1, 16), st.integers(0, 2**32))
def test_extract_roundtrip_small(n, seed):
    r = random.Random(seed)
    size = 7 * n * n
    data = bytes(r.getrandbits(8) for _ in range(size))
    p = derive_params(size)
    assert p.n == n
    client, server = pc.por_init(p, data, r)
    trs = [pc.por_audit(client, server, r) for _ in range(n)]
    assert pc.por_extract(p, trs) == data


# -- persistence -----------------------------------------------------------------

@pytest.mark.parametrize("strategy", [Strategy.LOCAL, Strategy.EXTERN])
def test_state_roundtrip(rng, blob, strategy):
    p = derive_params(len(blob), strategy=strategy)
    client, server = pc.por_init(p, blob, rng)
    raw = client.to_bytes()
    assert raw[:4] == b"PORC" and raw[5] == (0 if strategy is Strategy.LOCAL else 1)
    again = pc.ClientState.from_bytes(raw)
    assert again == client
    assert pc.por_audit(again, server, rng).accepted
    with pytest.raises(ValueError):
        pc.ClientState.from_bytes(raw + b"x")


def test_transcript_roundtrip(rng):
    tr = pc.AuditTranscript(12345, [1, 2, Q - 1], True)
    raw = tr.to_bytes(F.PRIVATE)
    assert raw[:4] == b"PORT"
    assert pc.AuditTranscript.from_bytes(raw, F.PRIVATE) == tr
    with pytest.raises(ValueError):
        pc.AuditTranscript.from_bytes(raw, F.PUBLIC)
