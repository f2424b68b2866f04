"""numba kernels for arithmetic modulo the 57-bit prime q = 2**57 - 13.

Operands are split into 28-bit limbs so every partial product fits in a
signed 64-bit word; partial sums are folded every ``BLOCK`` terms using
2**57 == 13 (mod q).  All kernels release the GIL so callers can split row
ranges across threads.
"""

import numpy as np
from numba import njit

Q = 144115188075855859
BLOCK = 16

_MASK57 = (1 << 57) - 1
_MASK28 = (1 << 28) - 1
_MASK29 = (1 << 29) - 1
_TWO56 = 1 << 56


@njit(inline="always", cache=True)
def _fold(v):
    # v < 2**63  ->  canonical residue
    r = (v >> 57) * 13 + (v & _MASK57)
    if r >= Q:
        r -= Q
    return r


@njit(inline="always", cache=True)
def _combine(hh, cr, ll):
    # hh * 2**56 + cr * 2**28 + ll, each input already < q
    a = _fold(13 * (hh >> 1) + (hh & 1) * _TWO56)
    c = _fold(13 * (cr >> 29) + ((cr & _MASK29) << 28))
    return _fold(a + c + ll)


@njit(inline="always", cache=True)
def _cell7(buf, o):
    return (np.int64(buf[o])
            | (np.int64(buf[o + 1]) << 8)
            | (np.int64(buf[o + 2]) << 16)
            | (np.int64(buf[o + 3]) << 24)
            | (np.int64(buf[o + 4]) << 32)
            | (np.int64(buf[o + 5]) << 40)
            | (np.int64(buf[o + 6]) << 48))


@njit(nogil=True, cache=True)
def matvec_rows(buf, n, r0, r1, xlo, xhi, out):
    """out[i - r0] = sum_j M[i, j] * x[j] mod q for rows r0 <= i < r1.

    ``buf`` holds whole rows of 7-byte little-endian cells starting at row 0.
    """
    for i in range(r0, r1):
        base = i * n * 7
        rh = 0
        rc = 0
        rl = 0
        j = 0
        while j < n:
            je = min(j + BLOCK, n)
            ah = 0
            ac = 0
            al = 0
            for jj in range(j, je):
                c = _cell7(buf, base + jj * 7)
                cl = c & _MASK28
                ch = c >> 28
                ah += ch * xhi[jj]
                ac += ch * xlo[jj] + cl * xhi[jj]
                al += cl * xlo[jj]
            rh = _fold(rh + ah)
            rc = _fold(rc + ac)
            rl = _fold(rl + al)
            j = je
        out[i - r0] = _combine(rh, rc, rl)


@njit(nogil=True, cache=True)
def vecmat_rows(buf, n, r0, r1, ulo, uhi, acc_h, acc_c, acc_l):
    """Accumulate sum_i u[i] * M[i, :] for rows r0 <= i < r1 into limb sums.

    ``ulo``/``uhi`` are indexed by absolute row.  Accumulators stay canonical
    between calls; :func:`combine_limbs` turns them into residues.
    """
    th = np.zeros(n, dtype=np.int64)
    tc = np.zeros(n, dtype=np.int64)
    tl = np.zeros(n, dtype=np.int64)
    i = r0
    while i < r1:
        ie = min(i + BLOCK, r1)
        th[:] = 0
        tc[:] = 0
        tl[:] = 0
        for ii in range(i, ie):
            base = ii * n * 7
            ul = ulo[ii]
            uh = uhi[ii]
            for j in range(n):
                c = _cell7(buf, base + j * 7)
                cl = c & _MASK28
                ch = c >> 28
                th[j] += ch * uh
                tc[j] += ch * ul + cl * uh
                tl[j] += cl * ul
        for j in range(n):
            acc_h[j] = _fold(acc_h[j] + th[j])
            acc_c[j] = _fold(acc_c[j] + tc[j])
            acc_l[j] = _fold(acc_l[j] + tl[j])
        i = ie


@njit(nogil=True, cache=True)
def combine_limbs(acc_h, acc_c, acc_l, out):
    for j in range(out.shape[0]):
        out[j] = _combine(acc_h[j], acc_c[j], acc_l[j])


@njit(nogil=True, cache=True)
def matmul_mod(a, b):
    """a @ b mod q for canonical int64 matrices."""
    m, k = a.shape
    n = b.shape[1]
    blo = b & _MASK28
    bhi = b >> 28
    out = np.zeros((m, n), dtype=np.int64)
    th = np.zeros(n, dtype=np.int64)
    tc = np.zeros(n, dtype=np.int64)
    tl = np.zeros(n, dtype=np.int64)
    rh = np.zeros(n, dtype=np.int64)
    rc = np.zeros(n, dtype=np.int64)
    rl = np.zeros(n, dtype=np.int64)
    for i in range(m):
        rh[:] = 0
        rc[:] = 0
        rl[:] = 0
        l0 = 0
        while l0 < k:
            le = min(l0 + BLOCK, k)
            th[:] = 0
            tc[:] = 0
            tl[:] = 0
            for l in range(l0, le):
                v = a[i, l]
                vl = v & _MASK28
                vh = v >> 28
                for j in range(n):
                    th[j] += vh * bhi[l, j]
                    tc[j] += vh * blo[l, j] + vl * bhi[l, j]
                    tl[j] += vl * blo[l, j]
            for j in range(n):
                rh[j] = _fold(rh[j] + th[j])
                rc[j] = _fold(rc[j] + tc[j])
                rl[j] = _fold(rl[j] + tl[j])
            l0 = le
        for j in range(n):
            out[i, j] = _combine(rh[j], rc[j], rl[j])
    return out
