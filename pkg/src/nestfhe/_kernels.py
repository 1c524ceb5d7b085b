"""Numba kernels for word-size modular arithmetic on RNS limbs.

Moduli are odd primes below 2**62.  Products need 128-bit intermediates,
which are emulated with 32-bit halves.
"""

import numpy as np
from numba import njit

_U32 = np.uint64(32)
_M32 = np.uint64(0xFFFFFFFF)
_ONE = np.uint64(1)
_ZERO = np.uint64(0)


@njit(cache=True, inline="always")
def mul128(a, b):
    a0 = a & _M32
    a1 = a >> _U32
    b0 = b & _M32
    b1 = b >> _U32
    p00 = a0 * b0
    p01 = a0 * b1
    p10 = a1 * b0
    p11 = a1 * b1
    mid = (p00 >> _U32) + (p01 & _M32) + (p10 & _M32)
    lo = (p00 & _M32) | (mid << _U32)
    hi = p11 + (p01 >> _U32) + (p10 >> _U32) + (mid >> _U32)
    return hi, lo


@njit(cache=True, inline="always")
def mulhi(a, b):
    hi, _ = mul128(a, b)
    return hi


@njit(cache=True, inline="always")
def mul_shoup(a, w, wp, q):
    # a < 2**64, w < q, wp = floor(w * 2**64 / q)
    qhat = mulhi(a, wp)
    r = a * w - qhat * q
    if r >= q:
        r -= q
    return r


@njit(cache=True, inline="always")
def mont_mul(a, b, q, qneg_inv):
    hi, lo = mul128(a, b)
    m = lo * qneg_inv
    t = mulhi(m, q)
    r = hi + t
    if lo != _ZERO:
        r += _ONE
    if r >= q:
        r -= q
    return r


@njit(cache=True, inline="always")
def mulmod(a, b, q, qneg_inv, r2):
    return mont_mul(mont_mul(a, b, q, qneg_inv), r2, q, qneg_inv)


@njit(cache=True)
def ntt_forward(x, psi, psi_p, q):
    """In-place negacyclic NTT of each row; output in bit-reversed order."""
    k, n = x.shape
    for r in range(k):
        qr = q[r]
        row = x[r]
        t = n
        m = 1
        while m < n:
            t >>= 1
            for i in range(m):
                j1 = 2 * i * t
                w = psi[r, m + i]
                wp = psi_p[r, m + i]
                for j in range(j1, j1 + t):
                    u = row[j]
                    v = mul_shoup(row[j + t], w, wp, qr)
                    s = u + v
                    if s >= qr:
                        s -= qr
                    row[j] = s
                    d = u + qr - v
                    if d >= qr:
                        d -= qr
                    row[j + t] = d
            m <<= 1


@njit(cache=True)
def ntt_inverse(x, ipsi, ipsi_p, q, ninv, ninv_p):
    k, n = x.shape
    for r in range(k):
        qr = q[r]
        row = x[r]
        t = 1
        m = n
        while m > 1:
            h = m >> 1
            j1 = 0
            for i in range(h):
                w = ipsi[r, h + i]
                wp = ipsi_p[r, h + i]
                for j in range(j1, j1 + t):
                    u = row[j]
                    v = row[j + t]
                    s = u + v
                    if s >= qr:
                        s -= qr
                    row[j] = s
                    row[j + t] = mul_shoup(u + qr - v, w, wp, qr)
                j1 += 2 * t
            t <<= 1
            m = h
        c = ninv[r]
        cp = ninv_p[r]
        for j in range(n):
            row[j] = mul_shoup(row[j], c, cp, qr)


@njit(cache=True)
def mul_rows(a, b, q, qneg_inv, r2):
    k, n = a.shape
    out = np.empty_like(a)
    for r in range(k):
        qr = q[r]
        qi = qneg_inv[r]
        rr = r2[r]
        for j in range(n):
            out[r, j] = mulmod(a[r, j], b[r, j], qr, qi, rr)
    return out


@njit(cache=True)
def mac_rows(acc, a, b, q, qneg_inv, r2):
    """acc += a * b, row-wise modular."""
    k, n = a.shape
    for r in range(k):
        qr = q[r]
        qi = qneg_inv[r]
        rr = r2[r]
        for j in range(n):
            s = acc[r, j] + mulmod(a[r, j], b[r, j], qr, qi, rr)
            if s >= qr:
                s -= qr
            acc[r, j] = s


@njit(cache=True)
def scalar_rows(a, c, cp, q):
    """Multiply row r by the constant c[r] (Shoup form)."""
    k, n = a.shape
    out = np.empty_like(a)
    for r in range(k):
        for j in range(n):
            out[r, j] = mul_shoup(a[r, j], c[r], cp[r], q[r])
    return out


@njit(cache=True)
def base_convert(x, qhat_inv, qhat_inv_p, q_in, qhat_mod_p, qhat_mod_p_p, p_out):
    """Fast (approximate) base conversion from q_in to p_out.

    y_i = x_i * (Q/q_i)^-1 mod q_i, out_j = sum_i y_i * (Q/q_i) mod p_j.
    The result can exceed the true value by a small multiple of Q.
    """
    k_in, n = x.shape
    k_out = p_out.shape[0]
    y = np.empty_like(x)
    for i in range(k_in):
        for t in range(n):
            y[i, t] = mul_shoup(x[i, t], qhat_inv[i], qhat_inv_p[i], q_in[i])
    out = np.zeros((k_out, n), dtype=np.uint64)
    for j in range(k_out):
        pj = p_out[j]
        for i in range(k_in):
            c = qhat_mod_p[j, i]
            cp = qhat_mod_p_p[j, i]
            for t in range(n):
                s = out[j, t] + mul_shoup(y[i, t], c, cp, pj)
                if s >= pj:
                    s -= pj
                out[j, t] = s
    return out


@njit(cache=True)
def garner_balanced(x, q, inv, inv_p):
    """Balanced mixed-radix digits of the centred CRT value.

    inv[i, j] = q_j^-1 mod q_i for j < i.  Returns int64 digits d with
    value = sum_i d_i * prod_{j<i} q_j and |d_i| <= q_i / 2.
    """
    k, n = x.shape
    d = np.zeros((k, n), dtype=np.int64)
    for t in range(n):
        for i in range(k):
            qi = q[i]
            v = x[i, t]
            for j in range(i):
                dj = d[j, t]
                if dj >= 0:
                    sub = np.uint64(dj) % qi
                else:
                    sub = (qi - (np.uint64(-dj) % qi)) % qi
                v = v + qi - sub
                if v >= qi:
                    v -= qi
                v = mul_shoup(v, inv[i, j], inv_p[i, j], qi)
            if v > (qi >> _ONE):
                d[i, t] = -np.int64(qi - v)
            else:
                d[i, t] = np.int64(v)
    return d
