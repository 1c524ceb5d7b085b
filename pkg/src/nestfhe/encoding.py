"""Slot, coefficient and nested encodings, plus the factored DFT.

Conventions.  ``n = N/2`` slots; slot ``k`` holds ``a(zeta^(5^k)) / scale``
with ``zeta = exp(i*pi/N)``.  Writing ``u_j = a_j + i*a_{j+n}`` the decode
map is ``z = V u`` with ``V[k, j] = zeta^(5^k * j)``.  The butterfly stages
below multiply a bit-reversed input, so ``S = V P`` and
``S = S_{n/2} ... S_2 S_1`` with stage ``S_h`` touching pairs ``h`` apart.

Nested encoding of slice length ``l`` places ``V_l m_c`` in slice ``c``
where ``V_l[k, j] = w^(5^k j)``, ``w = exp(i*pi/(2l))``.  That is the first
``log2 l`` stages applied to the locally bit-reversed message.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .ring import RnsPolynomial, bit_reverse_perm


class Encoding(Enum):
    SLOT = 0
    COEFF = 1
    NESTED = 2


@dataclass(frozen=True)
class EncodingTag:
    kind: Encoding
    slice_len: int = 1

    def __post_init__(self):
        if self.kind is Encoding.NESTED:
            l = self.slice_len
            if l < 1 or l & (l - 1):
                raise ValueError("slice length must be a power of two")

    def __str__(self) -> str:
        if self.kind is Encoding.NESTED:
            return f"nested({self.slice_len})"
        return self.kind.name.lower()


SLOT = EncodingTag(Encoding.SLOT)
COEFF = EncodingTag(Encoding.COEFF)


def nested(slice_len: int) -> EncodingTag:
    return EncodingTag(Encoding.NESTED, slice_len)


# twiddles --------------------------------------------------------------------


def _root_powers(order: int) -> np.ndarray:
    """exp(2*pi*i*k/order) for k < order, built from exact exponentials."""
    k = np.arange(order)
    return np.exp(2j * np.pi * k / order)


@functools.lru_cache(maxsize=None)
def rot_group(m: int, count: int) -> np.ndarray:
    """5^k mod m for k < count."""
    out = np.empty(count, dtype=np.int64)
    v = 1
    for k in range(count):
        out[k] = v
        v = v * 5 % m
    return out


@functools.lru_cache(maxsize=None)
def stage_twiddles(h: int) -> np.ndarray:
    """Twiddles of the butterfly stage with half-length h."""
    m = 8 * h
    return _root_powers(m)[rot_group(m, h)]


def apply_stage(x: np.ndarray, h: int) -> np.ndarray:
    """Butterfly stage S_h on the last axis."""
    n = x.shape[-1]
    w = stage_twiddles(h)
    y = x.reshape(x.shape[:-1] + (n // (2 * h), 2, h))
    u = y[..., 0, :]
    v = y[..., 1, :] * w
    return np.stack([u + v, u - v], axis=-2).reshape(x.shape)


def apply_stage_inv(x: np.ndarray, h: int) -> np.ndarray:
    n = x.shape[-1]
    w = stage_twiddles(h)
    y = x.reshape(x.shape[:-1] + (n // (2 * h), 2, h))
    a = y[..., 0, :]
    b = y[..., 1, :]
    return np.stack([(a + b) / 2, (a - b) / (2 * w)], axis=-2).reshape(x.shape)


def stage_halves(lo: int, hi: int) -> list[int]:
    """Half-lengths h with lo <= h < hi in application order."""
    out = []
    h = lo
    while h < hi:
        out.append(h)
        h *= 2
    return out


def apply_stages(x: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """S_{hi <- lo}: stages lo, 2lo, ..., hi/2."""
    for h in stage_halves(lo, hi):
        x = apply_stage(x, h)
    return x


def apply_stages_inv(x: np.ndarray, lo: int, hi: int) -> np.ndarray:
    for h in reversed(stage_halves(lo, hi)):
        x = apply_stage_inv(x, h)
    return x


def local_bitrev(x: np.ndarray, l: int) -> np.ndarray:
    """Block-local bit reversal P_l on the last axis."""
    n = x.shape[-1]
    perm = bit_reverse_perm(l)
    return x.reshape(x.shape[:-1] + (n // l, l))[..., perm].reshape(x.shape)


def stage_diagonals(n: int, h: int, inverse: bool = False) -> dict[int, np.ndarray]:
    """Cyclic diagonals of S_h (or its inverse) as an n x n map."""
    w = stage_twiddles(h)
    idx = np.arange(n)
    j = idx % h
    top = (idx % (2 * h)) < h
    ww = w[j]
    d0 = np.empty(n, dtype=complex)
    dp = np.zeros(n, dtype=complex)
    dm = np.zeros(n, dtype=complex)
    if not inverse:
        # top: x_i + w x_{i+h}; bottom: x_{i-h} - w x_i
        d0[top] = 1
        dp[top] = ww[top]
        d0[~top] = -ww[~top]
        dm[~top] = 1
    else:
        # top: (x_i + x_{i+h})/2; bottom: (x_{i-h} - x_i)/(2w)
        d0[top] = 0.5
        dp[top] = 0.5
        d0[~top] = -0.5 / ww[~top]
        dm[~top] = 0.5 / ww[~top]
    out: dict[int, np.ndarray] = {0: d0}
    for off, d in ((h % n, dp), ((n - h) % n, dm)):
        out[off] = out.get(off, 0) + d
    return out


class DftPlan:
    """Transform data for one ring degree."""

    def __init__(self, ring_degree: int):
        self.N = ring_degree
        self.n = ring_degree // 2
        n = self.n
        self.rot = rot_group(2 * ring_degree, n)
        # odd-root index of each slot inside a length-N FFT
        self._slot_idx = (self.rot - 1) // 2
        self._conj_idx = (2 * ring_degree - self.rot - 1) // 2
        j = np.arange(ring_degree)
        self._zeta_pow = np.exp(1j * np.pi * j / ring_degree)

    # canonical embedding ------------------------------------------------------

    def embed(self, coeffs: np.ndarray) -> np.ndarray:
        """Evaluate a real polynomial at the slot roots."""
        a = np.asarray(coeffs, dtype=np.float64)
        vals = np.fft.ifft(a * self._zeta_pow) * self.N
        return vals[self._slot_idx]

    def unembed(self, z: np.ndarray) -> np.ndarray:
        """Real coefficients whose embedding is z."""
        z = np.asarray(z, dtype=complex)
        full = np.zeros(self.N, dtype=complex)
        full[self._slot_idx] = z
        full[self._conj_idx] = np.conj(z)
        a = np.fft.fft(full) / self.N / self._zeta_pow
        return a.real

    def pack(self, coeffs: np.ndarray) -> np.ndarray:
        a = np.asarray(coeffs, dtype=np.float64)
        return a[: self.n] + 1j * a[self.n:]

    def unpack(self, u: np.ndarray) -> np.ndarray:
        return np.concatenate([u.real, u.imag])

    # factored transform ---------------------------------------------------------

    def stoc(self, x: np.ndarray, lo: int = 1, hi: int | None = None) -> np.ndarray:
        return apply_stages(np.asarray(x, dtype=complex), lo, hi or self.n)

    def ctos(self, x: np.ndarray, lo: int = 1, hi: int | None = None) -> np.ndarray:
        return apply_stages_inv(np.asarray(x, dtype=complex), lo, hi or self.n)

    def dense_stoc(self) -> np.ndarray:
        """V P as a dense matrix (small N only)."""
        n = self.n
        V = np.exp(1j * np.pi * np.outer(self.rot, np.arange(n)) / self.N)
        return V[:, bit_reverse_perm(n)]

    # nested maps (complex message domain) ----------------------------------------

    def local_dft(self, m: np.ndarray, l: int) -> np.ndarray:
        """blockdiag(V_l) m."""
        return self.stoc(local_bitrev(np.asarray(m, dtype=complex), l), 1, l)

    def local_idft(self, x: np.ndarray, l: int) -> np.ndarray:
        return local_bitrev(self.ctos(np.asarray(x, dtype=complex), 1, l), l)


@functools.lru_cache(maxsize=None)
def dft_plan(ring_degree: int) -> DftPlan:
    return DftPlan(ring_degree)


# folding for dense real packing ------------------------------------------------


def fold(m: np.ndarray, slice_len_2l: int) -> np.ndarray:
    """Real slices of length 2l -> complex slices r_j + i r_{j+l}."""
    m = np.asarray(m, dtype=np.float64)
    l = slice_len_2l // 2
    s = m.reshape(-1, 2, l)
    return (s[:, 0, :] + 1j * s[:, 1, :]).reshape(-1)


def unfold(v: np.ndarray, slice_len_2l: int) -> np.ndarray:
    l = slice_len_2l // 2
    s = np.asarray(v).reshape(-1, l)
    return np.stack([s.real, s.imag], axis=1).reshape(-1)


# message <-> polynomial ------------------------------------------------------------


def _to_poly(coeffs: np.ndarray, moduli: Sequence[int]) -> RnsPolynomial:
    return RnsPolynomial.from_float(coeffs, moduli).to_ntt()


def slot_values(msg, n: int) -> np.ndarray:
    z = np.asarray(msg, dtype=complex).reshape(-1)
    if z.size == n:
        return z
    if z.size > n or n % z.size:
        raise ValueError(f"message of length {z.size} does not tile {n} slots")
    return np.tile(z, n // z.size)


def slot_encode_coeffs(plan: DftPlan, msg, scale: float) -> np.ndarray:
    z = slot_values(msg, plan.n)
    return plan.unembed(z) * scale


def coeff_encode_coeffs(plan: DftPlan, msg, scale: float) -> np.ndarray:
    a = np.asarray(msg, dtype=np.float64).reshape(-1)
    if a.size > plan.N:
        raise ValueError("message longer than ring degree")
    out = np.zeros(plan.N)
    out[: a.size] = a
    return out * scale


def nested_slots(plan: DftPlan, msg, slice_len: int) -> np.ndarray:
    """Slot vector of a complex nested message (length n)."""
    m = slot_values(msg, plan.n)
    _check_slice(plan, slice_len)
    return plan.local_dft(m, slice_len)


def nested_real_slots(plan: DftPlan, msg, slice_len_2l: int) -> np.ndarray:
    """Slot vector of a dense real nested message (length N)."""
    if slice_len_2l % 2:
        raise ValueError("real slice length must be even")
    m = np.asarray(msg, dtype=np.float64).reshape(-1)
    if m.size != plan.N:
        raise ValueError("dense real message must have N entries")
    l = slice_len_2l // 2
    _check_slice(plan, l)
    return plan.local_dft(fold(m, slice_len_2l), l)


def nested_real_decode_slots(plan: DftPlan, x: np.ndarray, slice_len_2l: int) -> np.ndarray:
    l = slice_len_2l // 2
    return unfold(plan.local_idft(x, l), slice_len_2l)


def _check_slice(plan: DftPlan, l: int):
    if l < 1 or l & (l - 1) or l > plan.n:
        raise ValueError(f"slice length {l} invalid for {plan.n} slots")


# oracles --------------------------------------------------------------------------


def negacyclic_conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Schoolbook product modulo X^n + 1."""
    n = len(a)
    full = np.convolve(a, b)
    out = full[:n].astype(full.dtype, copy=True)
    out[: n - 1] -= full[n:]
    return out


def twisted_conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Schoolbook product modulo X^n - i."""
    n = len(a)
    full = np.convolve(np.asarray(a, complex), np.asarray(b, complex))
    out = full[:n].copy()
    out[: n - 1] += 1j * full[n:]
    return out


def reference_local_conv(m: np.ndarray, m2: np.ndarray, slice_len: int, real: bool = False) -> np.ndarray:
    """Per-slice product law: twisted (complex) or negacyclic (real slices)."""
    a = np.asarray(m)
    b = np.asarray(m2)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    op = negacyclic_conv if real else twisted_conv
    sa = a.reshape(-1, slice_len)
    sb = b.reshape(-1, slice_len)
    return np.concatenate([op(x, y) for x, y in zip(sa, sb)])
