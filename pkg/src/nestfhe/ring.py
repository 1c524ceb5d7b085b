"""RNS arithmetic over Z_Q[X]/(X^N + 1).

Polynomials are stored as ``(limbs, N)`` uint64 arrays, one row per prime.
Evaluation (NTT) form lists the values ``a(psi^(2*brv(i)+1))`` so that
Galois automorphisms become index permutations.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sympy import isprime

from . import _kernels as K

MAX_MODULUS_BITS = 61


class ParameterError(ValueError):
    pass


def bit_reverse(i: int, bits: int) -> int:
    return int(format(i, f"0{bits}b")[::-1], 2) if bits else 0


@functools.lru_cache(maxsize=None)
def bit_reverse_perm(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def find_primes(bits: int, count: int, ring_degree: int, exclude: Iterable[int] = ()) -> list[int]:
    """Largest ``count`` primes below 2**bits that are 1 mod 2N."""
    if bits > MAX_MODULUS_BITS + 1:
        raise ParameterError(f"moduli above {MAX_MODULUS_BITS + 1} bits are not supported")
    m = 2 * ring_degree
    c = ((1 << bits) - 1) // m * m + 1
    skip = set(exclude)
    out: list[int] = []
    while len(out) < count:
        if c < m:
            raise ParameterError(f"ran out of {bits}-bit primes for N={ring_degree}")
        if c not in skip and isprime(c):
            out.append(c)
        c -= m
    return out


def _shoup(w: int, q: int) -> int:
    return (w << 64) // q


def _primitive_root_2n(q: int, n: int) -> int:
    """Smallest-generator derived primitive 2N-th root of unity mod q."""
    order = q - 1
    factors = _factor(order)
    g = 2
    while True:
        if all(pow(g, order // f, q) != 1 for f in factors):
            break
        g += 1
    psi = pow(g, order // (2 * n), q)
    # canonical choice: the smallest primitive root among the odd powers
    best = psi
    cur = psi
    sq = psi * psi % q
    for _ in range(n):
        cur = cur * sq % q
        best = min(best, cur)
    return best


def _factor(m: int) -> list[int]:
    from sympy import primefactors

    return list(primefactors(m))


class ModulusTables:
    """Per-prime constants for NTT and Montgomery products."""

    def __init__(self, q: int, n: int):
        self.q = q
        self.n = n
        psi = _primitive_root_2n(q, n)
        ipsi = pow(psi, -1, q)
        bits = n.bit_length() - 1
        rev = [bit_reverse(i, bits) for i in range(n)]
        pw = [1] * n
        ipw = [1] * n
        for i in range(1, n):
            pw[i] = pw[i - 1] * psi % q
            ipw[i] = ipw[i - 1] * ipsi % q
        self.psi = psi
        self.psi_rev = np.array([pw[r] for r in rev], dtype=np.uint64)
        self.psi_rev_p = np.array([_shoup(pw[r], q) for r in rev], dtype=np.uint64)
        self.ipsi_rev = np.array([ipw[r] for r in rev], dtype=np.uint64)
        self.ipsi_rev_p = np.array([_shoup(ipw[r], q) for r in rev], dtype=np.uint64)
        ninv = pow(n, -1, q)
        self.ninv = ninv
        self.ninv_p = _shoup(ninv, q)
        self.qneg_inv = (-pow(q, -1, 1 << 64)) % (1 << 64)
        self.r2 = pow(2, 128, q)


@functools.lru_cache(maxsize=None)
def modulus_tables(q: int, n: int) -> ModulusTables:
    return ModulusTables(q, n)


class Basis:
    """Stacked tables for an ordered tuple of primes."""

    def __init__(self, moduli: tuple[int, ...], n: int):
        self.moduli = moduli
        self.n = n
        tabs = [modulus_tables(q, n) for q in moduli]
        self.q = np.array(moduli, dtype=np.uint64)
        self.q_col = self.q.reshape(-1, 1)
        self.psi = np.stack([t.psi_rev for t in tabs])
        self.psi_p = np.stack([t.psi_rev_p for t in tabs])
        self.ipsi = np.stack([t.ipsi_rev for t in tabs])
        self.ipsi_p = np.stack([t.ipsi_rev_p for t in tabs])
        self.ninv = np.array([t.ninv for t in tabs], dtype=np.uint64)
        self.ninv_p = np.array([t.ninv_p for t in tabs], dtype=np.uint64)
        self.qneg_inv = np.array([t.qneg_inv for t in tabs], dtype=np.uint64)
        self.r2 = np.array([t.r2 for t in tabs], dtype=np.uint64)
        self.product = math.prod(moduli)

    def const(self, values: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Per-row constants and their Shoup companions."""
        c = [int(v) % q for v, q in zip(values, self.moduli)]
        return (np.array(c, dtype=np.uint64),
                np.array([_shoup(x, q) for x, q in zip(c, self.moduli)], dtype=np.uint64))


@functools.lru_cache(maxsize=256)
def get_basis(moduli: tuple[int, ...], n: int) -> Basis:
    return Basis(tuple(moduli), n)


@functools.lru_cache(maxsize=256)
def _conv_tables(src: tuple[int, ...], dst: tuple[int, ...]):
    Q = math.prod(src)
    qhat = [Q // q for q in src]
    qhat_inv = [pow(h % q, -1, q) for h, q in zip(qhat, src)]
    hi = np.array(qhat_inv, dtype=np.uint64)
    hip = np.array([_shoup(v, q) for v, q in zip(qhat_inv, src)], dtype=np.uint64)
    m = np.array([[h % p for h in qhat] for p in dst], dtype=np.uint64)
    mp = np.array([[_shoup(h % p, p) for h in qhat] for p in dst], dtype=np.uint64)
    return hi, hip, np.array(src, dtype=np.uint64), m, mp, np.array(dst, dtype=np.uint64)


@functools.lru_cache(maxsize=64)
def _garner_tables(moduli: tuple[int, ...]):
    k = len(moduli)
    inv = np.zeros((k, k), dtype=np.uint64)
    invp = np.zeros((k, k), dtype=np.uint64)
    for i, qi in enumerate(moduli):
        for j in range(i):
            v = pow(moduli[j], -1, qi)
            inv[i, j] = v
            invp[i, j] = _shoup(v, qi)
    radix = [1]
    for q in moduli[:-1]:
        radix.append(radix[-1] * q)
    return inv, invp, radix


@functools.lru_cache(maxsize=None)
def _galois_perm(n: int, g: int) -> np.ndarray:
    """Index map so that (phi_g a)[i] = a[perm[i]] in evaluation form."""
    bits = n.bit_length() - 1
    rev = bit_reverse_perm(n)
    exp = 2 * rev + 1  # exponent at position i
    pos = np.empty(2 * n, dtype=np.int64)
    pos[exp] = np.arange(n)
    return pos[(exp * g) % (2 * n)]


class RnsPolynomial:
    """Element of Z_Q[X]/(X^N+1) in residue form."""

    __slots__ = ("data", "moduli", "is_ntt")

    def __init__(self, data: np.ndarray, moduli: Sequence[int], is_ntt: bool = False):
        self.data = data
        self.moduli = tuple(moduli)
        self.is_ntt = is_ntt

    # construction -------------------------------------------------------

    @classmethod
    def zeros(cls, n: int, moduli: Sequence[int], is_ntt: bool = False) -> "RnsPolynomial":
        return cls(np.zeros((len(moduli), n), dtype=np.uint64), moduli, is_ntt)

    @classmethod
    def from_ints(cls, coeffs, moduli: Sequence[int]) -> "RnsPolynomial":
        """Signed integer coefficients (any size) to residues."""
        arr = np.asarray(coeffs)
        n = arr.shape[-1]
        rows = np.empty((len(moduli), n), dtype=np.uint64)
        if arr.dtype != object and np.issubdtype(arr.dtype, np.integer):
            a = arr.astype(np.int64)
            for i, q in enumerate(moduli):
                rows[i] = np.mod(a, np.int64(q)).astype(np.uint64)
        else:
            ints = [int(v) for v in arr]
            for i, q in enumerate(moduli):
                rows[i] = np.array([v % q for v in ints], dtype=np.uint64)
        return cls(rows, moduli, False)

    @classmethod
    def from_float(cls, values: np.ndarray, moduli: Sequence[int]) -> "RnsPolynomial":
        """Round real coefficients to integers; handles values beyond int64."""
        v = np.rint(np.asarray(values, dtype=np.float64))
        if np.all(np.abs(v) < 2.0 ** 62):
            return cls.from_ints(v.astype(np.int64), moduli)
        return cls.from_ints(np.array([int(x) for x in v], dtype=object), moduli)

    # basic properties -----------------------------------------------------

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def basis(self) -> Basis:
        return get_basis(self.moduli, self.n)

    def copy(self) -> "RnsPolynomial":
        return RnsPolynomial(self.data.copy(), self.moduli, self.is_ntt)

    def _check(self, other: "RnsPolynomial"):
        if self.moduli != other.moduli:
            raise ValueError("moduli mismatch")
        if self.is_ntt != other.is_ntt:
            raise ValueError("representation mismatch")

    # domain changes -------------------------------------------------------

    def to_ntt(self) -> "RnsPolynomial":
        if self.is_ntt:
            return self
        b = self.basis
        x = self.data.copy()
        K.ntt_forward(x, b.psi, b.psi_p, b.q)
        return RnsPolynomial(x, self.moduli, True)

    def to_coeff(self) -> "RnsPolynomial":
        if not self.is_ntt:
            return self
        b = self.basis
        x = self.data.copy()
        K.ntt_inverse(x, b.ipsi, b.ipsi_p, b.q, b.ninv, b.ninv_p)
        return RnsPolynomial(x, self.moduli, False)

    # arithmetic -------------------------------------------------------------

    def __add__(self, other: "RnsPolynomial") -> "RnsPolynomial":
        self._check(other)
        q = self.basis.q_col
        s = self.data + other.data
        s -= np.where(s >= q, q, np.uint64(0))
        return RnsPolynomial(s, self.moduli, self.is_ntt)

    def __sub__(self, other: "RnsPolynomial") -> "RnsPolynomial":
        self._check(other)
        q = self.basis.q_col
        s = self.data + (q - other.data)
        s -= np.where(s >= q, q, np.uint64(0))
        return RnsPolynomial(s, self.moduli, self.is_ntt)

    def __neg__(self) -> "RnsPolynomial":
        q = self.basis.q_col
        s = np.where(self.data == 0, np.uint64(0), q - self.data)
        return RnsPolynomial(s, self.moduli, self.is_ntt)

    def __mul__(self, other: "RnsPolynomial") -> "RnsPolynomial":
        if self.moduli != other.moduli:
            raise ValueError("moduli mismatch")
        a = self.to_ntt()
        c = other.to_ntt()
        b = self.basis
        out = RnsPolynomial(K.mul_rows(a.data, c.data, b.q, b.qneg_inv, b.r2), self.moduli, True)
        return out if self.is_ntt else out.to_coeff()

    def mul_scalar(self, c) -> "RnsPolynomial":
        """Multiply by an integer (python int or per-limb sequence)."""
        b = self.basis
        vals = c if isinstance(c, (list, tuple)) else [int(c)] * len(self.moduli)
        cc, cp = b.const(vals)
        return RnsPolynomial(K.scalar_rows(self.data, cc, cp, b.q), self.moduli, self.is_ntt)

    def mul_monomial(self, k: int) -> "RnsPolynomial":
        """Multiply by X^k (negacyclic), in either domain."""
        n = self.n
        k %= 2 * n
        if self.is_ntt:
            return self * monomial(n, k, self.moduli).to_ntt()
        sign_flip = k >= n
        k %= n
        x = np.roll(self.data, k, axis=1)
        neg = np.zeros(n, dtype=bool)
        neg[:k] = True
        if sign_flip:
            neg = ~neg
        q = self.basis.q_col
        x = np.where(neg & (x != 0), q - x, x)
        return RnsPolynomial(x, self.moduli, False)

    def automorphism(self, g: int) -> "RnsPolynomial":
        """a(X) -> a(X^g) for odd g."""
        n = self.n
        g %= 2 * n
        if g % 2 == 0:
            raise ValueError("Galois element must be odd")
        if self.is_ntt:
            return RnsPolynomial(self.data[:, _galois_perm(n, g)], self.moduli, True)
        idx = (np.arange(n) * g) % (2 * n)
        tgt = idx % n
        neg = idx >= n
        q = self.basis.q_col
        vals = np.where(neg & (self.data != 0), q - self.data, self.data)
        out = np.empty_like(self.data)
        out[:, tgt] = vals
        return RnsPolynomial(out, self.moduli, False)

    # basis manipulation -------------------------------------------------------

    def drop_last(self, count: int = 1) -> "RnsPolynomial":
        return RnsPolynomial(self.data[: len(self.moduli) - count].copy(),
                             self.moduli[: len(self.moduli) - count], self.is_ntt)

    def keep(self, moduli: Sequence[int]) -> "RnsPolynomial":
        pos = {q: i for i, q in enumerate(self.moduli)}
        idx = [pos[q] for q in moduli]
        return RnsPolynomial(self.data[idx].copy(), tuple(moduli), self.is_ntt)

    def rescale_last(self) -> "RnsPolynomial":
        """Round-divide by the last prime and drop it."""
        c = self.to_coeff()
        ql = c.moduli[-1]
        last = c.data[-1].astype(np.int64)
        last = np.where(last > ql // 2, last - ql, last)
        rest = c.moduli[:-1]
        sub = RnsPolynomial.from_ints(last, rest)
        diff = RnsPolynomial(c.data[:-1], rest, False) - sub
        out = diff.mul_scalar([pow(ql, -1, q) for q in rest])
        return out.to_ntt() if self.is_ntt else out

    def to_basis(self, dst: Sequence[int]) -> "RnsPolynomial":
        """Fast base conversion (result is x + u*Q for small u >= 0)."""
        c = self.to_coeff()
        t = _conv_tables(c.moduli, tuple(dst))
        return RnsPolynomial(K.base_convert(c.data, *t), tuple(dst), False)

    # reconstruction ------------------------------------------------------------

    def to_float(self) -> np.ndarray:
        """Centred CRT value of every coefficient as float64."""
        c = self.to_coeff()
        inv, invp, radix = _garner_tables(c.moduli)
        d = K.garner_balanced(c.data, c.basis.q, inv, invp)
        out = np.zeros(c.n, dtype=np.float64)
        for i in range(len(c.moduli) - 1, -1, -1):
            out += d[i].astype(np.float64) * float(radix[i])
        return out

    def to_ints(self) -> list[int]:
        """Exact centred CRT value of every coefficient."""
        c = self.to_coeff()
        Q = math.prod(c.moduli)
        acc = [0] * c.n
        for row, q in zip(c.data, c.moduli):
            m = Q // q
            f = m * pow(m % q, -1, q)
            r = row.tolist()
            for j in range(c.n):
                acc[j] += r[j] * f
        half = Q // 2
        out = []
        for v in acc:
            v %= Q
            out.append(v - Q if v > half else v)
        return out

    def __repr__(self) -> str:
        return f"RnsPolynomial(N={self.n}, limbs={len(self.moduli)}, ntt={self.is_ntt})"


def monomial(n: int, k: int, moduli: Sequence[int]) -> RnsPolynomial:
    k %= 2 * n
    v = np.zeros(n, dtype=np.int64)
    v[k % n] = -1 if k >= n else 1
    return RnsPolynomial.from_ints(v, moduli)


# samplers -----------------------------------------------------------------


def make_rng(seed: int | None) -> np.random.Generator:
    """Counter-based generator; ``None`` draws the key from OS entropy."""
    return np.random.Generator(np.random.Philox(seed))


def sample_ternary_hw(rng: np.random.Generator, n: int, h: int) -> np.ndarray:
    v = np.zeros(n, dtype=np.int64)
    idx = rng.choice(n, size=h, replace=False)
    v[idx] = rng.choice(np.array([-1, 1]), size=h)
    return v


def sample_zo(rng: np.random.Generator, n: int, rho: float = 0.5) -> np.ndarray:
    u = rng.random(n)
    return np.where(u < rho / 2, -1, np.where(u < rho, 1, 0)).astype(np.int64)


@functools.lru_cache(maxsize=8)
def _gauss_table(sigma: float):
    bound = int(math.ceil(6 * sigma))
    xs = np.arange(-bound, bound + 1)
    p = np.exp(-(xs.astype(float) ** 2) / (2 * sigma * sigma))
    return xs, p / p.sum()


def sample_gaussian(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    xs, p = _gauss_table(float(sigma))
    return rng.choice(xs, size=n, p=p).astype(np.int64)


def sample_uniform(rng: np.random.Generator, n: int, moduli: Sequence[int]) -> RnsPolynomial:
    rows = np.empty((len(moduli), n), dtype=np.uint64)
    for i, q in enumerate(moduli):
        rows[i] = rng.integers(0, q, size=n, dtype=np.uint64)
    return RnsPolynomial(rows, moduli, True)


# parameters -----------------------------------------------------------------


@dataclass(frozen=True)
class RingParams:
    """Ring degree, RNS chain and noise parameters.

    ``moduli`` is q_0..q_L (q_0 is the base prime, the rest are rescaling
    primes); ``aux_moduli`` are the key-switching primes p_0..p_{K-1}.
    """

    ring_degree: int
    moduli: tuple[int, ...]
    aux_moduli: tuple[int, ...]
    scale: float
    hamming_weight: int = 64
    sigma: float = 3.2
    name: str = "custom"
    secure: bool = False
    dnum_hint: int | None = field(default=None, compare=False)

    def __post_init__(self):
        n = self.ring_degree
        if n < 8 or n & (n - 1):
            raise ParameterError("ring degree must be a power of two >= 8")
        allq = self.moduli + self.aux_moduli
        if len(set(allq)) != len(allq):
            raise ParameterError("moduli must be distinct")
        for q in allq:
            if q % (2 * n) != 1:
                raise ParameterError(f"modulus {q} is not 1 mod 2N")
            if q.bit_length() > MAX_MODULUS_BITS + 1:
                raise ParameterError(f"modulus {q} exceeds {MAX_MODULUS_BITS + 1} bits")
        if not self.aux_moduli:
            raise ParameterError("at least one auxiliary prime is required")
        if math.prod(self.aux_moduli) < max(self.digit_products()):
            raise ParameterError("auxiliary modulus smaller than a decomposition digit")
        if not 0 < self.hamming_weight <= n:
            raise ParameterError("bad Hamming weight")

    @property
    def slots(self) -> int:
        return self.ring_degree // 2

    @property
    def max_level(self) -> int:
        return len(self.moduli) - 1

    @property
    def alpha(self) -> int:
        return len(self.aux_moduli)

    @property
    def dnum(self) -> int:
        return -(-len(self.moduli) // self.alpha)

    def digits(self, level: int | None = None) -> list[tuple[int, ...]]:
        """Decomposition digits of the chain up to ``level``."""
        lv = self.max_level if level is None else level
        qs = self.moduli[: lv + 1]
        a = self.alpha
        return [qs[i: i + a] for i in range(0, len(qs), a)]

    def digit_products(self) -> list[int]:
        return [math.prod(d) for d in self.digits()]

    def moduli_at(self, level: int) -> tuple[int, ...]:
        if not 0 <= level <= self.max_level:
            raise ParameterError(f"level {level} out of range")
        return self.moduli[: level + 1]

    @property
    def log_pq(self) -> float:
        return sum(math.log2(q) for q in self.moduli + self.aux_moduli)

    @classmethod
    def from_bits(cls, ring_degree: int, base_bits: int, scale_bits: int, levels: int,
                  aux_bits: int, aux_count: int, **kw) -> "RingParams":
        n = ring_degree
        base = find_primes(base_bits, 1, n)
        used = set(base)
        if base_bits == scale_bits:
            sc = find_primes(scale_bits, levels + 1, n)[1:]
        else:
            sc = find_primes(scale_bits, levels, n, exclude=used)
        used |= set(sc)
        aux = find_primes(aux_bits, aux_count, n, exclude=used)
        return cls(ring_degree=n, moduli=tuple(base + sc), aux_moduli=tuple(aux),
                   scale=float(2 ** scale_bits), **kw)

    @classmethod
    def from_bit_list(cls, ring_degree: int, moduli_bits: Sequence[int], aux_bits: Sequence[int],
                      scale_bits: int, **kw) -> "RingParams":
        n = ring_degree
        used: set[int] = set()
        chosen: dict[int, list[int]] = {}

        def take(b: int) -> int:
            lst = chosen.setdefault(b, [])
            p = find_primes(b, len(lst) + 1, n, exclude=used)[-1]
            lst.append(p)
            used.add(p)
            return p

        qs = tuple(take(b) for b in moduli_bits)
        ps = tuple(take(b) for b in aux_bits)
        return cls(ring_degree=n, moduli=qs, aux_moduli=ps, scale=float(2 ** scale_bits), **kw)


_PRESET_SPECS = {
    # desk-scale default: q0 ~ 2^60, nine 30-bit rescaling primes
    "desk": dict(ring_degree=1 << 13, bits=[60] + [30] * 9, aux=[61] * 3, scale_bits=30,
                 hamming_weight=64, secure=False),
    # deeper chain for polynomial modular reduction in bootstrapping
    "desk-boot": dict(ring_degree=1 << 13, bits=[60] + [40] * 20, aux=[61] * 4, scale_bits=40,
                      hamming_weight=64, secure=False),
    # small ring for tests
    "toy": dict(ring_degree=1 << 8, bits=[60] + [30] * 9, aux=[61] * 3, scale_bits=30,
                hamming_weight=32, secure=False),
    # 128-bit-class sets at N=2^16; only the modulus shape is reproduced
    "set1": dict(ring_degree=1 << 16, bits=[60] + [42] * 24, aux=[61] * 5, scale_bits=42,
                 hamming_weight=192, secure=True),
    "set2": dict(ring_degree=1 << 16, bits=[60] + [42] * 19, aux=[61] * 5, scale_bits=42,
                 hamming_weight=192, secure=True),
}

PRESET_NAMES = tuple(_PRESET_SPECS)


def describe_preset(name: str) -> dict:
    spec = _PRESET_SPECS[name.lower()]
    levels = len(spec["bits"]) - 1
    alpha = len(spec["aux"])
    return dict(name=name.lower(), ring_degree=spec["ring_degree"], levels=levels,
                dnum=-(-(levels + 1) // alpha), scale_bits=spec["scale_bits"],
                hamming_weight=spec["hamming_weight"], log_pq=sum(spec["bits"]) + sum(spec["aux"]),
                secure=spec["secure"])


@functools.lru_cache(maxsize=None)
def preset(name: str, ring_degree: int | None = None) -> RingParams:
    """Named parameter set, optionally at a different ring degree."""
    key = name.lower()
    if key not in _PRESET_SPECS:
        raise ParameterError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    s = _PRESET_SPECS[key]
    n = ring_degree or s["ring_degree"]
    secure = s["secure"] and n == s["ring_degree"]
    return RingParams.from_bit_list(n, s["bits"], s["aux"], s["scale_bits"],
                                    hamming_weight=min(s["hamming_weight"], n // 2),
                                    name=key, secure=secure)


def _parse_bits(text: str) -> list[int]:
    out: list[int] = []
    for tok in text.replace(" ", "").split(","):
        if not tok:
            continue
        if "x" in tok:
            b, c = tok.split("x")
            out += [int(b)] * int(c)
        else:
            out.append(int(tok))
    return out


def params_from_config(text: str) -> RingParams:
    """Parse a ``key = value`` parameter file.

    Keys: ring_degree, moduli_bits (``60,30x9;61x3``: chain then auxiliary
    primes), delta_log2, dnum, hamming_weight, sigma.
    """
    kv: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"malformed line: {raw!r}")
        k, v = line.split("=", 1)
        kv[k.strip().lower()] = v.strip()
    known = {"ring_degree", "moduli_bits", "delta_log2", "dnum", "hamming_weight", "sigma", "name"}
    extra = set(kv) - known
    if extra:
        raise ParameterError(f"unknown keys: {sorted(extra)}")
    try:
        n = int(kv["ring_degree"])
        chain, _, aux = kv["moduli_bits"].partition(";")
        qbits = _parse_bits(chain)
        pbits = _parse_bits(aux) if aux else None
        scale_bits = int(kv.get("delta_log2", qbits[1] if len(qbits) > 1 else qbits[0]))
    except KeyError as e:
        raise ParameterError(f"missing key {e.args[0]}") from None
    if pbits is None:
        dnum = int(kv.get("dnum", 1))
        alpha = -(-len(qbits) // dnum)
        pbits = [61] * alpha
    elif "dnum" in kv and -(-len(qbits) // len(pbits)) != int(kv["dnum"]):
        raise ParameterError("dnum inconsistent with the number of auxiliary primes")
    return RingParams.from_bit_list(
        n, qbits, pbits, scale_bits,
        hamming_weight=int(kv.get("hamming_weight", 64)),
        sigma=float(kv.get("sigma", 3.2)), name=kv.get("name", "custom"))
