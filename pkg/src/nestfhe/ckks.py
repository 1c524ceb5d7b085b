"""RNS-CKKS keys, ciphertexts and homomorphic operations.

Decryption is ``b - a*s``.  Key switching uses ``dnum`` digits of ``alpha``
limbs each and one auxiliary basis ``P`` (hybrid key switching).  Switching
key parts ``a`` are pseudorandom and regenerated from a stored seed.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from . import _kernels as K
from .encoding import (COEFF, SLOT, DftPlan, Encoding, EncodingTag, coeff_encode_coeffs,
                       dft_plan, nested, nested_real_decode_slots, nested_real_slots,
                       nested_slots, slot_encode_coeffs)
from .ring import (RingParams, RnsPolynomial, get_basis, make_rng, sample_gaussian,
                   sample_ternary_hw, sample_zo)


class CkksError(Exception):
    pass


class LevelError(CkksError):
    pass


class ScaleError(CkksError):
    pass


class TagError(CkksError):
    pass


class MissingKeyError(CkksError, KeyError):
    pass


SCALE_RTOL = 1e-9


# instrumentation -------------------------------------------------------------


@dataclass
class OpCounter:
    hmult: int = 0
    pmult: int = 0
    hrot: int = 0
    hadd: int = 0
    padd: int = 0
    cadd: int = 0
    cmult: int = 0
    rescale: int = 0
    keyswitch: int = 0
    moddrop: int = 0
    modraise: int = 0
    levels_consumed: int = 0
    ciphertexts_bootstrapped: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, name: str, k: int = 1):
        with self._lock:
            setattr(self, name, getattr(self, name) + k)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {f.name: getattr(self, f.name) for f in fields(self) if not f.name.startswith("_")}

    def since(self, before: dict[str, int]) -> dict[str, int]:
        now = self.snapshot()
        return {k: now[k] - before.get(k, 0) for k in now}

    def reset(self):
        with self._lock:
            for f in fields(self):
                if not f.name.startswith("_"):
                    setattr(self, f.name, 0)


# data types ----------------------------------------------------------------------


@dataclass
class Plaintext:
    poly: RnsPolynomial
    level: int
    scale: float
    tag: EncodingTag = SLOT


@dataclass
class Ciphertext:
    b: RnsPolynomial
    a: RnsPolynomial
    level: int
    scale: float
    tag: EncodingTag = SLOT

    @property
    def ring_degree(self) -> int:
        return self.b.n

    @property
    def slot_count(self) -> int:
        return self.b.n // 2

    def retag(self, tag: EncodingTag) -> "Ciphertext":
        """Same bytes, different interpretation."""
        return Ciphertext(self.b, self.a, self.level, self.scale, tag)

    def copy(self) -> "Ciphertext":
        return Ciphertext(self.b.copy(), self.a.copy(), self.level, self.scale, self.tag)


@dataclass
class SecretKey:
    coeffs: np.ndarray  # int64 ternary vector
    poly: RnsPolynomial  # over chain + auxiliary primes, NTT

    @property
    def hamming_weight(self) -> int:
        return int(np.count_nonzero(self.coeffs))


@dataclass
class PublicKey:
    b: RnsPolynomial
    a: RnsPolynomial


@dataclass
class SwitchKey:
    """Digits (b_i, a_i) over the chain plus P; ``a_i`` derived from ``seed``."""

    b: list[np.ndarray]
    seed: int
    moduli: tuple[int, ...]
    source: str

    def a_rows(self, digit: int, rows: Sequence[int], n: int | None = None) -> np.ndarray:
        out = np.empty((len(rows), n or self.b[0].shape[1]), dtype=np.uint64)
        for t, r in enumerate(rows):
            g = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, digit, r])))
            out[t] = g.integers(0, self.moduli[r], size=out.shape[1], dtype=np.uint64)
        return out

    @property
    def dnum(self) -> int:
        return len(self.b)


@dataclass
class EvalKeys:
    relin: SwitchKey | None = None
    galois: dict[int, SwitchKey] = field(default_factory=dict)

    def galois_key(self, g: int) -> SwitchKey:
        try:
            return self.galois[g]
        except KeyError:
            raise MissingKeyError(f"no switching key for Galois element {g}") from None

    def nbytes(self) -> int:
        ks = list(self.galois.values()) + ([self.relin] if self.relin else [])
        return sum(sum(b.nbytes for b in k.b) for k in ks)


def galois_element(rotation: int, ring_degree: int) -> int:
    """Galois element of a left slot rotation by ``rotation``."""
    n = ring_degree // 2
    return pow(5, rotation % n, 2 * ring_degree)


def conjugation_element(ring_degree: int) -> int:
    return 2 * ring_degree - 1


# key generation -------------------------------------------------------------------


class KeyGenerator:
    """Owns the secret key; produces public and evaluation keys."""

    def __init__(self, params: RingParams, seed: int | None = 0):
        self.params = params
        self.rng = make_rng(seed)
        self._seed_src = make_rng(None if seed is None else seed + 0x5EED)
        n = params.ring_degree
        s = sample_ternary_hw(self.rng, n, params.hamming_weight)
        full = params.moduli + params.aux_moduli
        self.secret_key = SecretKey(s, RnsPolynomial.from_ints(s, full).to_ntt())

    @property
    def _full(self) -> tuple[int, ...]:
        return self.params.moduli + self.params.aux_moduli

    def _error(self, moduli) -> RnsPolynomial:
        e = sample_gaussian(self.rng, self.params.ring_degree, self.params.sigma)
        return RnsPolynomial.from_ints(e, moduli).to_ntt()

    def public_key(self) -> PublicKey:
        qs = self.params.moduli
        a = _uniform(self.rng, self.params.ring_degree, qs)
        s = self.secret_key.poly.keep(qs)
        b = a * s + self._error(qs)
        return PublicKey(b, a)

    def switch_key(self, target: RnsPolynomial, source: str) -> SwitchKey:
        """Key taking a ``target``-encrypted component to the canonical secret."""
        p = self.params
        full = self._full
        P = math.prod(p.aux_moduli)
        seed = int(self._seed_src.integers(0, 2 ** 63))
        s = self.secret_key.poly
        bs = []
        dummy = SwitchKey([np.zeros((1, 1), dtype=np.uint64)], seed, full, source)
        rows = list(range(len(full)))
        for i, digit in enumerate(p.digits()):
            a = RnsPolynomial(dummy.a_rows(i, rows, p.ring_degree), full, True)
            gadget = [(P % q) if q in digit else 0 for q in p.moduli] + [0] * len(p.aux_moduli)
            b = a * s + self._error(full) + target.mul_scalar(gadget)
            bs.append(b.data)
        return SwitchKey(bs, seed, full, source)

    def relin_key(self) -> SwitchKey:
        s = self.secret_key.poly
        return self.switch_key(s * s, "s^2")

    def galois_key(self, g: int) -> SwitchKey:
        s = self.secret_key.poly
        return self.switch_key(s.automorphism(g), f"phi_{g}(s)")

    def eval_keys(self, rotations: Iterable[int] = (), conjugation: bool = False,
                  galois: Iterable[int] = (), relin: bool = True) -> EvalKeys:
        n = self.params.ring_degree
        gs = {galois_element(r, n) for r in rotations if r % (n // 2)}
        gs |= {g % (2 * n) for g in galois}
        if conjugation:
            gs.add(conjugation_element(n))
        keys = EvalKeys(self.relin_key() if relin else None)
        for g in sorted(gs):
            keys.galois[g] = self.galois_key(g)
        return keys

    def add_rotations(self, keys: EvalKeys, rotations: Iterable[int] = (), galois: Iterable[int] = ()):
        n = self.params.ring_degree
        gs = {galois_element(r, n) for r in rotations if r % (n // 2)} | {g % (2 * n) for g in galois}
        for g in sorted(gs - set(keys.galois)):
            keys.galois[g] = self.galois_key(g)


def _uniform(rng, n, moduli) -> RnsPolynomial:
    rows = np.empty((len(moduli), n), dtype=np.uint64)
    for i, q in enumerate(moduli):
        rows[i] = rng.integers(0, q, size=n, dtype=np.uint64)
    return RnsPolynomial(rows, moduli, True)


# encoder ------------------------------------------------------------------------------


class Encoder:
    """Message <-> plaintext for every encoding tag."""

    def __init__(self, params: RingParams):
        self.params = params
        self.plan: DftPlan = dft_plan(params.ring_degree)

    def _poly(self, coeffs: np.ndarray, level: int) -> RnsPolynomial:
        bits = sum(math.log2(q) for q in self.params.moduli_at(level)) - 1
        peak = float(np.max(np.abs(coeffs), initial=0.0))
        if peak > 0 and math.log2(peak) >= bits:
            raise CkksError("scaled message overflows the modulus")
        return RnsPolynomial.from_float(coeffs, self.params.moduli_at(level)).to_ntt()

    def _scale(self, level: int, scale: float | None) -> float:
        return self.params.scale if scale is None else float(scale)

    def encode_slots(self, msg, level: int | None = None, scale: float | None = None) -> Plaintext:
        lv = self.params.max_level if level is None else level
        sc = self._scale(lv, scale)
        return Plaintext(self._poly(slot_encode_coeffs(self.plan, msg, sc), lv), lv, sc, SLOT)

    def encode_coeffs(self, msg, level: int | None = None, scale: float | None = None) -> Plaintext:
        lv = self.params.max_level if level is None else level
        sc = self._scale(lv, scale)
        return Plaintext(self._poly(coeff_encode_coeffs(self.plan, msg, sc), lv), lv, sc, COEFF)

    def encode_nested(self, msg, slice_len: int, level: int | None = None,
                      scale: float | None = None) -> Plaintext:
        """Complex message of n entries in slices of ``slice_len``."""
        lv = self.params.max_level if level is None else level
        sc = self._scale(lv, scale)
        x = nested_slots(self.plan, msg, slice_len)
        return Plaintext(self._poly(self.plan.unembed(x) * sc, lv), lv, sc, nested(slice_len))

    def encode_nested_real(self, msg, real_slice_len: int, level: int | None = None,
                           scale: float | None = None) -> Plaintext:
        """Dense real message of N entries in slices of ``real_slice_len``."""
        lv = self.params.max_level if level is None else level
        sc = self._scale(lv, scale)
        x = nested_real_slots(self.plan, msg, real_slice_len)
        return Plaintext(self._poly(self.plan.unembed(x) * sc, lv), lv, sc, nested(real_slice_len // 2))

    def encode_slot_vector(self, x, tag: EncodingTag, level: int, scale: float) -> Plaintext:
        """Plaintext with raw slot vector ``x`` and an arbitrary tag."""
        return Plaintext(self._poly(self.plan.unembed(np.asarray(x, complex)) * scale, level),
                         level, scale, tag)

    # decoding -------------------------------------------------------------------------

    def coefficients(self, pt: Plaintext) -> np.ndarray:
        return pt.poly.to_float() / pt.scale

    def slots(self, pt: Plaintext) -> np.ndarray:
        return self.plan.embed(self.coefficients(pt))

    def decode(self, pt: Plaintext, real: bool = True) -> np.ndarray:
        """Message under the plaintext's tag (nested: dense real by default)."""
        if pt.tag.kind is Encoding.COEFF:
            return self.coefficients(pt)
        x = self.slots(pt)
        if pt.tag.kind is Encoding.SLOT:
            return x
        l = pt.tag.slice_len
        if real:
            return nested_real_decode_slots(self.plan, x, 2 * l)
        return self.plan.local_idft(x, l)


# evaluator ---------------------------------------------------------------------------


class Evaluator:
    """Homomorphic operations; holds only public material."""

    def __init__(self, params: RingParams, keys: EvalKeys | None = None,
                 public_key: PublicKey | None = None, counter: OpCounter | None = None,
                 seed: int | None = 1):
        self.params = params
        self.keys = keys or EvalKeys()
        self.public_key = public_key
        self.counter = counter or OpCounter()
        self.encoder = Encoder(params)
        self.rng = make_rng(seed)

    # helpers -----------------------------------------------------------------------

    def _moduli(self, level: int) -> tuple[int, ...]:
        return self.params.moduli_at(level)

    @staticmethod
    def _same_level(x, y):
        if x.level != y.level:
            raise LevelError(f"level mismatch: {x.level} vs {y.level}")

    @staticmethod
    def _same_scale(x, y):
        if not math.isclose(x.scale, y.scale, rel_tol=SCALE_RTOL):
            raise ScaleError(f"scale mismatch: {x.scale:.6g} vs {y.scale:.6g}")

    @staticmethod
    def _same_tag(x, y):
        if x.tag != y.tag:
            raise TagError(f"encoding tag mismatch: {x.tag} vs {y.tag}")

    # encryption -----------------------------------------------------------------------

    def encrypt(self, pt: Plaintext) -> Ciphertext:
        if self.public_key is None:
            raise MissingKeyError("no public key")
        qs = self._moduli(pt.level)
        n = self.params.ring_degree
        v = RnsPolynomial.from_ints(sample_zo(self.rng, n), qs).to_ntt()
        e0 = RnsPolynomial.from_ints(sample_gaussian(self.rng, n, self.params.sigma), qs).to_ntt()
        e1 = RnsPolynomial.from_ints(sample_gaussian(self.rng, n, self.params.sigma), qs).to_ntt()
        pb = self.public_key.b.keep(qs)
        pa = self.public_key.a.keep(qs)
        return Ciphertext(v * pb + e0 + pt.poly, v * pa + e1, pt.level, pt.scale, pt.tag)

    # additive family -----------------------------------------------------------------

    def add(self, x: Ciphertext, y: Ciphertext) -> Ciphertext:
        self._same_level(x, y)
        self._same_scale(x, y)
        self._same_tag(x, y)
        self.counter.bump("hadd")
        return Ciphertext(x.b + y.b, x.a + y.a, x.level, x.scale, x.tag)

    def sub(self, x: Ciphertext, y: Ciphertext) -> Ciphertext:
        self._same_level(x, y)
        self._same_scale(x, y)
        self._same_tag(x, y)
        self.counter.bump("hadd")
        return Ciphertext(x.b - y.b, x.a - y.a, x.level, x.scale, x.tag)

    def negate(self, x: Ciphertext) -> Ciphertext:
        return Ciphertext(-x.b, -x.a, x.level, x.scale, x.tag)

    def add_plain(self, x: Ciphertext, pt: Plaintext) -> Ciphertext:
        self._same_level(x, pt)
        self._same_scale(x, pt)
        self._same_tag(x, pt)
        self.counter.bump("padd")
        return Ciphertext(x.b + pt.poly, x.a.copy(), x.level, x.scale, x.tag)

    def add_const(self, x: Ciphertext, c: complex) -> Ciphertext:
        """Add the constant polynomial c*scale (every slot gets c under the slot view)."""
        n = self.params.ring_degree
        v = np.zeros(n)
        v[0] = complex(c).real * x.scale
        v[n // 2] = complex(c).imag * x.scale
        p = RnsPolynomial.from_float(v, x.b.moduli).to_ntt()
        self.counter.bump("cadd")
        return Ciphertext(x.b + p, x.a.copy(), x.level, x.scale, x.tag)

    # multiplicative family ---------------------------------------------------------------

    def mul_plain(self, x: Ciphertext, pt: Plaintext) -> Ciphertext:
        if x.level == 0:
            raise LevelError("pmult at level 0 leaves no room to rescale")
        self._same_level(x, pt)
        self._same_tag(x, pt)
        self.counter.bump("pmult")
        return Ciphertext(x.b * pt.poly, x.a * pt.poly, x.level, x.scale * pt.scale, x.tag)

    def mul_const(self, x: Ciphertext, c: float, scale: float | None = None,
                  exact: bool = False) -> Ciphertext:
        """Multiply by a real constant encoded as round(c*scale); rescale separately.

        With ``exact`` the scale absorbs the rounding (scale * k / c), so the
        product carries c exactly at the price of a non-canonical scale.
        """
        if x.level == 0:
            raise LevelError("cmult at level 0 leaves no room to rescale")
        sc = float(self.params.moduli[x.level]) if scale is None else float(scale)
        k = int(round(c * sc))
        if k == 0:
            raise ScaleError("constant rounds to zero at this scale")
        self.counter.bump("cmult")
        new_scale = x.scale * k / c if exact else x.scale * sc
        return Ciphertext(x.b.mul_scalar(k), x.a.mul_scalar(k), x.level, new_scale, x.tag)

    def mul_integer(self, x: Ciphertext, k: int, scale_factor: float | None = None) -> Ciphertext:
        """Exact integer multiple; the scale absorbs ``scale_factor`` (default k)."""
        self.counter.bump("cmult")
        f = float(k) if scale_factor is None else float(scale_factor)
        return Ciphertext(x.b.mul_scalar(int(k)), x.a.mul_scalar(int(k)), x.level, x.scale * f, x.tag)

    def mul_monomial(self, x: Ciphertext, k: int) -> Ciphertext:
        """Multiply by X^k; X^(N/2) multiplies every slot by i."""
        self.counter.bump("cmult")
        return Ciphertext(x.b.mul_monomial(k), x.a.mul_monomial(k), x.level, x.scale, x.tag)

    def mul(self, x: Ciphertext, y: Ciphertext) -> Ciphertext:
        if self.keys.relin is None:
            raise MissingKeyError("no relinearization key")
        if x.level == 0 or y.level == 0:
            raise LevelError("hmult at level 0 leaves no room to rescale")
        self._same_level(x, y)
        self._same_tag(x, y)
        self.counter.bump("hmult")
        b = x.b * y.b
        a = x.a * y.b + y.a * x.b
        d0, d1 = self._key_switch(x.a * y.a, self.keys.relin)
        return Ciphertext(b + d0, a + d1, x.level, x.scale * y.scale, x.tag)

    def square(self, x: Ciphertext) -> Ciphertext:
        return self.mul(x, x)

    # level management -------------------------------------------------------------------

    def rescale(self, x: Ciphertext) -> Ciphertext:
        if x.level == 0:
            raise LevelError("cannot rescale at level 0")
        q = self.params.moduli[x.level]
        self.counter.bump("rescale")
        self.counter.bump("levels_consumed")
        return Ciphertext(x.b.rescale_last(), x.a.rescale_last(), x.level - 1, x.scale / q, x.tag)

    def drop_level(self, x: Ciphertext, level: int) -> Ciphertext:
        if level > x.level:
            raise LevelError("cannot drop to a higher level")
        if level == x.level:
            return x
        qs = self._moduli(level)
        self.counter.bump("moddrop")
        return Ciphertext(x.b.keep(qs), x.a.keep(qs), level, x.scale, x.tag)

    def mod_raise(self, x: Ciphertext, level: int | None = None) -> Ciphertext:
        """Lift a level-0 ciphertext to ``level``; plaintext gains q0*I."""
        tgt = self.params.max_level if level is None else level
        if x.level != 0:
            raise LevelError("mod_raise expects a level-0 ciphertext")
        if not 0 < tgt <= self.params.max_level:
            raise LevelError("target level out of range")
        qs = self._moduli(tgt)
        q0 = self.params.moduli[0]

        def lift(p: RnsPolynomial) -> RnsPolynomial:
            c = p.to_coeff().data[0].astype(np.int64)
            c = np.where(c > q0 // 2, c - q0, c)
            return RnsPolynomial.from_ints(c, qs).to_ntt()

        self.counter.bump("modraise")
        return Ciphertext(lift(x.b), lift(x.a), tgt, x.scale, x.tag)

    # automorphisms -----------------------------------------------------------------------

    def rotate(self, x: Ciphertext, r: int) -> Ciphertext:
        """Left-rotate slots by r."""
        if x.tag.kind is Encoding.COEFF:
            raise TagError("rotation is not defined for coefficient encoding")
        n = self.params.slots
        if r % n == 0:
            return x
        self.counter.bump("hrot")
        return self._apply_galois(x, galois_element(r, self.params.ring_degree))

    def conjugate(self, x: Ciphertext) -> Ciphertext:
        self.counter.bump("hrot")
        return self._apply_galois(x, conjugation_element(self.params.ring_degree))

    def apply_galois(self, x: Ciphertext, g: int) -> Ciphertext:
        """General automorphism X -> X^g (any tag); counted as a rotation."""
        if g % (2 * self.params.ring_degree) == 1:
            return x
        self.counter.bump("hrot")
        return self._apply_galois(x, g)

    def _apply_galois(self, x: Ciphertext, g: int) -> Ciphertext:
        key = self.keys.galois_key(g % (2 * self.params.ring_degree))
        b = x.b.automorphism(g)
        a = x.a.automorphism(g)
        d0, d1 = self._key_switch(a, key)
        return Ciphertext(b - d0, -d1, x.level, x.scale, x.tag)

    def key_switch(self, x: Ciphertext, key: SwitchKey) -> Ciphertext:
        """Re-encrypt x (decryptable under the key's source) under the canonical secret."""
        self.counter.bump("keyswitch")
        d0, d1 = self._key_switch(x.a, key)
        return Ciphertext(x.b - d0, -d1, x.level, x.scale, x.tag)

    def _key_switch(self, d: RnsPolynomial, key: SwitchKey) -> tuple[RnsPolynomial, RnsPolynomial]:
        p = self.params
        qs = d.moduli
        level = len(qs) - 1
        ps = p.aux_moduli
        ext = qs + ps
        n = p.ring_degree
        rows = list(range(level + 1)) + list(range(len(p.moduli), len(p.moduli) + len(ps)))
        eb = get_basis(ext, n)
        acc_b = np.zeros((len(ext), n), dtype=np.uint64)
        acc_a = np.zeros((len(ext), n), dtype=np.uint64)
        dc = d.to_coeff()
        start = 0
        for i, digit in enumerate(p.digits(level)):
            idx = list(range(start, start + len(digit)))
            start += len(digit)
            others = [j for j in range(len(ext)) if j not in idx]
            part = RnsPolynomial(dc.data[idx], digit, False)
            conv = part.to_basis([ext[j] for j in others])
            full = np.empty((len(ext), n), dtype=np.uint64)
            full[idx] = part.data
            full[others] = conv.data
            F = RnsPolynomial(full, ext, False).to_ntt().data
            kb = key.b[i][rows]
            ka = key.a_rows(i, rows)
            K.mac_rows(acc_b, F, kb, eb.q, eb.qneg_inv, eb.r2)
            K.mac_rows(acc_a, F, ka, eb.q, eb.qneg_inv, eb.r2)
        return (self._mod_down(RnsPolynomial(acc_b, ext, True), qs, ps),
                self._mod_down(RnsPolynomial(acc_a, ext, True), qs, ps))

    @staticmethod
    def _mod_down(x: RnsPolynomial, qs, ps) -> RnsPolynomial:
        k = len(qs)
        xp = RnsPolynomial(x.data[k:], ps, True).to_coeff()
        # fast conversion returns xp + u*P; remove round(u) so the residue is
        # centred and the division below rounds instead of flooring
        P = math.prod(ps)
        y = xp.mul_scalar([pow(P // p % p, -1, p) for p in ps])
        v = sum(y.data[i].astype(np.float64) / p for i, p in enumerate(ps))
        u = np.rint(v).astype(np.int64)
        conv = xp.to_basis(qs)
        fix = np.stack([(u % q).astype(np.uint64) * np.uint64(P % q) % np.uint64(q) for q in qs])
        corr = (conv - RnsPolynomial(fix, qs, False)).to_ntt()
        xq = RnsPolynomial(x.data[:k], qs, True)
        return (xq - corr).mul_scalar([pow(P % q, -1, q) for q in qs])


class Decryptor:
    def __init__(self, params: RingParams, secret_key: SecretKey):
        self.params = params
        self.secret_key = secret_key
        self.encoder = Encoder(params)

    def decrypt(self, ct: Ciphertext) -> Plaintext:
        s = self.secret_key.poly.keep(ct.b.moduli)
        return Plaintext(ct.b - ct.a * s, ct.level, ct.scale, ct.tag)

    def decrypt_decode(self, ct: Ciphertext, real: bool = True) -> np.ndarray:
        return self.encoder.decode(self.decrypt(ct), real=real)

    def slots(self, ct: Ciphertext) -> np.ndarray:
        return self.encoder.slots(self.decrypt(ct))

    def encrypt_sk(self, pt: Plaintext, rng=None) -> Ciphertext:
        rng = rng or make_rng(None)
        qs = self.params.moduli_at(pt.level)
        a = _uniform(rng, self.params.ring_degree, qs)
        e = RnsPolynomial.from_ints(sample_gaussian(rng, self.params.ring_degree, self.params.sigma), qs).to_ntt()
        s = self.secret_key.poly.keep(qs)
        return Ciphertext(a * s + e + pt.poly, a, pt.level, pt.scale, pt.tag)


class CkksContext:
    """Convenience bundle of parameters, keys, evaluator and decryptor."""

    def __init__(self, params: RingParams, seed: int | None = 0, rotations: Iterable[int] = (),
                 conjugation: bool = False, galois: Iterable[int] = ()):
        self.params = params
        self.keygen = KeyGenerator(params, seed)
        self.public_key = self.keygen.public_key()
        keys = self.keygen.eval_keys(rotations, conjugation, galois)
        self.evaluator = Evaluator(params, keys, self.public_key,
                                   seed=None if seed is None else seed + 1)
        self.decryptor = Decryptor(params, self.keygen.secret_key)
        self.encoder = self.evaluator.encoder

    @property
    def counter(self) -> OpCounter:
        return self.evaluator.counter

    @property
    def keys(self) -> EvalKeys:
        return self.evaluator.keys

    def add_rotations(self, rotations: Iterable[int] = (), galois: Iterable[int] = (),
                      conjugation: bool = False):
        gs = list(galois)
        if conjugation:
            gs.append(conjugation_element(self.params.ring_degree))
        self.keygen.add_rotations(self.keys, rotations, gs)

    def encrypt_slots(self, msg, level=None, scale=None) -> Ciphertext:
        return self.evaluator.encrypt(self.encoder.encode_slots(msg, level, scale))

    def decrypt(self, ct: Ciphertext, real: bool = True) -> np.ndarray:
        return self.decryptor.decrypt_decode(ct, real)
