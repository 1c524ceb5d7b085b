"""Bootstrapping pipeline with the StoC split and conv2d fusion.

Level flow of one layer boundary (default desk preset, oracle ModEval):

    fused conv (1) -> drop to 0 -> integer lift -> mod_raise
    -> CtoS (2) -> ModEval -> [split, square (1), relayout (1)] -> StoC1 (1-2)

After CtoS and ModEval slot c*l + brv_l(t) of a nested(l) map holds the
folded value r_t + i*r_{t+l} of slice c, which is exactly the input StoC1
expects; a change of layout is a relayout map whose plaintexts already carry
the block-local bit reversal.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ckks import Ciphertext, CkksError, Evaluator, LevelError
from .conv import (DwKernel, FeatureMapLayout, KernelTensor, PackedKernelDiagonals, RelayoutMap,
                   pack_conv_blocks, relayout)
from .encoding import COEFF, SLOT, EncodingTag, nested, stage_diagonals, stage_halves
from .linalg import BsgsPlan, DiagonalMatrix, matvec_bsgs, plan_bsgs, plan_for, rotation_keys


class BootstrapError(CkksError):
    pass


# stage matrices -----------------------------------------------------------------------


def stage_matrix(n: int, h: int, inverse: bool = False) -> DiagonalMatrix:
    return DiagonalMatrix(n, stage_diagonals(n, h, inverse))


def group_matrix(n: int, halves: Sequence[int], inverse: bool = False) -> DiagonalMatrix:
    """Product of butterfly stages in application order."""
    M = DiagonalMatrix.identity(n)
    for h in halves:
        M = stage_matrix(n, h, inverse) @ M
    return M.pruned(1e-15)


def _chunks(seq: list, k: int) -> list[list]:
    k = max(1, min(k, len(seq))) if seq else 1
    out = []
    base, extra = divmod(len(seq), k)
    i = 0
    for j in range(k):
        size = base + (1 if j < extra else 0)
        if size:
            out.append(seq[i:i + size])
        i += size
    return out


@dataclass
class LinearStage:
    matrix: DiagonalMatrix
    plan: BsgsPlan
    name: str
    cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def of(cls, m: DiagonalMatrix, name: str) -> "LinearStage":
        return cls(m, plan_for(m), name)

    def rotations(self) -> tuple[int, ...]:
        return rotation_keys(self.matrix, self.plan)

    def __call__(self, ev: Evaluator, ct: Ciphertext, pt_scale: float | None = None,
                 cache: bool = True) -> Ciphertext:
        return matvec_bsgs(ev, ct, self.matrix, self.plan, pt_scale=pt_scale,
                           cache=self.cache if cache else None)


@dataclass
class StocSplit:
    """StoC = StoC2 . StoC1 with the boundary at slice length l; CtoS = StoC^-1."""

    n: int
    slice_len: int
    stoc1: list[LinearStage]
    stoc2: LinearStage | None
    ctos: list[LinearStage]

    @property
    def levels(self) -> dict[str, int]:
        return {"ctos": len(self.ctos), "stoc1": len(self.stoc1), "stoc2": 1 if self.stoc2 else 0}

    def rotations(self, include_ctos: bool = True, include_stoc2: bool = False) -> set[int]:
        stages = list(self.stoc1)
        if include_ctos:
            stages += self.ctos
        if include_stoc2 and self.stoc2:
            stages.append(self.stoc2)
        out: set[int] = set()
        for s in stages:
            out.update(s.rotations())
        return out


@functools.lru_cache(maxsize=None)
def make_split(ring_degree: int, slice_len: int, stoc1_groups: int | None = None,
               ctos_groups: int = 2) -> StocSplit:
    n = ring_degree // 2
    if slice_len < 1 or slice_len & (slice_len - 1) or slice_len > n:
        raise BootstrapError(f"slice length {slice_len} invalid for {n} slots")
    low = stage_halves(1, slice_len)
    high = stage_halves(slice_len, n)
    if stoc1_groups is None:
        stoc1_groups = 1 if len(low) <= 4 else 2
    s1 = [LinearStage.of(group_matrix(n, g), f"stoc1[{i}]") for i, g in enumerate(_chunks(low, stoc1_groups))] if low else []
    s2 = LinearStage.of(group_matrix(n, high), "stoc2") if high else None
    return StocSplit(n, slice_len, s1, s2, ctos_stages(ring_degree, ctos_groups))


@functools.lru_cache(maxsize=None)
def ctos_stages(ring_degree: int, groups: int = 2) -> list[LinearStage]:
    """CtoS does not depend on the split; all splits of one ring share it."""
    n = ring_degree // 2
    inv = list(reversed(stage_halves(1, n)))
    return [LinearStage.of(group_matrix(n, g, inverse=True), f"ctos[{i}]") for i, g in enumerate(_chunks(inv, groups))]


def full_stoc_split(ring_degree: int, groups: int = 2) -> StocSplit:
    """Slice length 1: the whole StoC sits in StoC2 (split into ``groups`` stages)."""
    return make_split(ring_degree, 1)


# encrypted stages -----------------------------------------------------------------------


def ctos(ev: Evaluator, ct: Ciphertext, split: StocSplit, extra_bits: int = 0) -> Ciphertext:
    """Homomorphic S^-1; plaintexts get 2**extra_bits beyond q_l for precision."""
    if ct.level < len(split.ctos):
        raise LevelError(f"ctos needs {len(split.ctos)} levels, ciphertext has {ct.level}")
    x = ct.retag(SLOT)
    for st in split.ctos:
        ps = float(ev.params.moduli[x.level]) * 2.0 ** extra_bits
        x = st(ev, x, pt_scale=ps)
    return x


def stoc1(ev: Evaluator, ct: Ciphertext, split: StocSplit) -> Ciphertext:
    if ct.tag != SLOT:
        raise BootstrapError(f"stoc1 expects a slot ciphertext, got {ct.tag}")
    x = ct
    for st in split.stoc1:
        x = st(ev, x)
    return x.retag(nested(split.slice_len))


def stoc2(ev: Evaluator, ct: Ciphertext, split: StocSplit) -> Ciphertext:
    if ct.tag != nested(split.slice_len):
        raise BootstrapError(f"stoc2 expects nested({split.slice_len}), got {ct.tag}")
    x = ct.retag(SLOT)
    if split.stoc2 is not None:
        x = split.stoc2(ev, x)
    return x.retag(COEFF)


def full_stoc(ev: Evaluator, ct: Ciphertext, split: StocSplit) -> Ciphertext:
    return stoc2(ev, stoc1(ev, ct, split), split)


# fusion ----------------------------------------------------------------------------------


@dataclass
class FusedKernel(PackedKernelDiagonals):
    """S' K as slice-granular diagonals; output is in coefficient interpretation."""

    @property
    def out_tag(self) -> EncodingTag:
        return COEFF


def fuse_kernel_with_stoc2(kern: PackedKernelDiagonals, split: StocSplit) -> FusedKernel:
    if kern.slice_len != split.slice_len:
        raise BootstrapError(f"kernel granularity {kern.slice_len} != split {split.slice_len}")
    m = kern.diag if split.stoc2 is None else (split.stoc2.matrix @ kern.diag)
    m = m.pruned(1e-15)
    base = plan_bsgs(kern.channels, kern.slice_len)
    from .linalg import _flat, _rotations_for
    plan = BsgsPlan(base.baby, base.giant, kern.slice_len, False,
                    _flat(_rotations_for(m.offsets, base, m.dim), m.dim))
    prov = f"{kern.provenance}+stoc2(l={split.slice_len})"
    return FusedKernel(m, plan, kern.slice_len, kern.channels, prov)


def fuse_fc_with_stoc(weights: np.ndarray, ring_degree: int) -> FusedKernel:
    """FC on slot values followed by the complete StoC (slice length 1)."""
    n = ring_degree // 2
    W = np.asarray(weights, dtype=complex)
    if W.shape[0] > n or W.shape[1] > n:
        raise BootstrapError("FC dimensions exceed the slot count")
    full = np.zeros((n, n), dtype=complex)
    full[: W.shape[0], : W.shape[1]] = W
    fc = DiagonalMatrix.from_dense(full)
    split = make_split(ring_degree, 1)
    m = (split.stoc2.matrix @ fc).pruned(1e-15) if split.stoc2 else fc
    plan = plan_for(m)
    return FusedKernel(m, plan, 1, n, "fc+stoc")


def fuse_conv_blocks(layout: FeatureMapLayout, kernel: KernelTensor, split: StocSplit,
                     provenance: str = "") -> dict[tuple[int, int], FusedKernel]:
    return {k: fuse_kernel_with_stoc2(v, split) for k, v in pack_conv_blocks(layout, kernel, provenance).items()}


def fuse_dw_kernel(dk: DwKernel, split: StocSplit, channels: int, provenance: str = "dw") -> FusedKernel:
    """Depthwise kernel (a single diagonal) times StoC2."""
    kern = PackedKernelDiagonals(DiagonalMatrix(dk.slots.size, {0: dk.slots}), BsgsPlan(1, 1, dk.slice_len),
                                 dk.slice_len, channels, provenance)
    return fuse_kernel_with_stoc2(kern, split)


def conv_fused(ev: Evaluator, ct: Ciphertext, fused: FusedKernel, pt_scale: float | None = None,
               rescale: bool = True) -> Ciphertext:
    if ct.tag != nested(fused.slice_len):
        raise BootstrapError(f"fused conv expects nested({fused.slice_len}), got {ct.tag}")
    out = matvec_bsgs(ev, ct, fused.diag, fused.plan, pt_scale=pt_scale, rescale=rescale, cache=fused._cache)
    return out.retag(COEFF)


def conv_fused_blocked(ev: Evaluator, cts: Sequence[Ciphertext], blocks: dict[tuple[int, int], FusedKernel],
                       num_out: int, pt_scale: float | None = None) -> list[Ciphertext]:
    outs = []
    for ob in range(num_out):
        acc = None
        for ib, ct in enumerate(cts):
            kern = blocks.get((ob, ib))
            if kern is None:
                continue
            part = conv_fused(ev, ct, kern, pt_scale, rescale=False)
            acc = part if acc is None else ev.add(acc, part)
        if acc is None:
            raise BootstrapError(f"output block {ob} has no contributing kernels")
        outs.append(ev.rescale(acc))
    return outs


# ModEval ---------------------------------------------------------------------------------


def split_real_imag(ev: Evaluator, ct: Ciphertext) -> tuple[Ciphertext, Ciphertext]:
    """(Re z, Im z) from one conjugation; the factor 2 goes into the scale."""
    cj = ev.conjugate(ct)
    s = ev.add(ct, cj)
    d = ev.sub(ct, cj)
    d = Ciphertext(d.b.mul_monomial(3 * ev.params.ring_degree // 2),
                   d.a.mul_monomial(3 * ev.params.ring_degree // 2), d.level, d.scale, d.tag)
    return (Ciphertext(s.b, s.a, s.level, 2 * s.scale, s.tag),
            Ciphertext(d.b, d.a, d.level, 2 * d.scale, d.tag))


def join_real_imag(ev: Evaluator, re: Ciphertext, im: Ciphertext) -> Ciphertext:
    """re + i*im (multiplication by i is the monomial X^(N/2))."""
    N = ev.params.ring_degree
    im_i = Ciphertext(im.b.mul_monomial(N // 2), im.a.mul_monomial(N // 2), im.level, im.scale, im.tag)
    return ev.add(re, im_i)


class OracleModEval:
    """Test-only ModEval: decrypts with the secret key, reduces, re-encrypts.

    It never leaves the test harness: constructing it needs a Decryptor.
    """

    mode = "oracle"
    levels = 0

    def __init__(self, decryptor, seed: int | None = 7):
        from .ring import make_rng
        self.decryptor = decryptor
        self.rng = make_rng(seed)

    def __call__(self, ev: Evaluator, ct: Ciphertext, modulus: float, out_scale: float | None = None) -> Ciphertext:
        x = self.decryptor.slots(ct)
        red = x.real - modulus * np.round(x.real / modulus) + 1j * (x.imag - modulus * np.round(x.imag / modulus))
        sc = ev.params.scale if out_scale is None else out_scale
        pt = ev.encoder.encode_slot_vector(red, SLOT, ct.level, sc)
        return self.decryptor.encrypt_sk(pt, self.rng)

    def split(self, ev: Evaluator, ct: Ciphertext, modulus: float) -> tuple[Ciphertext, Ciphertext]:
        return split_real_imag(ev, self(ev, ct, modulus))


@dataclass
class PolyModEval:
    """x -> (M/2pi) sin(2pi x/M) via a cosine polynomial and double-angle steps.

    theta = 2pi (x - M/4) / (M 2^r); cos(theta) is a degree-``degree``
    polynomial in theta^2 fitted on |theta| <= 2pi (bound + 1/2) / 2^r; r
    squarings c <- 2c^2 - 1 give cos(2pi x/M - pi/2) = sin(2pi x/M).
    """

    degree: int = 7
    doublings: int = 6
    bound: int = 16
    mode: str = "polynomial"

    @property
    def levels(self) -> int:
        # c0 scaling, theta^2, power tree + coefficients, doublings, final constant
        return 1 + 1 + (math.ceil(math.log2(self.degree + 1)) + 1) + self.doublings + 1

    @functools.cached_property
    def coeffs(self) -> np.ndarray:
        a = 2 * math.pi * (self.bound + 0.5) / 2 ** self.doublings
        t = np.cos(np.linspace(0, math.pi, 4 * (self.degree + 1))) * a * a / 2 + a * a / 2
        cheb = np.polynomial.chebyshev.Chebyshev.fit(t, np.cos(np.sqrt(t)), self.degree, domain=[0, a * a])
        return cheb.convert(kind=np.polynomial.Polynomial).coef

    def _eval_real(self, ev: Evaluator, x: Ciphertext, modulus: float) -> Ciphertext:
        r = self.doublings
        c0 = 2 * math.pi / (modulus * 2 ** r)
        q = float(ev.params.moduli[x.level])
        th = ev.rescale(ev.mul_const(x, c0, scale=ev.params.scale * q / x.scale, exact=True))
        th = ev.add_const(th, -math.pi / 2 ** (r + 1))
        t = ev.rescale(ev.square(th))
        c = self._poly(ev, t)
        for _ in range(r):
            c2 = ev.rescale(ev.square(c))
            c = ev.add_const(ev.add(c2, c2), -1.0)
        return ev.rescale(ev.mul_const(c, modulus / (2 * math.pi), exact=True))

    def _poly(self, ev: Evaluator, t: Ciphertext) -> Ciphertext:
        coef = self.coeffs
        d = len(coef) - 1
        powers = {1: t}
        k = 1
        while 2 * k <= d:
            powers[2 * k] = ev.rescale(ev.square(powers[k]))
            k *= 2
        for i in range(2, d + 1):
            if i in powers:
                continue
            hi = 1 << (i.bit_length() - 1)
            a, b = powers[hi], powers[i - hi]
            lv = min(a.level, b.level)
            powers[i] = ev.rescale(ev.mul(ev.drop_level(a, lv), ev.drop_level(b, lv)))
        low = min(p.level for p in powers.values())
        out_level = low - 1
        if out_level < 0:
            raise LevelError("not enough levels for the ModEval polynomial")
        target = float(ev.params.moduli[low])
        acc = None
        for i in range(1, d + 1):
            p = ev.drop_level(powers[i], low)
            q = float(ev.params.moduli[low])
            term = ev.rescale(ev.mul_const(p, float(coef[i]), scale=target * q / p.scale))
            acc = term if acc is None else ev.add(acc, term)
        return ev.add_const(acc, float(coef[0]))

    def check(self, params) -> None:
        """The overflow integer has std sqrt(h/12); require a 6-sigma margin."""
        need = 6 * math.sqrt(params.hamming_weight / 12) + 1
        if self.bound < need:
            raise BootstrapError(f"polynomial bound {self.bound} below the overflow range {need:.1f} for h={params.hamming_weight}")

    def split(self, ev: Evaluator, ct: Ciphertext, modulus: float) -> tuple[Ciphertext, Ciphertext]:
        self.check(ev.params)
        re, im = split_real_imag(ev, ct)
        return self._eval_real(ev, re, modulus), self._eval_real(ev, im, modulus)

    def __call__(self, ev: Evaluator, ct: Ciphertext, modulus: float, out_scale: float | None = None) -> Ciphertext:
        re, im = self.split(ev, ct, modulus)
        return join_real_imag(ev, re, im)


# pipeline -------------------------------------------------------------------------------


@dataclass
class BootstrapPlan:
    """Everything one bootstrap needs; level arithmetic lives here, not in callers."""

    split: StocSplit
    modeval: object
    raise_ratio: float = 2.0 ** 8
    raise_level: int | None = None
    ctos_extra_bits: int = 12

    def raise_to(self, ev: Evaluator) -> int:
        return ev.params.max_level if self.raise_level is None else self.raise_level

    def level_budget(self, activation: bool = False, relayout: bool = False) -> dict[str, int]:
        lv = self.split.levels
        out = {"ctos": lv["ctos"], "modeval": self.modeval.levels,
               "activation": 1 if activation else 0, "relayout": 1 if relayout else 0,
               "stoc1": lv["stoc1"], "conv": 1}
        out["total"] = sum(out.values())
        return out

    def rotations(self) -> set[int]:
        return self.split.rotations()


def prepare_raise(ev: Evaluator, ct: Ciphertext, ratio: float) -> Ciphertext:
    """Drop to level 0 and scale up by an integer so that q0/scale ~= ratio."""
    x = ev.drop_level(ct, 0)
    q0 = ev.params.moduli[0]
    k = int(round(q0 / (ratio * x.scale)))
    if k < 1:
        raise BootstrapError("ciphertext scale already exceeds q0 / ratio")
    return ev.mul_integer(x, k) if k > 1 else x


def bootstrap_to_slots(ev: Evaluator, ct: Ciphertext, plan: BootstrapPlan,
                       split_parts: bool = False):
    """Coefficient-interpreted ciphertext -> slot ciphertext(s) at the post-ModEval level."""
    if ct.tag != COEFF:
        raise BootstrapError(f"bootstrap expects the coefficient interpretation, got {ct.tag}")
    ev.counter.bump("ciphertexts_bootstrapped")
    x = prepare_raise(ev, ct, plan.raise_ratio)
    x = ev.mod_raise(x, plan.raise_to(ev))
    modulus = ev.params.moduli[0] / x.scale
    x = ctos(ev, x, plan.split, plan.ctos_extra_bits)
    if split_parts:
        return plan.modeval.split(ev, x, modulus)
    return plan.modeval(ev, x, modulus)


def bootstrap(ev: Evaluator, ct: Ciphertext, plan: BootstrapPlan, out_split: StocSplit | None = None) -> Ciphertext:
    """Plain bootstrap of a coefficient-interpreted ciphertext back to nested(l')."""
    z = bootstrap_to_slots(ev, ct, plan)
    return stoc1(ev, z, out_split or plan.split)


def square_split(ev: Evaluator, parts: tuple[Ciphertext, Ciphertext]) -> tuple[Ciphertext, Ciphertext]:
    return tuple(ev.rescale(ev.square(p)) for p in parts)  # type: ignore[return-value]


def normalize_scale(ev: Evaluator, ct: Ciphertext, target: float | None = None) -> float:
    """Plaintext scale that brings ``ct`` to ``target`` after one rescale."""
    tgt = ev.params.scale if target is None else target
    return float(ev.params.moduli[ct.level]) * tgt / ct.scale


def activate_and_relayout(ev: Evaluator, parts: Sequence[tuple[Ciphertext, Ciphertext]],
                          rmap: RelayoutMap | None, square: bool = True) -> Ciphertext:
    """Square each split input (optional), then map into the next layout's slot order."""
    sq = [square_split(ev, p) if square else p for p in parts]
    if rmap is None:
        if len(sq) != 1:
            raise BootstrapError("several inputs need an explicit relayout map")
        return join_real_imag(ev, *sq[0])
    ps = normalize_scale(ev, sq[0][0])
    return relayout(ev, sq, rmap, SLOT, pt_scale=ps)


def bootstrap_fused_conv(ev: Evaluator, ct: Ciphertext, fused: FusedKernel, plan: BootstrapPlan,
                         out_split: StocSplit | None = None, conv_level: int | None = 1) -> Ciphertext:
    """Fused conv at a low level, then bootstrap to nested(l') for the next layer."""
    x = ct
    if conv_level is not None and x.level > conv_level:
        x = ev.drop_level(x, conv_level)
    y = conv_fused(ev, x, fused)
    return bootstrap(ev, y, plan, out_split)
