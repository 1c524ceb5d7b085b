"""Self-checks run by ``nestfhe verify``.

Each suite builds its own context at the requested ring degree, compares the
homomorphic result against a float oracle and returns a list of Check rows.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import encoding
from .bootstrap import (BootstrapPlan, OracleModEval, bootstrap, conv_fused, ctos_stages, full_stoc,
                        full_stoc_split, fuse_kernel_with_stoc2, make_split, stoc1, stoc2)
from .ckks import CkksContext, galois_element
from .conv import (FeatureMapLayout, KernelTensor, coeff_conv_kernels, conv2d_blocked, decompose_kernel,
                   pack_conv_blocks, coeff_layout_unpack, coeff_layout_vector,
                   conv2d_coeff, conv2d_nested, conv2d_reference, conv2d_slot, decompose_image, decrypt_feature_map,
                   downsample_conv2d, dwconv2d, dwconv2d_reference, pack_conv_kernels, pack_dw_kernel,
                   pack_feature_map, pack_tree_galois, slot_conv_rotations, slot_tile_unpack, slot_tile_vectors,
                   slot_tiling)
from .encoding import COEFF, dft_plan, reference_local_conv
from .linalg import extract_diagonals, matvec_bsgs, matvec_naive, plan_for
from .ring import RnsPolynomial, preset

TOL_ROUNDTRIP = 2.0 ** -20
TOL_LAYER = 2.0 ** -12
TOL_FACTOR = 2.0 ** -35


@dataclass
class Check:
    suite: str
    name: str
    ok: bool
    detail: str = ""
    skipped: bool = False

    def line(self) -> str:
        return f"{'SKIP' if self.skipped else 'PASS' if self.ok else 'FAIL'}  {self.suite}/{self.name}  {self.detail}".rstrip()


def rel_err(got, ref) -> float:
    ref = np.asarray(ref)
    den = max(float(np.max(np.abs(ref), initial=0.0)), 1e-300)
    return float(np.max(np.abs(np.asarray(got) - ref), initial=0.0)) / den


class _Suite:
    def __init__(self, name: str):
        self.name = name
        self.rows: list[Check] = []

    def close(self, label: str, err: float, tol: float):
        self.rows.append(Check(self.name, label, bool(err < tol), f"err={err:.3g} tol={tol:.3g}"))

    def equal(self, label: str, got, want):
        self.rows.append(Check(self.name, label, got == want, f"got={got} want={want}"))


def _params(ring_degree: int):
    return preset("desk", ring_degree)


# ring -----------------------------------------------------------------------------------------


def suite_ring(ring_degree: int, seed: int) -> list[Check]:
    s = _Suite("ring")
    P = _params(ring_degree)
    N = P.ring_degree
    rng = np.random.default_rng(seed)
    qs = P.moduli_at(P.max_level)
    a = rng.integers(-8, 9, N)
    b = rng.integers(-8, 9, N)
    pa, pb = RnsPolynomial.from_ints(a, qs), RnsPolynomial.from_ints(b, qs)
    s.equal("ntt-roundtrip", bool(np.array_equal(pa.to_ntt().to_coeff().data, pa.data)), True)
    prod = (pa.to_ntt() * pb.to_ntt()).to_coeff().to_ints()
    s.equal("negacyclic-product", prod == [int(v) for v in encoding.negacyclic_conv(a, b)], True)
    big = [int(v) * (1 << 70) + 12345 for v in rng.integers(-1000, 1000, N)]
    s.equal("crt-roundtrip", RnsPolynomial.from_ints(big, qs).to_ints() == big, True)
    q_last = qs[-1]
    x = rng.integers(-(1 << 50), 1 << 50, N)
    got = RnsPolynomial.from_ints([int(v) for v in x], qs).rescale_last().to_ints()
    want = [int(v) for v in np.rint(x / q_last)]
    s.equal("rescale-rounding", max(abs(g - w) for g, w in zip(got, want)) <= 1, True)
    g = galois_element(1, N)
    aut = pa.automorphism(g).to_ints()
    ref = [0] * N
    for i, v in enumerate(a):
        j = i * g % (2 * N)
        if j < N:
            ref[j] += int(v)
        else:
            ref[j - N] -= int(v)
    s.equal("automorphism", aut == ref, True)
    return s.rows


# ckks -----------------------------------------------------------------------------------------


def suite_ckks(ring_degree: int, seed: int) -> list[Check]:
    s = _Suite("ckks")
    P = _params(ring_degree)
    n = P.slots
    ctx = CkksContext(P, seed=seed, rotations=[1, 5, n // 2 - 1], conjugation=True)
    ev, dec = ctx.evaluator, ctx.decryptor
    rng = np.random.default_rng(seed)
    m = rng.uniform(-1, 1, n) + 1j * rng.uniform(-1, 1, n)
    m2 = rng.uniform(-1, 1, n)
    c = dec.encrypt_sk(ctx.encoder.encode_slots(m))
    s.close("sk-roundtrip", rel_err(dec.slots(c), m), TOL_ROUNDTRIP)
    cp = ctx.encrypt_slots(m)
    s.close("pk-roundtrip", rel_err(dec.slots(cp), m), TOL_LAYER)
    c2 = ctx.encrypt_slots(m2)
    s.close("mul-rescale", rel_err(dec.slots(ev.rescale(ev.mul(c, c2))), m * m2), TOL_LAYER)
    for r in (1, 5, n // 2 - 1):
        s.close(f"rotate-{r}", rel_err(dec.slots(ev.rotate(c, r)), np.roll(m, -r)), TOL_LAYER)
    s.close("conjugate", rel_err(dec.slots(ev.conjugate(c)), np.conj(m)), TOL_LAYER)
    # depth-5 circuit
    x = c
    ref = m.copy()
    for i in range(5):
        k = rng.uniform(0.5, 1.0, n)
        x = ev.rescale(ev.mul(x, ctx.encrypt_slots(k, level=x.level)))
        x = ev.add_const(x, 0.25)
        ref = ref * k + 0.25
    s.close("depth-5", rel_err(dec.slots(x), ref), TOL_LAYER)
    return s.rows


# encoding ---------------------------------------------------------------------------------------


def suite_encoding(ring_degree: int, seed: int) -> list[Check]:
    s = _Suite("encoding")
    rng = np.random.default_rng(seed)
    for N in sorted({16, 64, min(ring_degree, 256)}):
        plan = dft_plan(N)
        n = N // 2
        S = encoding.apply_stages(np.eye(n, dtype=complex), 1, n).T
        s.close(f"factorization-N{N}", float(np.max(np.abs(S - plan.dense_stoc()))), TOL_FACTOR)
    plan = dft_plan(ring_degree)
    n = plan.n
    x = rng.normal(size=n) + 1j * rng.normal(size=n)
    s.close("stoc-ctos-inverse", rel_err(plan.ctos(plan.stoc(x)), x), TOL_FACTOR)
    a = rng.normal(size=ring_degree)
    s.close("embed-unembed", rel_err(plan.unembed(plan.embed(a)), a), TOL_FACTOR)
    # product law for every slice length
    worst = 0.0
    l = 1
    while l <= n:
        m1 = rng.normal(size=n) + 1j * rng.normal(size=n)
        m2 = rng.normal(size=n) + 1j * rng.normal(size=n)
        prod = encoding.nested_slots(plan, m1, l) * encoding.nested_slots(plan, m2, l)
        worst = max(worst, rel_err(plan.local_idft(prod, l), reference_local_conv(m1, m2, l)))
        l *= 2
    s.close("product-law-twisted", worst, 2.0 ** -30)
    worst = 0.0
    L = 2
    while L <= ring_degree:
        r1, r2 = rng.normal(size=ring_degree), rng.normal(size=ring_degree)
        prod = encoding.nested_real_slots(plan, r1, L) * encoding.nested_real_slots(plan, r2, L)
        got = encoding.nested_real_decode_slots(plan, prod, L)
        worst = max(worst, rel_err(got, reference_local_conv(r1, r2, L, real=True)))
        L *= 2
    s.close("product-law-negacyclic", worst, 2.0 ** -30)
    # encrypted product law on one slice length
    P = _params(ring_degree)
    ctx = CkksContext(P, seed=seed)
    r1, r2 = rng.normal(size=ring_degree), rng.normal(size=ring_degree)
    L = 64 if ring_degree >= 64 else ring_degree
    ct = ctx.decryptor.encrypt_sk(ctx.encoder.encode_nested_real(r1, L))
    pt = ctx.encoder.encode_nested_real(r2, L, ct.level)
    out = ctx.evaluator.rescale(ctx.evaluator.mul_plain(ct, pt))
    s.close("encrypted-product-law", rel_err(ctx.decrypt(out), reference_local_conv(r1, r2, L, real=True)), TOL_LAYER)
    return s.rows


# linalg ----------------------------------------------------------------------------------------


def suite_linalg(ring_degree: int, seed: int) -> list[Check]:
    s = _Suite("linalg")
    P = _params(ring_degree)
    n = P.slots
    rng = np.random.default_rng(seed)
    ctx = CkksContext(P, seed=seed, rotations=range(1, 64))
    ev, dec = ctx.evaluator, ctx.decryptor
    for M in (8, 64):
        W = rng.normal(size=(M, M))
        D = extract_diagonals(W)
        x = rng.normal(size=M)
        ct = dec.encrypt_sk(ctx.encoder.encode_slots(np.tile(x, n // M)))
        naive = dec.slots(matvec_naive(ev, ct, D))[:M].real
        bsgs = dec.slots(matvec_bsgs(ev, ct, D))[:M].real
        s.close(f"naive-M{M}", rel_err(naive, W @ x), TOL_LAYER)
        s.close(f"bsgs-M{M}", rel_err(bsgs, W @ x), TOL_LAYER)
        b = ev.counter.snapshot()
        matvec_bsgs(ev, ct, D)
        d = ev.counter.since(b)
        s.equal(f"bsgs-rotations-M{M}", d["hrot"], plan_for(D).predicted_rotations)
    return s.rows


# conv --------------------------------------------------------------------------------------------


def suite_conv(ring_degree: int, seed: int) -> list[Check]:
    s = _Suite("conv")
    P = _params(ring_degree)
    N, n = P.ring_degree, P.slots
    rng = np.random.default_rng(seed)
    lay = FeatureMapLayout(6, 8, min(4, N // 64), N)
    C = lay.channels
    img = rng.normal(size=(C, 6, 6))
    K = KernelTensor(rng.normal(size=(C, C, 3, 3)))
    ref = conv2d_reference(img, K)
    kern = pack_conv_kernels(lay, K)
    lay2 = FeatureMapLayout(4, 8, C, N)
    tiling = slot_tiling(lay2, K)
    rots = set(kern.rotations()) | slot_conv_rotations(tiling, K)
    ctx = CkksContext(P, seed=seed, rotations=sorted(rots), galois=pack_tree_galois(lay.per_ct, N))
    ev, dec = ctx.evaluator, ctx.decryptor
    cts = pack_feature_map(ev, dec.encrypt_sk, lay, img)
    got = decrypt_feature_map(dec, lay, [conv2d_nested(ev, cts[0], kern)], C)
    s.close("nested-conv2d", rel_err(got, ref), TOL_LAYER)

    wdw = rng.normal(size=(C, 3, 3))
    got = decrypt_feature_map(dec, lay, [dwconv2d(ev, cts[0], pack_dw_kernel(lay, wdw))], C)
    s.close("nested-dwconv2d", rel_err(got, dwconv2d_reference(img, wdw)), TOL_LAYER)

    ct = dec.encrypt_sk(ctx.encoder.encode_coeffs(coeff_layout_vector(lay, img)))
    out = conv2d_coeff(ev, ct, coeff_conv_kernels(lay, K))
    s.close("coefficient-conv2d", rel_err(coeff_layout_unpack(lay, dec.decrypt_decode(out), C), ref), TOL_LAYER)

    img2 = img[:, :4, :4]
    cs = [dec.encrypt_sk(ctx.encoder.encode_slots(v)) for v in slot_tile_vectors(tiling, img2)]
    outs = conv2d_slot(ev, cs, tiling, K)
    got = slot_tile_unpack(tiling, [dec.slots(c) for c in outs], C)
    s.close("slot-conv2d", rel_err(got, conv2d_reference(img2, K)), TOL_LAYER)

    # strided conv over phase channels
    src = FeatureMapLayout(4, 8, C, N)
    dst = src.strided(2)
    Ks = KernelTensor(rng.normal(size=(C, C, 3, 3)), 2)
    blocks_rot = set()
    from .conv import decompose_kernel, pack_conv_blocks
    for kb in pack_conv_blocks(dst, decompose_kernel(Ks)).values():
        blocks_rot |= set(kb.rotations())
    ctx.add_rotations(blocks_rot)
    pc = pack_feature_map(ev, dec.encrypt_sk, dst, decompose_image(img2, 2))
    outs = downsample_conv2d(ev, pc, dst, Ks)
    got = decrypt_feature_map(dec, dst.with_channels(C), outs, C)
    s.close("strided-conv2d", rel_err(got, conv2d_reference(img2, Ks)), TOL_LAYER)
    return s.rows


# bootstrap ----------------------------------------------------------------------------------------


def suite_bootstrap(ring_degree: int, seed: int) -> list[Check]:
    s = _Suite("bootstrap")
    P = _params(ring_degree)
    N, n = P.ring_degree, P.slots
    rng = np.random.default_rng(seed)
    plan = dft_plan(N)
    # every slice holds a channel, otherwise bare conv prunes diagonals that fusion refills
    lay = FeatureMapLayout(6, 8, N // 64, N)
    split = make_split(N, lay.slice_len)
    x = rng.normal(size=n) + 1j * rng.normal(size=n)
    y = x
    for st in split.stoc1:
        y = st.matrix.apply(y)
    y = split.stoc2.matrix.apply(y)
    s.close("split-identity", rel_err(y, plan.stoc(x)), TOL_FACTOR)
    z = x
    for st in split.ctos:
        z = st.matrix.apply(z)
    s.close("ctos-stages", rel_err(z, plan.ctos(x)), TOL_FACTOR)

    fsplit = full_stoc_split(N)
    rots = split.rotations(include_stoc2=True) | fsplit.rotations(include_ctos=False, include_stoc2=True)
    img = rng.normal(size=(lay.channels, 6, 6))
    K = KernelTensor(rng.normal(size=(lay.channels, lay.channels, 3, 3)) * 0.3)
    kern = pack_conv_kernels(lay, K)
    fused = fuse_kernel_with_stoc2(kern, split)
    rots |= set(kern.rotations()) | set(fused.rotations())
    ctx = CkksContext(P, seed=seed, rotations=sorted(rots), conjugation=True)
    ev, dec = ctx.evaluator, ctx.decryptor

    # encrypted stoc2 . stoc1 against the one-shot transform
    ct = dec.encrypt_sk(ctx.encoder.encode_slots(x))
    two = stoc2(ev, stoc1(ev, ct, split), split)
    one = full_stoc(ev, ct, fsplit)
    s.close("stoc2-stoc1-encrypted", rel_err(ctx.encoder.coefficients(dec.decrypt(two)),
                                               ctx.encoder.coefficients(dec.decrypt(one))), TOL_LAYER)

    # fused conv + stoc2 saves one level and keeps conv counts
    cts = pack_feature_map(ev, dec.encrypt_sk, lay, img)
    b = ev.counter.snapshot()
    seq = stoc2(ev, conv2d_nested(ev, cts[0], kern), split)
    d_seq = ev.counter.since(b)
    b = ev.counter.snapshot()
    fz = conv_fused(ev, cts[0], fused)
    d_fz = ev.counter.since(b)
    s.equal("fused-level-saving", (cts[0].level - fz.level) + 1, cts[0].level - seq.level)
    b = ev.counter.snapshot()
    conv2d_nested(ev, cts[0], kern)
    d_conv = ev.counter.since(b)
    s.equal("fused-counts", (d_fz["pmult"], d_fz["hrot"]), (d_conv["pmult"], d_conv["hrot"]))
    s.close("fused-vs-sequential", rel_err(ctx.encoder.coefficients(dec.decrypt(fz)),
                                             ctx.encoder.coefficients(dec.decrypt(seq))), TOL_LAYER)

    bp = BootstrapPlan(split, OracleModEval(dec, seed))
    res = bootstrap(ev, fz, bp)
    got = decrypt_feature_map(dec, lay, [res], lay.channels)
    s.close("fused-conv-bootstrap", rel_err(got, conv2d_reference(img, K)), TOL_LAYER)
    s.equal("bootstrap-level", res.level >= 1, True)
    return s.rows


# cnn --------------------------------------------------------------------------------------------------


def suite_cnn(ring_degree: int, seed: int) -> list[Check]:
    from .cnn import InferenceSession, reference_inference, toy_network
    s = _Suite("cnn")
    P = _params(min(ring_degree, 1 << 10))
    width = 8
    channels = 2
    net = toy_network(seed, channels=channels, width=width)
    img = np.random.default_rng(seed + 1).uniform(-1, 1, size=(channels, width, width))
    ref = reference_inference(net, img)
    boots = {}
    for flow in ("decomposed", "densify"):
        sess = InferenceSession(net, P, flow=flow, seed=seed)
        out = sess.run(img)
        s.close(f"toy-network-{flow}", float(np.max(np.abs(out - ref))), 1e-2)
        boots[flow] = sess.counter.ciphertexts_bootstrapped
    s.equal("fewer-bootstraps-decomposed", boots["decomposed"] < boots["densify"], True)
    return s.rows


# full conv grid -----------------------------------------------------------------------------------

GRID_W = (4, 8)
GRID_F = (1, 3, 5)
GRID_C = (1, 2, 4, 8)
GRID_S = (1, 2)


class _Skip(Exception):
    pass


def _grid_nested(ctx, lay, img, K):
    ev, dec = ctx.evaluator, ctx.decryptor
    C = K.c_out
    if K.stride == 1:
        cts = pack_feature_map(ev, dec.encrypt_sk, lay, img)
        blocks = pack_conv_blocks(lay, K)
        ctx.add_rotations({r for b in blocks.values() for r in b.rotations()})
        outs = conv2d_blocked(ev, cts, blocks, lay.num_cts)
        return decrypt_feature_map(dec, lay, outs, C)
    dst = lay.strided(K.stride)
    blocks = pack_conv_blocks(dst, decompose_kernel(K))
    ctx.add_rotations({r for b in blocks.values() for r in b.rotations()})
    pc = pack_feature_map(ev, dec.encrypt_sk, dst, decompose_image(img, K.stride))
    outs = downsample_conv2d(ev, pc, dst, K)
    return decrypt_feature_map(dec, dst.with_channels(C), outs, C)


def _grid_dw(ctx, lay, img, K):
    ev, dec = ctx.evaluator, ctx.decryptor
    C = K.c_out
    w = K.weights[np.arange(C), np.arange(C)]
    if K.stride > 1:
        # strided depthwise runs through the phase decomposition with a diagonal kernel
        return _grid_nested(ctx, lay, img, K)
    cts = pack_feature_map(ev, dec.encrypt_sk, lay, img)
    outs = [dwconv2d(ev, ct, pack_dw_kernel(lay, w, block=q)) for q, ct in enumerate(cts)]
    return decrypt_feature_map(dec, lay, outs, C)


def _grid_coeff(ctx, lay, img, K):
    ev, dec = ctx.evaluator, ctx.decryptor
    if lay.num_cts > 1 or lay.per_ct ** 2 > lay.ring_degree:
        raise _Skip("coefficient baseline packs one ciphertext with C*C <= N")
    K1 = KernelTensor(K.weights, 1, K.origin)
    ctx.add_rotations(galois=pack_tree_galois(lay.per_ct, lay.ring_degree))
    ct = dec.encrypt_sk(ctx.encoder.encode_coeffs(coeff_layout_vector(lay, img)))
    out = conv2d_coeff(ev, ct, coeff_conv_kernels(lay, K1))
    full = coeff_layout_unpack(lay, dec.decrypt_decode(out), K.c_out)
    return full[:, ::K.stride, ::K.stride]


def _grid_slot(ctx, lay, img, K):
    ev, dec = ctx.evaluator, ctx.decryptor
    K1 = KernelTensor(K.weights, 1, K.origin)
    w = lay.w
    while True:
        cand = FeatureMapLayout(lay.w0, w, lay.channels, lay.ring_degree)
        if cand.per_ct < K.c_in:
            raise _Skip("slot baseline holds all channels in one tile pair")
        try:
            tiling = slot_tiling(cand, K1)
            break
        except ValueError:
            w *= 2
            if w * w > lay.ring_degree:
                raise _Skip("no canvas fits the slot tiling")
    ctx.add_rotations(slot_conv_rotations(tiling, K1))
    cs = [dec.encrypt_sk(ctx.encoder.encode_slots(v)) for v in slot_tile_vectors(tiling, img)]
    outs = conv2d_slot(ev, cs, tiling, K1)
    full = slot_tile_unpack(tiling, [dec.slots(c) for c in outs], K.c_out)
    return full[:, ::K.stride, ::K.stride]


GRID_VARIANTS = {"nested": _grid_nested, "dwconv": _grid_dw, "coefficient": _grid_coeff, "slot": _grid_slot}


def grid_cases():
    for w0 in GRID_W:
        for f in GRID_F:
            for C in GRID_C:
                for s in GRID_S:
                    yield w0, f, C, s


def conv_grid(ring_degree: int = 1 << 10, seed: int = 0, cases=None, variants=None) -> list[Check]:
    """Every conv variant against the float oracle over the (w, f, C, s) grid.

    Combinations a baseline cannot express come back as SKIP rows so the grid
    size stays visible.
    """
    s_ = _Suite("conv-grid")
    P = _params(ring_degree)
    ctx = CkksContext(P, seed=seed)
    rng = np.random.default_rng(seed)
    variants = list(variants or GRID_VARIANTS)
    for w0, f, C, s in (cases or grid_cases()):
        lay = FeatureMapLayout.fit(w0, C, P.ring_degree, (f - 1) // 2 + 1)
        img = rng.normal(size=(C, w0, w0))
        Kf = KernelTensor(rng.normal(size=(C, C, f, f)) / np.sqrt(C * f * f), s)
        dw = np.zeros_like(Kf.weights)
        dw[np.arange(C), np.arange(C)] = rng.normal(size=(C, f, f)) / f
        Kd = KernelTensor(dw, s)
        for v in variants:
            K = Kd if v == "dwconv" else Kf
            label = f"{v} w={w0} f={f} C={C} s={s}"
            try:
                got = GRID_VARIANTS[v](ctx, lay, img, K)
            except _Skip as e:
                s_.rows.append(Check(s_.name, label, True, str(e), skipped=True))
                continue
            s_.close(label, rel_err(got, conv2d_reference(img, K)), TOL_LAYER)
    return s_.rows


SUITES: dict[str, Callable[[int, int], list[Check]]] = {
    "ring": suite_ring,
    "ckks": suite_ckks,
    "encoding": suite_encoding,
    "linalg": suite_linalg,
    "conv": suite_conv,
    "conv-grid": conv_grid,
    "bootstrap": suite_bootstrap,
    "cnn": suite_cnn,
}


def run_suites(names=None, ring_degree: int = 1 << 10, seed: int = 0, echo=None) -> list[Check]:
    """Run suites in order; an exception inside a suite is a failed check."""
    names = list(SUITES) if not names else list(names)
    unknown = [x for x in names if x not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    rows: list[Check] = []
    for name in names:
        t0 = time.perf_counter()
        try:
            got = SUITES[name](ring_degree, seed)
        except Exception as e:  # reported, not raised
            got = [Check(name, "error", False, f"{type(e).__name__}: {e}")]
        dt = time.perf_counter() - t0
        ok = all(c.ok for c in got)
        if echo:
            for c in got:
                echo(c.line())
            echo(f"{'PASS' if ok else 'FAIL'}  suite {name} ({len(got)} checks, {dt:.1f}s)")
        rows += got
    return rows


FAULTS = ("twiddle",)


@contextlib.contextmanager
def inject_fault(kind: str | None):
    """Deliberately corrupt shared tables so that the suites must notice."""
    if not kind:
        yield
        return
    if kind != "twiddle":
        raise KeyError(f"unknown fault {kind!r}")
    w = encoding.stage_twiddles(2)
    saved = w.copy()
    w[1] *= np.exp(0.01j)
    try:
        yield
    finally:
        w[:] = saved
        make_split.cache_clear()
        ctos_stages.cache_clear()
