import math

import numpy as np
import pytest

from conftest import rel_err
from nestfhe.bootstrap import (BootstrapError, BootstrapPlan, OracleModEval, PolyModEval, bootstrap,
                               bootstrap_fused_conv, bootstrap_to_slots, conv_fused, ctos_stages, full_stoc, full_stoc_split,
                               fuse_kernel_with_stoc2, join_real_imag, make_split, prepare_raise,
                               split_real_imag, stoc1, stoc2)
from nestfhe.ckks import CkksContext
from nestfhe.conv import (FeatureMapLayout, KernelTensor, build_relayout, conv2d_nested, conv2d_reference,
                          decrypt_feature_map, identity_moves, pack_conv_kernels, pack_feature_map, relayout)
from nestfhe.encoding import COEFF, dft_plan
from nestfhe.ring import preset

TOL_LAYER = 2.0 ** -12


@pytest.mark.parametrize("N", [64, 256, 1024])
def test_split_identity(N):
    plan = dft_plan(N)
    x = np.array([1, 1j]) @ np.random.default_rng(N).normal(size=(2, N // 2))
    want = plan.stoc(x)
    l = 1
    while l <= N // 2:
        split = make_split(N, l)
        y = x
        for st in split.stoc1:
            y = st.matrix.apply(y)
        if split.stoc2:
            y = split.stoc2.matrix.apply(y)
        assert rel_err(y, want) < 2.0 ** -35, l
        l *= 2


def test_ctos_stages_invert_stoc():
    N = 256
    plan = dft_plan(N)
    x = np.random.default_rng(0).normal(size=N // 2) + 0j
    z = x
    for st in ctos_stages(N):
        z = st.matrix.apply(z)
    assert rel_err(z, plan.ctos(x)) < 2.0 ** -35


def test_split_levels_and_errors():
    sp = make_split(1024, 32)
    assert sp.levels == {"ctos": 2, "stoc1": 2, "stoc2": 1}
    assert make_split(1024, 4).levels["stoc1"] == 1
    assert full_stoc_split(1024).stoc1 == [] and full_stoc_split(1024).stoc2 is not None
    for bad in (0, 3, 1024):
        with pytest.raises(BootstrapError):
            make_split(1024, bad)


def _setup(params, seed, f=3, scale=0.3):
    N = params.ring_degree
    lay = FeatureMapLayout(6, 8, N // 64, N)
    split = make_split(N, lay.slice_len)
    rng = np.random.default_rng(seed)
    K = KernelTensor(rng.normal(size=(lay.channels, lay.channels, f, f)) * scale)
    kern = pack_conv_kernels(lay, K)
    fused = fuse_kernel_with_stoc2(kern, split)
    rots = split.rotations(include_stoc2=True) | set(kern.rotations()) | set(fused.rotations())
    rots |= full_stoc_split(N).rotations(include_ctos=False, include_stoc2=True)
    ctx = CkksContext(params, seed=seed, rotations=sorted(rots), conjugation=True)
    return ctx, lay, split, K, kern, fused


@pytest.fixture(scope="module")
def desk():
    return _setup(preset("desk", 1024), 2)


def test_split_join_real_imag(desk):
    ctx = desk[0]
    ev, dec = ctx.evaluator, ctx.decryptor
    rng = np.random.default_rng(4)
    z = rng.normal(size=512) + 1j * rng.normal(size=512)
    re, im = split_real_imag(ev, dec.encrypt_sk(ctx.encoder.encode_slots(z)))
    # one conjugation key switch, so looser than a bare round trip
    assert rel_err(dec.slots(re), z.real) < 2.0 ** -16
    assert rel_err(dec.slots(im), z.imag) < 2.0 ** -16
    assert rel_err(dec.slots(join_real_imag(ev, re, im)), z) < 2.0 ** -16


def test_stoc2_stoc1_matches_full_stoc(desk):
    ctx, lay, split = desk[:3]
    ev, dec = ctx.evaluator, ctx.decryptor
    rng = np.random.default_rng(5)
    x = rng.normal(size=512) + 1j * rng.normal(size=512)
    ct = dec.encrypt_sk(ctx.encoder.encode_slots(x))
    two = stoc2(ev, stoc1(ev, ct, split), split)
    one = full_stoc(ev, ct, full_stoc_split(1024))
    a, b = ctx.encoder.coefficients(dec.decrypt(two)), ctx.encoder.coefficients(dec.decrypt(one))
    assert rel_err(a, b) < TOL_LAYER
    assert two.tag == one.tag == COEFF


def test_fusion_saves_a_level_and_keeps_counts(desk):
    ctx, lay, split, K, kern, fused = desk
    ev, dec = ctx.evaluator, ctx.decryptor
    img = np.random.default_rng(6).normal(size=(lay.channels, 6, 6))
    ct = pack_feature_map(ev, dec.encrypt_sk, lay, img)[0]
    b = ev.counter.snapshot()
    bare = conv2d_nested(ev, ct, kern)
    d_bare = ev.counter.since(b)
    seq = stoc2(ev, bare, split)
    b = ev.counter.snapshot()
    fz = conv_fused(ev, ct, fused)
    d_fz = ev.counter.since(b)
    assert ct.level - fz.level == 1 and ct.level - seq.level == 2
    assert (d_fz["pmult"], d_fz["hrot"]) == (d_bare["pmult"], d_bare["hrot"])
    assert fused.plaintext_count == kern.plaintext_count
    assert rel_err(ctx.encoder.coefficients(dec.decrypt(fz)),
                   ctx.encoder.coefficients(dec.decrypt(seq))) < TOL_LAYER


def test_oracle_bootstrap_after_fused_conv(desk):
    ctx, lay, split, K, kern, fused = desk
    ev, dec = ctx.evaluator, ctx.decryptor
    img = np.random.default_rng(7).normal(size=(lay.channels, 6, 6))
    ct = pack_feature_map(ev, dec.encrypt_sk, lay, img)[0]
    plan = BootstrapPlan(split, OracleModEval(dec, 1))
    b = ev.counter.snapshot()
    out = bootstrap_fused_conv(ev, ct, fused, plan)
    d = ev.counter.since(b)
    assert d["ciphertexts_bootstrapped"] == 1 and d["modraise"] == 1
    assert out.tag == lay.tag
    assert out.level == ctx.params.max_level - split.levels["ctos"] - split.levels["stoc1"]
    got = decrypt_feature_map(dec, lay, [out], lay.channels)
    assert rel_err(got, conv2d_reference(img, K)) < TOL_LAYER


def test_two_layer_composition(desk):
    """A bootstrapped layer feeds the next conv through the bit-reversed slot order.

    The relayout masks the canvas margin ('same' conv writes there) and maps the
    folded, block-bit-reversed slots back; StoC1 then restores nested(l).
    """
    ctx, lay, split, K, kern, fused = desk
    ev, dec = ctx.evaluator, ctx.decryptor
    rmap = build_relayout(ctx.params.slots, [lay.slice_real], lay.slice_real, identity_moves(lay))
    ctx.add_rotations(rmap.rotations())
    img = np.random.default_rng(8).normal(size=(lay.channels, 6, 6))
    plan = BootstrapPlan(split, OracleModEval(dec, 2))

    def layer(ct):
        y = conv_fused(ev, ev.drop_level(ct, 1), fused)
        parts = bootstrap_to_slots(ev, y, plan, split_parts=True)
        return stoc1(ev, relayout(ev, [parts], rmap), split)

    mid = layer(pack_feature_map(ev, dec.encrypt_sk, lay, img)[0])
    assert mid.tag == lay.tag
    out = layer(mid)
    want = conv2d_reference(conv2d_reference(img, K), K)
    assert rel_err(decrypt_feature_map(dec, lay, [out], lay.channels), want) < TOL_LAYER


def test_bootstrap_rejects_slot_tag(desk):
    ctx, lay, split = desk[:3]
    ct = ctx.decryptor.encrypt_sk(ctx.encoder.encode_slots(np.ones(512)))
    with pytest.raises(BootstrapError):
        bootstrap(ctx.evaluator, ct, BootstrapPlan(split, OracleModEval(ctx.decryptor)))


def test_prepare_raise_scale():
    P = preset("desk", 256)
    ctx = CkksContext(P, seed=1)
    ev = ctx.evaluator
    ct = ctx.decryptor.encrypt_sk(ctx.encoder.encode_coeffs(np.ones(256)))
    x = prepare_raise(ev, ct, 2.0 ** 8)
    assert x.level == 0
    assert abs(math.log2(P.moduli[0] / x.scale) - 8) < 0.01
    with pytest.raises(BootstrapError):
        prepare_raise(ev, ct, 2.0 ** 40)


def test_level_budget():
    split = make_split(1024, 32)
    b = BootstrapPlan(split, OracleModEval(None)).level_budget(activation=True, relayout=True)
    assert b == {"ctos": 2, "modeval": 0, "activation": 1, "relayout": 1, "stoc1": 2, "conv": 1, "total": 7}
    pm = PolyModEval()
    assert BootstrapPlan(split, pm).level_budget()["modeval"] == pm.levels


def test_poly_modeval_float():
    """The cosine polynomial plus doublings reproduces (M/2pi) sin(2pi x/M) near every integer."""
    pm = PolyModEval()
    M = 1.0
    I = np.arange(-pm.bound, pm.bound + 1)
    x = (I[:, None] + np.linspace(-1e-3, 1e-3, 9)[None, :]).reshape(-1)
    th = 2 * math.pi * (x - M / 4) / (M * 2 ** pm.doublings)
    c = np.polynomial.polynomial.polyval(th * th, pm.coeffs)
    for _ in range(pm.doublings):
        c = 2 * c * c - 1
    got = M / (2 * math.pi) * c
    assert np.max(np.abs(got - M / (2 * math.pi) * np.sin(2 * math.pi * x / M))) < 1e-6
    assert np.max(np.abs(got - (x - np.round(x)))) < 1e-6


def test_poly_modeval_range_check():
    PolyModEval().check(preset("desk-boot", 256))
    with pytest.raises(BootstrapError):
        PolyModEval(bound=4).check(preset("desk-boot", 256))


def test_poly_bootstrap_encrypted():
    P = preset("desk-boot", 256)
    ctx, lay, split, K, kern, fused = _setup(P, 3)
    ev, dec = ctx.evaluator, ctx.decryptor
    img = np.random.default_rng(9).normal(size=(lay.channels, 6, 6))
    ct = pack_feature_map(ev, dec.encrypt_sk, lay, img)[0]
    pm = PolyModEval()
    plan = BootstrapPlan(split, pm, raise_ratio=2.0 ** 12, ctos_extra_bits=0)
    out = bootstrap_fused_conv(ev, ct, fused, plan)
    assert out.level == P.max_level - 2 - pm.levels - split.levels["stoc1"]
    got = decrypt_feature_map(dec, lay, [out], lay.channels)
    assert rel_err(got, conv2d_reference(img, K)) < 1e-2
