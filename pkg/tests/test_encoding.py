import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rel_err
from nestfhe.encoding import (apply_stage, apply_stage_inv, apply_stages, dft_plan, fold, local_bitrev,
                              negacyclic_conv, nested, nested_real_decode_slots, nested_real_slots, nested_slots,
                              reference_local_conv, stage_diagonals, stage_halves, twisted_conv, unfold)
from nestfhe.linalg import DiagonalMatrix
from nestfhe.ring import bit_reverse_perm

pow2 = st.sampled_from([8, 16, 32, 64, 128, 256])


@pytest.mark.parametrize("N", [8, 16, 32, 64, 128, 256])
def test_factorization_dense(N):
    """The butterfly product with bit reversal equals the dense slot-to-coefficient matrix."""
    plan = dft_plan(N)
    n = N // 2
    S = apply_stages(np.eye(n, dtype=complex), 1, n).T
    assert np.max(np.abs(S - plan.dense_stoc())) < 2.0 ** -35


@pytest.mark.parametrize("N", [16, 256])
def test_dense_stoc_is_embedding(N):
    plan = dft_plan(N)
    rng = np.random.default_rng(0)
    a = rng.normal(size=N)
    u = plan.pack(a)
    assert rel_err(plan.dense_stoc() @ u[bit_reverse_perm(N // 2)], plan.embed(a)) < 1e-12


@given(pow2, st.integers(0, 2 ** 31))
@settings(max_examples=20, deadline=None)
def test_stoc_ctos_inverse(N, seed):
    plan = dft_plan(N)
    x = np.array([1, 1j]) @ np.random.default_rng(seed).normal(size=(2, N // 2))
    assert rel_err(plan.ctos(plan.stoc(x)), x) < 1e-12
    assert rel_err(plan.stoc(plan.ctos(x)), x) < 1e-12


@given(pow2, st.integers(0, 2 ** 31))
@settings(max_examples=20, deadline=None)
def test_embed_unembed(N, seed):
    plan = dft_plan(N)
    a = np.random.default_rng(seed).normal(size=N)
    assert rel_err(plan.unembed(plan.embed(a)), a) < 1e-12


def test_embedding_is_multiplicative():
    N = 64
    plan = dft_plan(N)
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=N), rng.normal(size=N)
    assert rel_err(plan.embed(negacyclic_conv(a, b)), plan.embed(a) * plan.embed(b)) < 1e-12


@pytest.mark.parametrize("h", [1, 2, 8])
def test_stage_inverse_and_diagonals(h):
    n = 32
    rng = np.random.default_rng(h)
    x = rng.normal(size=n) + 1j * rng.normal(size=n)
    assert rel_err(apply_stage_inv(apply_stage(x, h), h), x) < 1e-13
    for inverse, f in ((False, apply_stage), (True, apply_stage_inv)):
        D = DiagonalMatrix(n, stage_diagonals(n, h, inverse))
        assert rel_err(D.apply(x), f(x, h)) < 1e-13


def test_stage_halves():
    assert stage_halves(1, 16) == [1, 2, 4, 8]
    assert stage_halves(4, 4) == []


def test_local_bitrev_involution():
    x = np.arange(32)
    for l in (1, 2, 8, 32):
        assert np.array_equal(local_bitrev(local_bitrev(x, l), l), x)


@pytest.mark.parametrize("l", [1, 2, 4, 16, 64, 128])
def test_local_dft_blocks(l):
    """Each slice of length l goes through the l-point slot transform of its own."""
    plan = dft_plan(256)
    small = dft_plan(2 * l)
    rng = np.random.default_rng(l)
    m = rng.normal(size=128) + 1j * rng.normal(size=128)
    got = plan.local_dft(m, l).reshape(-1, l)
    for j, blk in enumerate(m.reshape(-1, l)):
        want = small.dense_stoc() @ blk[bit_reverse_perm(l)] if l > 1 else blk
        assert rel_err(got[j], want) < 1e-12
    assert rel_err(plan.local_idft(plan.local_dft(m, l), l), m) < 1e-12


@given(st.sampled_from([16, 64, 256]), st.integers(0, 8), st.integers(0, 2 ** 31))
@settings(max_examples=40, deadline=None)
def test_product_law_twisted(N, k, seed):
    """Slotwise product of nested slot vectors is the per-slice product mod X^l - i."""
    plan = dft_plan(N)
    n = N // 2
    l = min(1 << k, n)
    rng = np.random.default_rng(seed)
    m1 = rng.normal(size=n) + 1j * rng.normal(size=n)
    m2 = rng.normal(size=n) + 1j * rng.normal(size=n)
    prod = nested_slots(plan, m1, l) * nested_slots(plan, m2, l)
    assert rel_err(plan.local_idft(prod, l), reference_local_conv(m1, m2, l)) < 1e-11


@given(st.sampled_from([16, 64, 256]), st.integers(1, 8), st.integers(0, 2 ** 31))
@settings(max_examples=40, deadline=None)
def test_product_law_negacyclic(N, k, seed):
    """Dense real slices of length 2l multiply negacyclically."""
    plan = dft_plan(N)
    L = min(1 << k, N)
    rng = np.random.default_rng(seed)
    r1, r2 = rng.normal(size=N), rng.normal(size=N)
    prod = nested_real_slots(plan, r1, L) * nested_real_slots(plan, r2, L)
    got = nested_real_decode_slots(plan, prod, L)
    assert rel_err(got, reference_local_conv(r1, r2, L, real=True)) < 1e-11


def test_full_slice_is_plain_encodings():
    """nested(n) is coefficient packing; nested(1) is slot packing."""
    N = 64
    plan = dft_plan(N)
    rng = np.random.default_rng(3)
    m = rng.normal(size=N // 2) + 1j * rng.normal(size=N // 2)
    assert rel_err(nested_slots(plan, m, 1), m) < 1e-14
    r = rng.normal(size=N)
    assert rel_err(plan.unembed(nested_real_slots(plan, r, N)), r) < 1e-12


def test_schoolbook_oracles():
    a = np.array([1.0, 2.0, 3.0])
    b = np.array([0.0, 0.0, 1.0])
    # x^2 * (1 + 2x + 3x^2) = x^2 + 2x^3 + 3x^4 = x^2 - 2 - 3x  mod x^3 + 1
    assert np.allclose(negacyclic_conv(a, b), [-2, -3, 1])
    assert np.allclose(twisted_conv(a, b), [2j, 3j, 1])


@given(st.integers(1, 6), st.integers(0, 2 ** 31))
@settings(max_examples=20, deadline=None)
def test_fold_unfold(k, seed):
    L = 2 << k
    m = np.random.default_rng(seed).normal(size=4 * L)
    z = fold(m, L)
    assert z.dtype.kind == "c" and z.size == 2 * L
    assert np.allclose(unfold(z, L), m)


@pytest.mark.parametrize("bad", [0, 3, 256])
def test_slice_length_checks(bad):
    plan = dft_plan(256)
    with pytest.raises(ValueError):
        nested_slots(plan, np.zeros(128), bad)


def test_tags():
    assert nested(4) == nested(4) and nested(4) != nested(8)
    with pytest.raises(ValueError):
        nested(3)


@pytest.mark.parametrize("L", [2, 8, 64, 256])
def test_encrypted_product_law(toy_ctx, L):
    """Encrypted nested ciphertext times nested plaintext gives per-slice negacyclic products."""
    enc, ev, dec = toy_ctx.encoder, toy_ctx.evaluator, toy_ctx.decryptor
    N = toy_ctx.params.ring_degree
    rng = np.random.default_rng(L)
    r1, r2 = rng.normal(size=N), rng.normal(size=N)
    ct = dec.encrypt_sk(enc.encode_nested_real(r1, L))
    out = ev.rescale(ev.mul_plain(ct, enc.encode_nested_real(r2, L, ct.level)))
    assert rel_err(dec.decrypt_decode(out), reference_local_conv(r1, r2, L, real=True)) < 2.0 ** -12
