import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rel_err
from nestfhe.linalg import (DiagonalMatrix, PlanError, matvec_bsgs, matvec_naive, plan_bsgs, plan_for,
                            rect_diagonals, rotate_sum, rotate_sum_keys, rotation_keys)


def cplx(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


@given(st.integers(1, 300))
def test_plan_bsgs_is_minimal(M):
    p = plan_bsgs(M)
    assert p.baby * p.giant >= M
    best = min(B + -(-M // B) for B in range(1, M + 1))
    assert p.baby + p.giant == best
    assert len(p.rotations) == p.predicted_rotations


def test_plan_bsgs_rejects_empty():
    with pytest.raises(PlanError):
        plan_bsgs(0)


@given(st.integers(0, 2 ** 31), st.sampled_from([4, 16, 64]))
@settings(max_examples=25, deadline=None)
def test_dense_roundtrip_and_apply(seed, M):
    rng = np.random.default_rng(seed)
    W = cplx(rng, M, M)
    D = DiagonalMatrix.from_dense(W)
    x = cplx(rng, M)
    assert np.allclose(D.to_dense(), W)
    assert rel_err(D.apply(x), W @ x) < 1e-12


def test_product_of_diagonal_matrices(rng):
    A, B = cplx(rng, 16, 16), cplx(rng, 16, 16)
    got = DiagonalMatrix.from_dense(A) @ DiagonalMatrix.from_dense(B)
    assert np.allclose(got.to_dense(), A @ B)


def test_from_mapping_is_permutation(rng):
    M = 32
    perm = rng.permutation(M)
    D = DiagonalMatrix.from_mapping(M, np.arange(M), perm)
    x = cplx(rng, M)
    assert np.allclose(D.apply(x), x[perm])


def test_pruned_and_identity():
    D = DiagonalMatrix(8, {0: np.ones(8), 3: np.full(8, 1e-20)})
    assert D.pruned().offsets == [0]
    assert np.allclose(DiagonalMatrix.identity(8).to_dense(), np.eye(8))
    with pytest.raises(ValueError):
        DiagonalMatrix(8, {0: np.ones(4)})
    with pytest.raises(ValueError):
        DiagonalMatrix.from_dense(np.ones((2, 3)))


@pytest.mark.parametrize("M", [8, 64, 128])
def test_bsgs_matches_naive_and_float(toy_ctx, M):
    ev, enc, dec = toy_ctx.evaluator, toy_ctx.encoder, toy_ctx.decryptor
    rng = np.random.default_rng(M)
    n = toy_ctx.params.slots
    W = cplx(rng, M, M) / np.sqrt(M)
    x = cplx(rng, M)
    D = DiagonalMatrix.from_dense(W)
    ct = dec.encrypt_sk(enc.encode_slots(np.tile(x, n // M)))
    want = np.tile(W @ x, n // M)
    a = dec.decrypt_decode(matvec_naive(ev, ct, D))
    before = ev.counter.snapshot()
    plan = plan_for(D)
    b = dec.decrypt_decode(matvec_bsgs(ev, ct, D, plan))
    used = ev.counter.since(before)["hrot"]
    assert rel_err(a, want) < 2.0 ** -12
    assert rel_err(b, want) < 2.0 ** -12
    assert used == plan.predicted_rotations == len(plan.rotations)


def test_bsgs_sparse_offsets(toy_ctx):
    ev, enc, dec = toy_ctx.evaluator, toy_ctx.encoder, toy_ctx.decryptor
    n = toy_ctx.params.slots
    rng = np.random.default_rng(5)
    D = DiagonalMatrix(n, {k: cplx(rng, n) for k in (0, 1, 2, n - 1, n - 2, 40)})
    x = cplx(rng, n)
    ct = dec.encrypt_sk(enc.encode_slots(x))
    plan = plan_for(D)
    assert set(rotation_keys(D, plan)) == set(plan.rotations)
    got = dec.decrypt_decode(matvec_bsgs(ev, ct, D, plan))
    assert rel_err(got, D.apply(x)) < 2.0 ** -12


@pytest.mark.parametrize("rows,cols", [(10, 128), (3, 50), (32, 128)])
def test_rect_diagonals_plain(rows, cols, rng):
    n = 128
    W = rng.normal(size=(rows, cols))
    D, d = rect_diagonals(W, n)
    x = np.zeros(n)
    x[:cols] = rng.normal(size=cols)
    z = D.apply(x)
    y = z.reshape(-1, d).sum(axis=0)[:rows]
    assert rel_err(y, W @ x[:cols]) < 1e-12
    assert len(D) <= d


def test_rect_diagonals_errors():
    with pytest.raises(PlanError):
        rect_diagonals(np.ones((2, 9)), 8)


def test_rect_encrypted_with_rotate_sum(toy_ctx):
    ev, enc, dec = toy_ctx.evaluator, toy_ctx.encoder, toy_ctx.decryptor
    n = toy_ctx.params.slots
    rng = np.random.default_rng(9)
    W = rng.normal(size=(10, n)) / n
    x = rng.normal(size=n)
    D, d = rect_diagonals(W, n)
    ct = matvec_bsgs(ev, dec.encrypt_sk(enc.encode_slots(x)), D)
    out = dec.decrypt_decode(rotate_sum(ev, ct, d, n // d))
    assert rel_err(out[:10], W @ x) < 2.0 ** -12


def test_rotate_sum_keys():
    assert rotate_sum_keys(4, 8) == (4, 8, 16)
    assert rotate_sum_keys(1, 1) == ()
