import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ks_bound, random_circuit, rel_err
from nestfhe.ckks import (CkksContext, Ciphertext, Evaluator, LevelError, MissingKeyError, OpCounter, ScaleError,
                          TagError, conjugation_element, galois_element)
from nestfhe.encoding import COEFF, SLOT, nested
from nestfhe.ring import RnsPolynomial, preset, sample_gaussian, sample_ternary_hw

TRIALS = 100


def test_sk_roundtrip_precision(toy_ctx, rng):
    n = toy_ctx.params.slots
    worst = 0.0
    for _ in range(TRIALS):
        m = rng.uniform(-1, 1, n) + 1j * rng.uniform(-1, 1, n)
        ct = toy_ctx.decryptor.encrypt_sk(toy_ctx.encoder.encode_slots(m))
        worst = max(worst, rel_err(toy_ctx.decryptor.slots(ct), m))
    assert worst < 2.0 ** -20


def test_pk_roundtrip(toy_ctx, rng):
    n = toy_ctx.params.slots
    m = rng.uniform(-1, 1, n)
    assert rel_err(toy_ctx.decrypt(toy_ctx.encrypt_slots(m)).real, m) < 2.0 ** -16


@pytest.mark.parametrize("level", [0, 3, 9])
def test_roundtrip_every_level(toy_ctx, rng, level):
    m = rng.normal(size=toy_ctx.params.slots)
    ct = toy_ctx.encrypt_slots(m, level=level)
    assert ct.level == level and len(ct.b.moduli) == level + 1
    assert rel_err(toy_ctx.decrypt(ct).real, m) < 2.0 ** -14


def test_add_sub_const(toy_ctx, rng):
    ev = toy_ctx.evaluator
    n = toy_ctx.params.slots
    a, b = rng.normal(size=n), rng.normal(size=n)
    ca, cb = toy_ctx.encrypt_slots(a), toy_ctx.encrypt_slots(b)
    assert rel_err(toy_ctx.decrypt(ev.add(ca, cb)).real, a + b) < 2.0 ** -14
    assert rel_err(toy_ctx.decrypt(ev.sub(ca, cb)).real, a - b) < 2.0 ** -14
    assert rel_err(toy_ctx.decrypt(ev.negate(ca)).real, -a) < 2.0 ** -14
    got = toy_ctx.decrypt(ev.add_const(ca, 0.5 - 0.25j))
    assert rel_err(got, a + 0.5 - 0.25j) < 2.0 ** -14
    pt = toy_ctx.encoder.encode_slots(b)
    assert rel_err(toy_ctx.decrypt(ev.add_plain(ca, pt)).real, a + b) < 2.0 ** -14


def test_mul_and_rescale(toy_ctx, rng):
    ev = toy_ctx.evaluator
    n = toy_ctx.params.slots
    a, b = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
    ca, cb = toy_ctx.encrypt_slots(a), toy_ctx.encrypt_slots(b)
    prod = ev.rescale(ev.mul(ca, cb))
    assert prod.level == ca.level - 1
    assert math.isclose(prod.scale, ca.scale * cb.scale / toy_ctx.params.moduli[ca.level])
    assert rel_err(toy_ctx.decrypt(prod).real, a * b) < 2.0 ** -12
    pp = ev.rescale(ev.mul_plain(ca, toy_ctx.encoder.encode_slots(b)))
    assert rel_err(toy_ctx.decrypt(pp).real, a * b) < 2.0 ** -12
    sq = ev.rescale(ev.square(ca))
    assert rel_err(toy_ctx.decrypt(sq).real, a * a) < 2.0 ** -12
    cm = ev.rescale(ev.mul_const(ca, 0.3))
    assert rel_err(toy_ctx.decrypt(cm).real, 0.3 * a) < 2.0 ** -12


def test_mul_monomial_half_is_times_i(toy_ctx, rng):
    n = toy_ctx.params.slots
    m = rng.normal(size=n) + 1j * rng.normal(size=n)
    ct = toy_ctx.encrypt_slots(m)
    got = toy_ctx.decrypt(toy_ctx.evaluator.mul_monomial(ct, n))
    assert rel_err(got, 1j * m) < 2.0 ** -14


def test_rotation_relation_and_noise(toy_ctx, rng):
    """HRot_r realises np.roll(m, -r) and adds at most one key-switch error."""
    ev, dec = toy_ctx.evaluator, toy_ctx.decryptor
    P = toy_ctx.params
    n = P.slots
    bound = ks_bound(P)
    worst_err, worst_ks = 0.0, 0
    for _ in range(TRIALS):
        r = int(rng.integers(1, n))
        m = rng.uniform(-1, 1, n) + 1j * rng.uniform(-1, 1, n)
        ct = dec.encrypt_sk(toy_ctx.encoder.encode_slots(m))
        rot = ev.rotate(ct, r)
        worst_err = max(worst_err, rel_err(dec.slots(rot), np.roll(m, -r)))
        g = galois_element(r, P.ring_degree)
        diff = dec.decrypt(rot).poly - dec.decrypt(ct).poly.automorphism(g)
        worst_ks = max(worst_ks, max(abs(v) for v in diff.to_ints()))
    assert worst_err < 2.0 ** -16
    assert worst_ks <= bound


def test_conjugation(toy_ctx, rng):
    ev, dec = toy_ctx.evaluator, toy_ctx.decryptor
    n = toy_ctx.params.slots
    for _ in range(10):
        m = rng.normal(size=n) + 1j * rng.normal(size=n)
        ct = dec.encrypt_sk(toy_ctx.encoder.encode_slots(m))
        assert rel_err(dec.slots(ev.conjugate(ct)), np.conj(m)) < 2.0 ** -16


def test_rotation_composes(toy_ctx, rng):
    ev, dec = toy_ctx.evaluator, toy_ctx.decryptor
    n = toy_ctx.params.slots
    m = rng.normal(size=n)
    ct = dec.encrypt_sk(toy_ctx.encoder.encode_slots(m))
    a = ev.rotate(ev.rotate(ct, 3), 7)
    b = ev.rotate(ct, 10)
    assert rel_err(dec.slots(a), dec.slots(b)) < 2.0 ** -16
    assert ev.rotate(ct, n) is ct


def test_key_switching_relation(toy):
    """A ciphertext under s' switched to s decrypts to the same plaintext plus a bounded error."""
    ctx = CkksContext(toy, seed=5)
    kg, ev, dec = ctx.keygen, ctx.evaluator, ctx.decryptor
    N = toy.ring_degree
    rng = np.random.default_rng(9)
    full = toy.moduli + toy.aux_moduli
    bound = ks_bound(toy)
    worst = 0
    for t in range(TRIALS):
        if t % 25 == 0:
            s2 = sample_ternary_hw(rng, N, toy.hamming_weight)
            s2p = RnsPolynomial.from_ints(s2, full).to_ntt()
            key = kg.switch_key(s2p, "s'")
        level = int(rng.integers(0, toy.max_level + 1))
        qs = toy.moduli_at(level)
        m = RnsPolynomial.from_ints(rng.integers(-(1 << 20), 1 << 20, N), qs).to_ntt()
        e = RnsPolynomial.from_ints(sample_gaussian(rng, N, toy.sigma), qs).to_ntt()
        a = RnsPolynomial.from_ints([int(x) for x in rng.integers(0, qs[0], N)], qs).to_ntt()
        ct = Ciphertext(m + e + a * s2p.keep(qs), a, level, 1.0, COEFF)
        out = ev.key_switch(ct, key)
        diff = dec.decrypt(out).poly - (m + e)
        worst = max(worst, max(abs(v) for v in diff.to_ints()))
    assert worst <= bound


def test_relinearization_relation(toy_ctx, rng):
    """Dec(mul(x, y)) equals Dec(x) * Dec(y) up to one key-switch error."""
    ev, dec = toy_ctx.evaluator, toy_ctx.decryptor
    P = toy_ctx.params
    n = P.slots
    for _ in range(10):
        x = dec.encrypt_sk(toy_ctx.encoder.encode_slots(rng.uniform(-1, 1, n), level=3))
        y = dec.encrypt_sk(toy_ctx.encoder.encode_slots(rng.uniform(-1, 1, n), level=3))
        diff = dec.decrypt(ev.mul(x, y)).poly - dec.decrypt(x).poly * dec.decrypt(y).poly
        assert max(abs(v) for v in diff.to_ints()) <= ks_bound(P)


def test_depth5_random_circuits(toy_ctx):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(TRIALS):
        x, ref = random_circuit(toy_ctx, rng)
        worst = max(worst, rel_err(toy_ctx.decrypt(x).real, ref))
    assert worst < 2.0 ** -12


def test_mod_raise_adds_multiple_of_q0(toy_ctx, rng):
    ev, dec = toy_ctx.evaluator, toy_ctx.decryptor
    P = toy_ctx.params
    q0 = P.moduli[0]
    m = rng.uniform(-1, 1, P.slots)
    ct = dec.encrypt_sk(toy_ctx.encoder.encode_slots(m, level=0))
    up = ev.mod_raise(ct)
    assert up.level == P.max_level
    before = dec.decrypt(ct).poly.to_ints()
    after = dec.decrypt(up).poly.to_ints()
    I = [(a - b) / q0 for a, b in zip(after, before)]
    assert all(float(v).is_integer() for v in I)
    assert max(abs(v) for v in I) <= P.hamming_weight / 2 + 1


def test_errors(toy_ctx, rng):
    ev = toy_ctx.evaluator
    n = toy_ctx.params.slots
    a = toy_ctx.encrypt_slots(rng.normal(size=n))
    b = toy_ctx.encrypt_slots(rng.normal(size=n), level=3)
    with pytest.raises(LevelError):
        ev.add(a, b)
    with pytest.raises(ScaleError):
        ev.add(a, ev.mul_integer(a, 3))
    with pytest.raises(TagError):
        ev.add(a, a.retag(nested(4)))
    with pytest.raises(TagError):
        ev.rotate(a.retag(COEFF), 1)
    z = toy_ctx.encrypt_slots(rng.normal(size=n), level=0)
    with pytest.raises(LevelError):
        ev.rescale(z)
    with pytest.raises(LevelError):
        ev.mul(z, z)
    with pytest.raises(LevelError):
        ev.mod_raise(a)
    with pytest.raises(LevelError):
        ev.drop_level(b, 5)
    bare = Evaluator(toy_ctx.params, public_key=toy_ctx.public_key)
    with pytest.raises(MissingKeyError):
        bare.rotate(a, 1)
    with pytest.raises(MissingKeyError):
        bare.mul(a, a)


def test_counter_accounting(toy, rng):
    ctx = CkksContext(toy, seed=1, rotations=[1])
    ev = ctx.evaluator
    n = toy.slots
    a = ctx.encrypt_slots(rng.normal(size=n))
    b = ev.counter.snapshot()
    x = ev.rescale(ev.mul_plain(ev.rotate(a, 1), ctx.encoder.encode_slots(np.ones(n))))
    ev.add(x, x)
    d = ev.counter.since(b)
    assert (d["hrot"], d["pmult"], d["rescale"], d["levels_consumed"], d["hadd"]) == (1, 1, 1, 1, 1)
    ev.counter.reset()
    assert all(v == 0 for v in ev.counter.snapshot().values())


def test_counter_is_thread_safe():
    import threading
    c = OpCounter()
    ts = [threading.Thread(target=lambda: [c.bump("pmult") for _ in range(1000)]) for _ in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert c.pmult == 8000


def test_galois_elements():
    N = 256
    assert galois_element(0, N) == 1
    assert galois_element(1, N) == 5
    assert galois_element(N // 2, N) == 1
    assert conjugation_element(N) == 2 * N - 1


def test_encode_decode_tags(toy_ctx, rng):
    enc = toy_ctx.encoder
    N = toy_ctx.params.ring_degree
    m = rng.normal(size=N)
    assert rel_err(enc.decode(enc.encode_coeffs(m)), m) < 2.0 ** -25
    z = rng.normal(size=N // 2) + 1j * rng.normal(size=N // 2)
    assert rel_err(enc.decode(enc.encode_slots(z)), z) < 2.0 ** -25
    for L in (2, 16, N):
        pt = enc.encode_nested_real(m, L)
        assert pt.tag == nested(L // 2)
        assert rel_err(enc.decode(pt), m) < 2.0 ** -25


# at level 1 the product |c m| * scale * q_1 must stay below q_0 / 2, so start at 2
@given(st.integers(2, 9), st.floats(-4, 4))
@settings(max_examples=20, deadline=None)
def test_const_mult_property(level, c):
    P = preset("toy")
    ctx = _shared(P)
    m = np.linspace(-1, 1, P.slots)
    x = ctx.encrypt_slots(m, level=level)
    if abs(c) < 1e-6:
        return
    y = ctx.evaluator.rescale(ctx.evaluator.mul_const(x, c))
    assert rel_err(ctx.decrypt(y).real, c * m) < 2.0 ** -12


_CTX = {}


def _shared(P):
    if P not in _CTX:
        _CTX[P] = CkksContext(P, seed=3)
    return _CTX[P]
