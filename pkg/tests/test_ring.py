import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sympy import isprime

from nestfhe.encoding import negacyclic_conv
from nestfhe.ring import (ParameterError, RingParams, RnsPolynomial, bit_reverse, bit_reverse_perm, describe_preset,
                          find_primes, monomial, params_from_config, preset, sample_gaussian, sample_ternary_hw)

N = 64
Q = tuple(find_primes(30, 3, N))
small_ints = st.lists(st.integers(-50, 50), min_size=N, max_size=N)


def schoolbook(a, b):
    out = [0] * N
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            k = i + j
            if k < N:
                out[k] += x * y
            else:
                out[k - N] -= x * y
    return out


def test_find_primes_are_ntt_friendly():
    ps = find_primes(40, 5, 1 << 12)
    assert len(set(ps)) == 5
    for p in ps:
        assert isprime(p) and p % (1 << 13) == 1 and p.bit_length() == 40
    assert ps == sorted(ps, reverse=True)


def test_find_primes_exclude():
    a = find_primes(30, 2, N)
    b = find_primes(30, 1, N, exclude=a)
    assert b[0] not in a and b[0] < min(a)


def test_bit_reverse():
    assert [bit_reverse(i, 3) for i in range(8)] == list(bit_reverse_perm(8))
    p = bit_reverse_perm(64)
    assert np.array_equal(p[p], np.arange(64))


@given(small_ints)
@settings(max_examples=30, deadline=None)
def test_ntt_roundtrip(a):
    p = RnsPolynomial.from_ints(a, Q)
    assert p.to_ntt().to_coeff().to_ints() == a


@given(small_ints, small_ints)
@settings(max_examples=30, deadline=None)
def test_ntt_product_is_negacyclic(a, b):
    pa, pb = RnsPolynomial.from_ints(a, Q).to_ntt(), RnsPolynomial.from_ints(b, Q).to_ntt()
    assert (pa * pb).to_coeff().to_ints() == schoolbook(a, b)


def test_product_matches_float_oracle(rng):
    a = rng.integers(-9, 10, N)
    b = rng.integers(-9, 10, N)
    got = (RnsPolynomial.from_ints(a, Q) * RnsPolynomial.from_ints(b, Q)).to_ints()
    assert got == [int(v) for v in negacyclic_conv(a, b)]


def test_add_sub_neg():
    a = list(range(N))
    b = [3 * i - 7 for i in range(N)]
    pa, pb = RnsPolynomial.from_ints(a, Q), RnsPolynomial.from_ints(b, Q)
    assert (pa + pb).to_ints() == [x + y for x, y in zip(a, b)]
    assert (pa - pb).to_ints() == [x - y for x, y in zip(a, b)]
    assert (-pa).to_ints() == [-x for x in a]


@given(st.lists(st.integers(-(1 << 80), 1 << 80), min_size=N, max_size=N))
@settings(max_examples=20, deadline=None)
def test_crt_roundtrip_big(a):
    assert RnsPolynomial.from_ints(a, Q).to_ints() == a


def test_to_float_matches_to_ints(rng):
    a = [int(v) for v in rng.integers(-(1 << 60), 1 << 60, N)]
    p = RnsPolynomial.from_ints(a, Q)
    assert np.allclose(p.to_float(), np.array(a, dtype=float), rtol=1e-12)


def test_from_float_rounds(rng):
    x = rng.normal(size=N) * 1e6
    assert RnsPolynomial.from_float(x, Q).to_ints() == [int(v) for v in np.rint(x)]


@given(st.lists(st.integers(-(1 << 55), 1 << 55), min_size=N, max_size=N))
@settings(max_examples=20, deadline=None)
def test_rescale_rounds_division(a):
    ql = Q[-1]
    got = RnsPolynomial.from_ints(a, Q).rescale_last().to_ints()
    for g, v in zip(got, a):
        assert abs(g - v / ql) <= 0.5 + 1e-9


def test_rescale_in_ntt_domain(rng):
    a = [int(v) for v in rng.integers(-(1 << 50), 1 << 50, N)]
    p = RnsPolynomial.from_ints(a, Q)
    assert p.to_ntt().rescale_last().to_coeff().to_ints() == p.rescale_last().to_ints()


def test_fast_base_conversion_error_is_multiple_of_q(rng):
    dst = tuple(find_primes(31, 2, N))
    a = [int(v) for v in rng.integers(-(1 << 40), 1 << 40, N)]
    src = RnsPolynomial.from_ints(a, Q)
    conv = src.to_basis(dst)
    Qp = math.prod(Q)
    Pp = math.prod(dst)
    for got, want in zip(conv.to_ints(), a):
        diff = (got - want) % Pp
        # x + u*Q with 0 <= u < len(Q)
        assert any(diff == (u * Qp) % Pp for u in range(-1, len(Q) + 1))


@pytest.mark.parametrize("k", [0, 1, 5, N - 1, N, N + 3, 2 * N - 1])
def test_monomial_multiplication(k, rng):
    a = [int(v) for v in rng.integers(-5, 6, N)]
    p = RnsPolynomial.from_ints(a, Q)
    assert p.mul_monomial(k).to_ints() == (p * monomial(N, k, Q)).to_ints()


@pytest.mark.parametrize("g", [5, 25, 2 * N - 1, 3])
def test_automorphism(g, rng):
    a = [int(v) for v in rng.integers(-5, 6, N)]
    p = RnsPolynomial.from_ints(a, Q)
    want = [0] * N
    for i, v in enumerate(a):
        j = i * g % (2 * N)
        if j < N:
            want[j] += v
        else:
            want[j - N] -= v
    assert p.automorphism(g).to_ints() == want
    assert p.to_ntt().automorphism(g).to_coeff().to_ints() == want


def test_automorphism_is_ring_homomorphism(rng):
    a = RnsPolynomial.from_ints(rng.integers(-5, 6, N), Q)
    b = RnsPolynomial.from_ints(rng.integers(-5, 6, N), Q)
    g = 5
    assert (a * b).automorphism(g).to_ints() == (a.automorphism(g) * b.automorphism(g)).to_ints()


def test_mismatched_moduli_rejected():
    a = RnsPolynomial.from_ints([1] * N, Q)
    b = RnsPolynomial.from_ints([1] * N, Q[:2])
    with pytest.raises(ValueError):
        a + b


def test_samplers(rng):
    s = sample_ternary_hw(rng, 256, 32)
    assert np.count_nonzero(s) == 32 and set(np.unique(s)) <= {-1, 0, 1}
    e = sample_gaussian(rng, 1 << 14, 3.2)
    assert abs(e.std() - 3.2) < 0.2 and e.dtype.kind == "i"


def test_presets():
    d = preset("desk")
    assert d.ring_degree == 1 << 13 and d.max_level == 9 and not d.secure
    s1 = preset("set1")
    assert s1.secure and s1.ring_degree == 1 << 16
    assert not preset("set1", 1 << 10).secure
    assert describe_preset("set2")["levels"] == 19
    with pytest.raises(ParameterError):
        preset("nope")


def test_params_validation():
    qs = tuple(find_primes(30, 2, N))
    ps = tuple(find_primes(31, 1, N))
    RingParams(N, qs, ps, 2.0 ** 30)
    with pytest.raises(ParameterError):
        RingParams(N, qs, qs[:1], 2.0 ** 30)
    with pytest.raises(ParameterError):
        RingParams(48, qs, ps, 2.0 ** 30)
    with pytest.raises(ParameterError):
        RingParams(N, (qs[0], 7683), ps, 2.0 ** 30)
    with pytest.raises(ParameterError):
        RingParams(N, qs, (), 2.0 ** 30)


def test_params_from_config():
    text = """
    # small set
    ring_degree = 1024
    moduli_bits = 50, 30x4 ; 51x2
    delta_log2 = 30
    hamming_weight = 32
    """
    p = params_from_config(text)
    assert p.ring_degree == 1024 and p.max_level == 4 and p.alpha == 2 and p.dnum == 3
    assert [q.bit_length() for q in p.moduli] == [50, 30, 30, 30, 30]
    assert p.scale == 2.0 ** 30 and p.hamming_weight == 32
    q = params_from_config("ring_degree=1024\nmoduli_bits=50,30x4\ndnum=5")
    assert q.dnum == 5 and q.alpha == 1


@pytest.mark.parametrize("text", [
    "ring_degree=1024",
    "ring_degree=1024\nmoduli_bits=50,30\nbogus=1",
    "ring_degree 1024",
    "ring_degree=1024\nmoduli_bits=50,30x3;51\ndnum=2",
])
def test_params_from_config_errors(text):
    with pytest.raises(ParameterError):
        params_from_config(text)


def test_digits_cover_chain():
    p = preset("desk")
    flat = [q for d in p.digits() for q in d]
    assert tuple(flat) == p.moduli
    assert math.prod(p.aux_moduli) >= max(p.digit_products())
