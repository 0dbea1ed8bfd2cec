import numpy as np
import pytest
from scipy import stats

from heinfer import bfv
from heinfer.ring import (Modulus, NttTables, ParameterError, RingPoly, RnsBase, find_ntt_primes,
                          negacyclic_mul, ntt_forward, ntt_inverse, sample_gaussian, sample_ternary,
                          sample_uniform, default_rng)

from oracles import eval_poly, schoolbook_negacyclic


def rand_poly(rng, n, q):
    return RingPoly(rng.integers(0, q, n, dtype=np.uint64), Modulus(q))


def test_modulus_validation():
    assert Modulus(97).value == 97
    for bad in (1, 2, 91, 2 ** 61 - 1):
        with pytest.raises(ParameterError):
            Modulus(bad)


def test_tables_root_order():
    for q, n in ((97, 16), (17, 8), (65537, 32)):
        t = NttTables.build(q, n)
        assert pow(t.root, 2 * n, q) == 1
        assert pow(t.root, n, q) == q - 1


def test_non_ntt_modulus_rejected():
    with pytest.raises(ParameterError):
        NttTables.build(17, 16)  # 17 != 1 mod 32
    with pytest.raises(ParameterError):
        ntt_forward(RingPoly(np.zeros(16, dtype=np.uint64), Modulus(17)))


def test_zero_and_constant():
    q, n = 97, 16
    z = ntt_forward(RingPoly(np.zeros(n, dtype=np.uint64), Modulus(q)))
    assert not z.coeffs.any()
    one = np.zeros(n, dtype=np.uint64)
    one[0] = 1
    assert np.all(ntt_forward(RingPoly(one, Modulus(q))).coeffs == 1)


def test_roundtrip_n16_q97(rng):
    for _ in range(50):
        p = rand_poly(rng, 16, 97)
        assert ntt_inverse(ntt_forward(p)) == p


def test_forward_is_evaluation_at_odd_powers(rng):
    """Output j is p(root**exponents[j]) for an independent Horner evaluation."""
    for q, n in ((97, 16), (17, 8)):
        t = NttTables.build(q, n)
        p = rand_poly(rng, n, q)
        f = ntt_forward(p, t).coeffs
        for j in range(n):
            assert int(f[j]) == eval_poly(p.coeffs, pow(t.root, int(t.exponents[j]), q), q)
        assert sorted(t.exponents.tolist()) == list(range(1, 2 * n, 2))


def test_roundtrip_all_default_primes(rng):
    for params in (bfv.paper_params(bfv.PAPER_T0), bfv.paper_params(bfv.PAPER_T1)):
        primes = params.q_primes + (params.special_prime, params.t)
        base = RnsBase(primes, params.n)
        a = np.stack([rng.integers(0, q, params.n, dtype=np.uint64) for q in primes])
        assert np.array_equal(base.intt(base.ntt(a)), a)


@pytest.mark.parametrize("n", [8, 16, 32])
def test_mul_matches_schoolbook(rng, n):
    q = find_ntt_primes(30, n, 1)[0]
    for _ in range(100):
        a, b = rand_poly(rng, n, q), rand_poly(rng, n, q)
        assert negacyclic_mul(a, b).coeffs.tolist() == schoolbook_negacyclic(a.coeffs, b.coeffs, q)


def test_mul_n8_q17(rng):
    for _ in range(20):
        a, b = rand_poly(rng, 8, 17), rand_poly(rng, 8, 17)
        assert negacyclic_mul(a, b).coeffs.tolist() == schoolbook_negacyclic(a.coeffs, b.coeffs, 17)


def test_mul_identities(rng):
    n, q = 16, 97
    a = rand_poly(rng, n, q)
    one = np.zeros(n, dtype=np.uint64)
    one[0] = 1
    assert negacyclic_mul(a, RingPoly(one, Modulus(q))) == a
    top = np.zeros(n, dtype=np.uint64)
    top[n - 1] = 1
    x = np.zeros(n, dtype=np.uint64)
    x[1] = 1
    prod = negacyclic_mul(RingPoly(top, Modulus(q)), RingPoly(x, Modulus(q)))
    assert prod.coeffs.tolist() == [q - 1] + [0] * (n - 1)


def test_mul_parameter_mismatch():
    with pytest.raises(ParameterError):
        negacyclic_mul(RingPoly(np.zeros(8, dtype=np.uint64), Modulus(17)),
                       RingPoly(np.zeros(8, dtype=np.uint64), Modulus(97)))


def test_large_prime_mul_matches_python_ints(rng):
    """50-bit primes exercise the float-quotient reduction near its limit."""
    n = 64
    q = find_ntt_primes(50, n, 1)[0]
    a, b = rand_poly(rng, n, q), rand_poly(rng, n, q)
    assert negacyclic_mul(a, b).coeffs.tolist() == schoolbook_negacyclic(a.coeffs, b.coeffs, q)


def test_ternary_support():
    rng = default_rng(1)
    q = 97
    p = RingPoly.from_signed(sample_ternary(4096, rng), Modulus(q))
    assert set(np.unique(p.coeffs).tolist()) <= {q - 1, 0, 1}


def test_gaussian_stddev():
    g = sample_gaussian(1 << 16, default_rng(2), 3.2)
    assert abs(g.std() - 3.2) / 3.2 < 0.10
    assert np.abs(g).max() <= 6 * 3.2


def test_uniform_chi_square():
    q = 97
    u = sample_uniform(1 << 16, q, default_rng(3))
    counts = np.bincount(u.astype(np.int64), minlength=q)
    assert stats.chisquare(counts).pvalue > 0.001
