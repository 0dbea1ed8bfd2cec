import math

import numpy as np
import pytest

from heinfer.fixed_point import (CapacityError, PlainModuliPair, RangeError, ScalingConfig,
                                 SignedResidues, TwinBackends, capacity_check, crt_recombine,
                                 crt_recombine_array, crt_split, crt_split_array, descale_output,
                                 ensure_capacity, required_output_bits, scale_array, scale_value)
from heinfer.matmul import encode_inputs, encode_weights, matmul, unpack_results

from oracles import crt_pair, exact_matmul

PAIR = PlainModuliPair()
CFG = ScalingConfig()


def test_defaults():
    assert (CFG.s_x, CFG.s_w, CFG.input_int_bits) == (6, 14, 8)
    assert (PAIR.t0, PAIR.t1) == (1073872897, 114689)
    assert 46.7 < PAIR.capacity_bits < 46.9
    with pytest.raises(ValueError):
        ScalingConfig(s_x=-1)
    with pytest.raises(ValueError):
        PlainModuliPair(6, 9)


def test_scale_examples():
    assert scale_value(1.5, 6) == 96
    assert scale_value(0.25, 14) == 4096
    assert scale_value(-0.5, 20) == -524288


def test_scale_rounds_half_away_from_zero():
    assert scale_value(2.5, 0) == 3
    assert scale_value(-2.5, 0) == -3
    assert scale_value(0.49, 0) == 0
    assert scale_array([2.5, -2.5, 1.5, -0.5], 0).tolist() == [3, -3, 2, -1]


def test_scale_limit():
    with pytest.raises(RangeError):
        scale_value(1.0, 47, limit=PAIR.half_range)
    with pytest.raises(RangeError):
        scale_value(float("inf"), 3)
    with pytest.raises(RangeError):
        scale_array([1.0, 2.0], 10, limit=1024)


def test_required_bits_examples():
    assert required_output_bits(40960, CFG) == 44
    assert required_output_bits(1, CFG) == 28
    assert required_output_bits(43734, CFG) == 44
    with pytest.raises(ValueError):
        required_output_bits(0, CFG)


def test_required_bits_monotone_and_matches_log():
    prev = 0
    for f in range(1, 70000, 37):
        bits = required_output_bits(f, CFG)
        assert bits >= prev
        assert bits == 28 + math.ceil(math.log2(f))
        prev = bits


def test_capacity_examples():
    rep = capacity_check(40960, CFG, PAIR)
    assert rep.ok and rep.available_bits == 46 and rep.required_bits + 1 == 45
    assert not capacity_check(40960, CFG, PAIR.t0).ok
    t1 = capacity_check(4, CFG, PAIR.t1)
    assert not t1.ok and t1.deficit == 31 - 16
    with pytest.raises(CapacityError, match="short by"):
        ensure_capacity(40960, CFG, (PAIR.t0,))
    ensure_capacity(40960, CFG, PAIR.moduli)


def test_crt_examples():
    assert crt_split(5) == SignedResidues(5, 5)
    assert crt_split(-3) == SignedResidues(PAIR.t0 - 3, PAIR.t1 - 3)
    assert crt_recombine(SignedResidues(5, 5)) == 5
    assert crt_recombine(crt_split(-3)) == -3
    r = crt_split(2 ** 43)
    assert (r.r0, r.r1) == (2 ** 43 % PAIR.t0, 2 ** 43 % PAIR.t1)
    assert crt_pair(r.r0, r.r1, PAIR.t0, PAIR.t1) == 2 ** 43
    assert crt_recombine(r) == 2 ** 43


def test_crt_boundaries():
    edge = PAIR.product // 2 - 1
    for v in (edge, -edge, 0, 1, -1, 2 ** 44, -(2 ** 44)):
        assert crt_recombine(crt_split(v)) == v
    with pytest.raises(RangeError):
        crt_split(PAIR.half_range)
    with pytest.raises(RangeError):
        crt_split(-PAIR.half_range)
    arr = np.array([edge, -edge, 0, 7, -7], dtype=np.int64)
    assert np.array_equal(crt_recombine_array(*crt_split_array(arr)), arr)


def test_crt_array_matches_scalar(rng):
    v = rng.integers(-PAIR.half_range + 1, PAIR.half_range, 5000)
    r0, r1 = crt_split_array(v)
    assert np.array_equal(crt_recombine_array(r0, r1), v)
    for x in v[:200]:
        assert crt_recombine(crt_split(int(x))) == int(x)


def test_descale_examples():
    assert descale_output(1048576, CFG) == 1.0
    assert descale_output(-524288, CFG) == -0.5
    assert np.allclose(descale_output(np.array([1048576, 0]), CFG), [1.0, 0.0])


def test_descale_within_quantization_bound(rng):
    for f in (10, 1000, 40960):
        x = rng.uniform(0, 256, f)
        w = rng.uniform(-1, 1, f) / f
        xq = scale_array(x, CFG.s_x)
        wq = scale_array(w, CFG.s_w)
        got = descale_output(int(np.dot(xq.astype(object), wq.astype(object))), CFG)
        want = float(np.dot(x, w))
        bound = f * 2.0 ** -CFG.s_w * 256 + f * 2.0 ** -CFG.s_x * np.abs(w).max()
        assert abs(got - want) <= bound


def test_twin_requires_matching_degree(small_twins):
    a = small_twins[8][0][0]
    b = small_twins[16][0][0]
    with pytest.raises(ValueError):
        TwinBackends([a, b])


@pytest.mark.parametrize("f", [10, 1000, 40960])
def test_twin_execution_matches_integer_dot(paper_backends, paper_keys, rng, f):
    twin = TwinBackends(paper_backends)
    x = rng.integers(0, 1 << 14, (1, f))
    w = rng.integers(-(1 << 14), 1 << 14, (f, 1))
    X = encode_inputs(x, twin, [k.public for k in paper_keys])
    Y = matmul(X, encode_weights(w, twin), None, twin, [k.galois for k in paper_keys], cfg=CFG)
    got = unpack_results(Y, twin, [k.secret for k in paper_keys])
    want = exact_matmul(x.tolist(), w.tolist())
    assert got.tolist() == want
    if f == 40960:
        # the result does not fit the larger modulus alone
        assert abs(want[0][0]) > PAIR.t0 // 2
