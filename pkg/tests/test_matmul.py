import math

import numpy as np
import pytest

from heinfer import bfv
from heinfer.fixed_point import CapacityError, ScalingConfig, TwinBackends
from heinfer.matmul import (DimensionError, PackedAccumulator, baseline_matmul,
                            chunk_count, encode_bias, encode_inputs, encode_weights, matmul,
                            packed_ciphertext_count, read_counters, unoccupied_slots,
                            unpack_baseline, unpack_results)
from heinfer.ring import default_rng

from oracles import exact_matmul


def keys_of(ks):
    return [k.public for k in ks], [k.galois for k in ks], [k.secret for k in ks]


def run(twin, ks, X, W, b=None, **kw):
    pk, gk, sk = keys_of(ks)
    B = None if b is None else encode_bias(b, twin)
    Y = matmul(encode_inputs(X, twin, pk), encode_weights(W, twin), B, twin, gk, **kw)
    return Y, unpack_results(Y, twin, sk)


def random_case(rng, n_rows, f, n_out, lo=-64, hi=64):
    X = rng.integers(0, 64, (n_rows, f))
    W = rng.integers(lo, hi, (f, n_out))
    b = rng.integers(-1000, 1000, n_out)
    return X, W, b


@pytest.fixture(scope="module")
def t97():
    be = bfv.BfvBackend(bfv.test_params(8, 97))
    return TwinBackends([be]), [be.keygen(default_rng(3))]


def test_example_2x2(t97):
    twin, ks = t97
    X = [[1, 2, 3], [4, 5, 6]]
    W = [[1, 0], [0, 1], [1, 1]]
    Y, got = run(twin, ks, np.array(X), np.array(W))
    be = twin[0]
    slots = be.decode(be.decrypt(Y.cts[0][0], ks[0].secret))
    assert slots.tolist() == [4, 5, 10, 11, 0, 0, 0, 0]
    assert got.tolist() == [[4, 5], [10, 11]]
    res = baseline_matmul(np.array(X), np.array(W), None, twin, [ks[0].public])
    assert unpack_baseline(res, twin, [ks[0].secret]).tolist() == [[4, 5], [10, 11]]


def test_multi_ciphertext_output(small_twins, rng):
    twin, _, ks, _ = small_twins[8]
    X, W, b = random_case(rng, 9, 5, 3)
    Y, got = run(twin, ks, X, W, b)
    assert len(Y.cts[0]) == 4 == packed_ciphertext_count(9, 3, 8)
    assert got.tolist() == exact_matmul(X, W, b)


def test_zero_inputs_give_biases(small_twins):
    twin, _, ks, _ = small_twins[8]
    b = np.array([5, -7, 0])
    Y, got = run(twin, ks, np.zeros((3, 4), dtype=np.int64), np.ones((4, 3), dtype=np.int64), b)
    assert got.tolist() == [b.tolist()] * 3


def test_chunking_layout(small_twins):
    twin, _, ks, _ = small_twins[8]
    pk, _, sk = keys_of(ks)
    assert chunk_count(40960, 8192) == 5
    assert chunk_count(8, 8) == 1
    X = encode_inputs(np.array([[1, 2, 3]]), twin, pk)
    assert X.chunks == 1
    be = twin[0]
    assert be.decode(be.decrypt(X.cts[0][0][0], sk[0])).tolist() == [1, 2, 3, 0, 0, 0, 0, 0]
    X = encode_inputs(np.arange(1, 20).reshape(1, 19), twin, pk)
    assert X.chunks == 3
    assert be.decode(be.decrypt(X.cts[0][0][2], sk[0])).tolist() == [17, 18, 19, 0, 0, 0, 0, 0]


def test_weight_transpose_and_bias_encoding(small_twins):
    twin = small_twins[8][1]
    W = encode_weights(np.eye(4, dtype=np.int64), twin)
    assert (W.n_out, W.f) == (4, 4)
    for j in range(4):
        hot = twin[0].decode(W.pts[0][j][0])
        assert hot.tolist() == [int(k == j) for k in range(8)]
    B = encode_bias([0, -3], twin)
    assert not twin[0].decode(B.plaintexts[0][0]).any()
    neg = twin[1].decode(B.plaintexts[1][1])
    assert np.all(neg == twin[1].t - 3)


@pytest.mark.parametrize("n", [8, 32])
@pytest.mark.parametrize("backend", ["bfv", "sim"])
def test_random_shapes_match_oracle(small_twins, rng, n, backend):
    bt, st, bk, sk = small_twins[n]
    twin, ks = (bt, bk) if backend == "bfv" else (st, sk)
    for _ in range(20):
        n_rows, f, n_out = (int(v) for v in rng.integers(1, [12, 3 * n, 6]))
        X, W, b = random_case(rng, n_rows, f, n_out)
        Y, got = run(twin, ks, X, W, b)
        assert got.tolist() == exact_matmul(X, W, b)


def test_matmul_equals_baseline(small_twins, rng):
    twin, _, ks, _ = small_twins[16]
    pk, _, sk = keys_of(ks)
    for n_rows in (1, 7, 16, 21):
        X, W, b = random_case(rng, n_rows, 37, 4)
        _, got = run(twin, ks, X, W, b)
        res = baseline_matmul(X, W, encode_bias(b, twin), twin, pk)
        assert np.array_equal(unpack_baseline(res, twin, sk), got)


def test_layout_bijective_and_tail_zero(small_twins, rng):
    twin, _, ks, _ = small_twins[8]
    X, W, b = random_case(rng, 5, 10, 3)
    Y, got = run(twin, ks, X, W, b)
    seen = {Y.layout(i, j) for i in range(5) for j in range(3)}
    assert len(seen) == 15
    assert all(c < len(Y.cts[0]) and 0 <= s < 8 for c, s in seen)
    tails = unoccupied_slots(Y, twin, keys_of(ks)[2])
    assert all(len(t) == 16 - 15 and not t.any() for t in tails)


@pytest.mark.parametrize("n_rows,f,n_out", [(1, 32, 1), (5, 40, 3), (3, 100, 4), (11, 7, 2)])
def test_counter_closed_forms(small_twins, rng, n_rows, f, n_out):
    twin, _, ks, _ = small_twins[32]
    n = 32
    X, W, b = random_case(rng, n_rows, f, n_out)
    Y, _ = run(twin, ks, X, W, b)
    c = read_counters(Y)
    pairs = n_rows * n_out
    chunks = chunk_count(f, n)
    assert c.mul_plain_count == pairs * (chunks + 1)
    assert c.rotation_count == pairs * int(math.log2(n))
    assert c.add_count == pairs * (chunks + int(math.log2(n)))
    assert c.ciphertexts_in == 2 * n_rows * chunks
    assert c.ciphertexts_out == 2 * packed_ciphertext_count(n_rows, n_out, n)
    pk = keys_of(ks)[0]
    base = baseline_matmul(X, W, encode_bias(b, twin), twin, pk).counters
    assert base.mul_plain_count == -(-n_rows // n) * f * n_out
    assert base.rotation_count == 0


def test_baseline_counters_batch_independent(small_twins, rng):
    twin, _, ks, _ = small_twins[8]
    pk = keys_of(ks)[0]
    W = rng.integers(-5, 5, (6, 2))
    counts = {baseline_matmul(rng.integers(0, 9, (r, 6)), W, None, twin, pk).counters.mul_plain_count
              for r in (1, 4, 8)}
    assert counts == {6 * 2}


def test_order_and_worker_independence(small_twins, rng):
    twin, _, ks, _ = small_twins[8]
    pk, gk, sk = keys_of(ks)
    X, W, b = random_case(rng, 7, 12, 3)
    Xe = encode_inputs(X, twin, pk)
    We, Be = encode_weights(W, twin), encode_bias(b, twin)
    ref = unpack_results(matmul(Xe, We, Be, twin, gk, workers=1), twin, sk)
    assert np.array_equal(unpack_results(matmul(Xe, We, Be, twin, gk, workers=3), twin, sk), ref)
    # feed row batches out of order through the streaming accumulator
    acc = PackedAccumulator(We, Be, twin, gk, 7, workers=2)
    for start in (4, 0, 2, 6):
        stop = {4: 6, 0: 2, 2: 4, 6: 7}[start]
        acc.add_rows(encode_inputs(X[start:stop], twin, pk), start)
    Y = acc.finish()
    assert np.array_equal(unpack_results(Y, twin, sk), ref)
    assert Y.counters.mul_plain_count == 7 * 3 * 3


def test_accumulator_rejects_incomplete_or_overflowing(small_twins, rng):
    twin, _, ks, _ = small_twins[8]
    pk, gk, _ = keys_of(ks)
    X, W, _ = random_case(rng, 4, 5, 2)
    acc = PackedAccumulator(encode_weights(W, twin), None, twin, gk, 4)
    acc.add_rows(encode_inputs(X[:2], twin, pk), 0)
    with pytest.raises(DimensionError):
        acc.finish()
    with pytest.raises(DimensionError):
        acc.add_rows(encode_inputs(X, twin, pk), 2)


def test_dimension_errors(small_twins, rng):
    twin, _, ks, _ = small_twins[8]
    pk, gk, _ = keys_of(ks)
    X = encode_inputs(rng.integers(0, 5, (2, 4)), twin, pk)
    with pytest.raises(DimensionError):
        matmul(X, encode_weights(np.ones((5, 2), dtype=np.int64), twin), None, twin, gk)
    with pytest.raises(DimensionError):
        matmul(X, encode_weights(np.ones((4, 2), dtype=np.int64), twin), encode_bias([1, 2, 3], twin),
               twin, gk)
    with pytest.raises(DimensionError):
        encode_inputs(np.zeros((0, 3), dtype=np.int64), twin, pk)
    with pytest.raises(TypeError):
        encode_inputs(np.ones((1, 3)), twin, pk)


def test_missing_galois_keys(small_twins, rng):
    twin, _, ks, _ = small_twins[8]
    pk, gk, _ = keys_of(ks)
    empty = [bfv.GaloisKeySet(g.n, g.params_digest, {}) for g in gk]
    X = encode_inputs(rng.integers(0, 5, (1, 4)), twin, pk)
    with pytest.raises(bfv.GaloisKeyError):
        matmul(X, encode_weights(np.ones((4, 1), dtype=np.int64), twin), None, twin, empty)


def test_capacity_refusal(small_twins, rng):
    twin, _, ks, _ = small_twins[8]
    pk, gk, _ = keys_of(ks)
    X = encode_inputs(rng.integers(0, 5, (1, 4)), twin, pk)
    with pytest.raises(CapacityError):
        matmul(X, encode_weights(np.ones((4, 1), dtype=np.int64), twin), None, twin, gk,
               cfg=ScalingConfig())


def test_44_bit_result_recovered(paper_backends, paper_keys):
    twin = TwinBackends(paper_backends)
    X = np.full((1, 2), 1 << 21, dtype=np.int64)
    W = np.array([[1 << 21], [(1 << 21) - 1]], dtype=np.int64)
    b = np.array([-(1 << 40)])
    _, got = run(twin, paper_keys, X, W, b)
    want = exact_matmul(X, W, b)
    assert abs(want[0][0]) >= 1 << 42
    assert got.tolist() == want


def test_paper_shape_counters(paper_backends, paper_keys, rng):
    twin = TwinBackends(paper_backends)
    X, W, b = random_case(rng, 1, 40960, 11, lo=-8, hi=8)
    Y, got = run(twin, paper_keys, X, W, b, cfg=ScalingConfig())
    assert got.tolist() == exact_matmul(X, W, b)
    c = read_counters(Y)
    assert (c.mul_plain_count, c.rotation_count) == (55 + 11, 143)
    assert 543 * 11 * (chunk_count(40960, 8192) + 1) == 35838
