"""Packed encrypted-input x plaintext-weight matrix multiplication.

Each input row is split into ceil(f/n) chunks of n features.  A dot product
(i, j) is formed by chunk-wise plaintext products, a rotate-and-add reduction
that leaves the full sum in every slot, and a one-hot mask that keeps only
slot (i*|Y| + j) mod n.  Masked results are then added together, n at a time,
into packed output ciphertexts; result (i, j) lands in ciphertext
(i*|Y| + j) // n.

``baseline_matmul`` is the conventional sample-batched comparator: ciphertext
k carries feature k of up to n samples and every output is a weighted sum of
f ciphertexts.
"""
from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np

from .bfv import sum_all_slots
from .fixed_point import ScalingConfig, TwinBackends, ensure_capacity


class DimensionError(ValueError):
    pass


# --------------------------------------------------------------------------
# counters


@dataclass
class OpCounters:
    """Homomorphic operation tallies.

    Arithmetic counts are per logical operation: the same operation applied
    in both CRT lanes counts once.  ``ciphertexts_in``/``ciphertexts_out``
    count physical ciphertexts over all lanes.
    """
    mul_plain_count: int = 0
    rotation_count: int = 0
    add_count: int = 0
    ciphertexts_in: int = 0
    ciphertexts_out: int = 0

    def merge(self, other: "OpCounters") -> "OpCounters":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class CountingBackend:
    """Forwards to a backend while tallying homomorphic operations."""

    def __init__(self, backend, counters: OpCounters):
        self._backend = backend
        self.counters = counters
        self.n = backend.n
        self.t = backend.t

    def __getattr__(self, name):
        return getattr(self._backend, name)

    def add(self, a, b):
        self.counters.add_count += 1
        return self._backend.add(a, b)

    def add_many(self, cts):
        cts = list(cts)
        self.counters.add_count += len(cts) - 1
        return self._backend.add_many(cts)

    def add_plain(self, ct, pt):
        self.counters.add_count += 1
        return self._backend.add_plain(ct, pt)

    def mul_plain(self, ct, pt):
        self.counters.mul_plain_count += 1
        return self._backend.mul_plain(ct, pt)

    def rotate_slots(self, ct, step, galois):
        self.counters.rotation_count += 1
        return self._backend.rotate_slots(ct, step, galois)

    def swap_halves(self, ct, galois):
        self.counters.rotation_count += 1
        return self._backend.swap_halves(ct, galois)

    def sum_all_slots(self, ct, galois):
        return sum_all_slots(self, ct, galois)


def read_counters(result) -> OpCounters:
    return result.counters


# --------------------------------------------------------------------------
# encoded operands


def chunk_count(f: int, n: int) -> int:
    return -(-f // n)


@dataclass
class EncodedInputMatrix:
    cts: list  # [modulus][row][chunk]
    n_rows: int
    f: int
    n: int

    @property
    def chunks(self) -> int:
        return chunk_count(self.f, self.n)

    def ciphertext_count(self) -> int:
        return len(self.cts) * self.n_rows * self.chunks


@dataclass
class EncodedWeightMatrix:
    pts: list  # [modulus][output][chunk]
    n_out: int
    f: int
    n: int


@dataclass
class EncodedBias:
    scaled: np.ndarray  # |Y| signed integers, already at scale 2**(s_x+s_w)
    residues: list  # per modulus
    plaintexts: list  # [modulus][output]: every slot holds the bias

    @property
    def n_out(self) -> int:
        return len(self.scaled)


@dataclass
class PackedResult:
    cts: list  # [modulus][packed index]
    n_rows: int
    n_out: int
    n: int
    counters: OpCounters = field(default_factory=OpCounters)

    def layout(self, i: int, j: int) -> tuple[int, int]:
        g = i * self.n_out + j
        return g // self.n, g % self.n


def packed_ciphertext_count(n_rows: int, n_out: int, n: int) -> int:
    return chunk_count(n_rows * n_out, n)


def _as_int_matrix(a, name) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be two-dimensional")
    if arr.dtype.kind not in "iu":
        raise TypeError(f"{name} must hold scaled integers")
    return arr.astype(np.int64)


def encode_inputs(X, twin: TwinBackends, public_keys, rng=None) -> EncodedInputMatrix:
    """Chunk, encode and encrypt a scaled |X| x f integer matrix."""
    X = _as_int_matrix(X, "X")
    n_rows, f = X.shape
    if n_rows == 0 or f == 0:
        raise DimensionError("empty input matrix")
    n = twin.n
    chunks = chunk_count(f, n)
    residues = twin.split(X)
    cts = []
    for be, pk, R in zip(twin, public_keys, residues):
        rows = []
        for i in range(n_rows):
            rows.append([be.encrypt(be.encode(R[i, k * n:(k + 1) * n]), pk, rng) for k in range(chunks)])
        cts.append(rows)
    return EncodedInputMatrix(cts, n_rows, f, n)


def encode_weights(W, twin: TwinBackends) -> EncodedWeightMatrix:
    """Encode the transpose of a scaled f x |Y| weight matrix."""
    W = _as_int_matrix(W, "W")
    f, n_out = W.shape
    if f == 0 or n_out == 0:
        raise DimensionError("empty weight matrix")
    n = twin.n
    chunks = chunk_count(f, n)
    residues = twin.split(W.T)
    pts = []
    for be, R in zip(twin, residues):
        pts.append([[be.encode(R[j, k * n:(k + 1) * n]) for k in range(chunks)] for j in range(n_out)])
    return EncodedWeightMatrix(pts, n_out, f, n)


def encode_bias(b_scaled, twin: TwinBackends) -> EncodedBias:
    b = np.asarray(b_scaled, dtype=np.int64).reshape(-1)
    residues = twin.split(b)
    plaintexts = [[be.encode(np.full(twin.n, r)) for r in R] for be, R in zip(twin, residues)]
    return EncodedBias(b, residues, plaintexts)


# --------------------------------------------------------------------------
# the packed algorithm


class _MaskCache:
    """One-hot slot masks, bounded so that n=8192 does not hold n masks."""

    def __init__(self, backend, maxsize: int = 128):
        self.backend = backend
        self.get = lru_cache(maxsize=maxsize)(self._build)

    def _build(self, slot: int):
        v = np.zeros(self.backend.n, dtype=np.int64)
        v[slot] = 1
        return self.backend.encode(v)


_mask_lock = threading.Lock()


def _masks_for(backend) -> _MaskCache:
    with _mask_lock:
        cache = getattr(backend, "_mask_cache", None)
        if cache is None:
            cache = _MaskCache(backend)
            backend._mask_cache = cache
        return cache


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("HEINFER_THREADS", "1")))
    except ValueError:
        return 1


def _bias_pattern(backend, residues, n_rows, n_out, index):
    n = backend.n
    g = index * n + np.arange(n)
    slots = np.where(g < n_rows * n_out, np.asarray(residues)[g % n_out], 0)
    return backend.encode(slots)


def _check_operands(X, W, B):
    if X.f != W.f:
        raise DimensionError(f"inputs carry {X.f} features but weights expect {W.f}")
    if X.n != W.n:
        raise DimensionError("inputs and weights use different ring degrees")
    if len(X.cts) != len(W.pts):
        raise DimensionError("inputs and weights use different numbers of plaintext moduli")
    if B is not None and B.n_out != W.n_out:
        raise DimensionError("bias length does not match the number of outputs")


def _dot_products(be, X_rows, W_rows, galois, pairs, n_out, masks, offset=0):
    """Masked dot products for ``pairs``, accumulated per packed ciphertext.

    ``pairs`` index rows of ``X_rows``; ``offset`` shifts them to global rows.
    """
    n = be.n
    acc = {}
    for i, j in pairs:
        prods = [be.mul_plain(x, w) for x, w in zip(X_rows[i], W_rows[j])]
        c = be.add_many(prods)
        c = be.sum_all_slots(c, galois)
        g = (offset + i) * n_out + j
        masked = be.mul_plain(c, masks.get(g % n))
        idx = g // n
        acc[idx] = masked if idx not in acc else be.add(acc[idx], masked)
    return acc


class PackedAccumulator:
    """Streaming form of :func:`matmul`.

    Row batches are fed with their global row offset; masked dot products
    go straight into the packed output ciphertexts, so the caller can drop
    each batch of input ciphertexts once it has been consumed.
    """

    def __init__(self, W: EncodedWeightMatrix, B: EncodedBias | None, twin: TwinBackends,
                 galois_keys, n_rows: int, *, cfg: ScalingConfig | None = None,
                 workers: int | None = None):
        if B is not None and B.n_out != W.n_out:
            raise DimensionError("bias length does not match the number of outputs")
        if len(W.pts) != len(twin):
            raise DimensionError("weights and backends use different numbers of plaintext moduli")
        if cfg is not None:
            ensure_capacity(W.f, cfg, twin.moduli)
        self.W, self.B, self.twin, self.galois_keys = W, B, twin, galois_keys
        self.n_rows = n_rows
        self.workers = workers or default_workers()
        self.total = packed_ciphertext_count(n_rows, W.n_out, twin.n)
        self.counters = OpCounters()
        self._acc = [dict() for _ in twin]
        self._covered = 0

    def add_rows(self, X: EncodedInputMatrix, offset: int) -> None:
        _check_operands(X, self.W, self.B)
        if offset < 0 or offset + X.n_rows > self.n_rows:
            raise DimensionError("row batch falls outside the declared input height")
        n_out = self.W.n_out
        pairs = [(i, j) for i in range(X.n_rows) for j in range(n_out)]
        workers = self.workers
        batches = [pairs[w::workers] for w in range(workers)] if workers > 1 else [pairs]
        self.counters.ciphertexts_in += X.ciphertext_count()
        for m, base in enumerate(self.twin):
            masks = _masks_for(base)
            local = [OpCounters() for _ in batches]

            def run(k):
                be = CountingBackend(base, local[k])
                return _dot_products(be, X.cts[m], self.W.pts[m], self.galois_keys[m],
                                     batches[k], n_out, masks, offset)

            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    partials = list(pool.map(run, range(len(batches))))
            else:
                partials = [run(0)]
            lane = self.counters if m == 0 else OpCounters()
            merge = CountingBackend(base, lane)
            acc = self._acc[m]
            for part in partials:
                for idx, ct in part.items():
                    acc[idx] = ct if idx not in acc else merge.add(acc[idx], ct)
            for c in local:
                lane.merge(c)
        self._covered += X.n_rows

    def finish(self) -> PackedResult:
        if self._covered != self.n_rows:
            raise DimensionError(f"received {self._covered} of {self.n_rows} input rows")
        n_out = self.W.n_out
        out = []
        for m, base in enumerate(self.twin):
            be = CountingBackend(base, self.counters if m == 0 else OpCounters())
            packed = []
            for idx in range(self.total):
                ct = self._acc[m][idx]
                if self.B is not None:
                    ct = be.add_plain(ct, _bias_pattern(base, self.B.residues[m], self.n_rows, n_out, idx))
                packed.append(ct)
            out.append(packed)
        self.counters.ciphertexts_out = sum(len(p) for p in out)
        return PackedResult(out, self.n_rows, n_out, self.twin.n, self.counters)


def matmul(X: EncodedInputMatrix, W: EncodedWeightMatrix, B: EncodedBias | None,
           twin: TwinBackends, galois_keys, *, cfg: ScalingConfig | None = None,
           workers: int | None = None) -> PackedResult:
    """Y = X x W + B on encrypted inputs, packed |X|*|Y| results per n slots."""
    _check_operands(X, W, B)
    acc = PackedAccumulator(W, B, twin, galois_keys, X.n_rows, cfg=cfg, workers=workers)
    acc.add_rows(X, 0)
    return acc.finish()


def unpack_results(Y: PackedResult, twin: TwinBackends, secret_keys) -> np.ndarray:
    """Decrypt both CRT branches and return the |X| x |Y| signed results."""
    count = Y.n_rows * Y.n_out
    residues = []
    for be, sk, cts in zip(twin, secret_keys, Y.cts):
        slots = np.concatenate([be.decode(be.decrypt(ct, sk)) for ct in cts])
        residues.append(slots[:count])
    return twin.recombine(residues).reshape(Y.n_rows, Y.n_out)


def unoccupied_slots(Y: PackedResult, twin: TwinBackends, secret_keys) -> list[np.ndarray]:
    """Decrypted slots past the last result, per modulus (all should be zero)."""
    count = Y.n_rows * Y.n_out
    out = []
    for be, sk, cts in zip(twin, secret_keys, Y.cts):
        slots = np.concatenate([be.decode(be.decrypt(ct, sk)) for ct in cts])
        out.append(slots[count:])
    return out


# --------------------------------------------------------------------------
# sample-batched baseline


@dataclass
class BaselineResult:
    cts: list  # [batch][modulus][output]
    n_rows: int
    n_out: int
    n: int
    counters: OpCounters = field(default_factory=OpCounters)


def encrypt_columns(X_batch, twin: TwinBackends, public_keys, rng=None):
    """Yield, for each feature k, per-modulus ciphertexts of column k.

    ``X_batch`` holds at most n samples; slot s carries sample s.
    """
    X_batch = _as_int_matrix(X_batch, "X")
    if X_batch.shape[0] > twin.n:
        raise DimensionError("a column ciphertext holds at most n samples")
    residues = twin.split(X_batch)
    for k in range(X_batch.shape[1]):
        yield [be.encrypt(be.encode(R[:, k]), pk, rng) for be, pk, R in zip(twin, public_keys, residues)]


def baseline_matmul_batch(columns, W, B: EncodedBias | None, twin: TwinBackends,
                          counters: OpCounters | None = None) -> list:
    """Sum_k column_k * w_{k,j} (+ b_j) for one batch; returns [modulus][output]."""
    W = _as_int_matrix(W, "W")
    f, n_out = W.shape
    counters = counters if counters is not None else OpCounters()
    W_res = twin.split(W)
    bes = [CountingBackend(be, counters if m == 0 else OpCounters()) for m, be in enumerate(twin)]
    acc = [[None] * n_out for _ in bes]
    seen = 0
    for k, col in enumerate(columns):
        if k >= f:
            raise DimensionError("more input columns than weight rows")
        counters.ciphertexts_in += len(col)
        for m, (be, ct) in enumerate(zip(bes, col)):
            for j in range(n_out):
                prod = be.mul_plain(ct, be.encode(np.full(be.n, W_res[m][k, j])))
                acc[m][j] = prod if acc[m][j] is None else be.add(acc[m][j], prod)
        seen += 1
    if seen != f:
        raise DimensionError(f"expected {f} input columns, got {seen}")
    if B is not None:
        for m, be in enumerate(bes):
            acc[m] = [be.add_plain(ct, pt) for ct, pt in zip(acc[m], B.plaintexts[m])]
    counters.ciphertexts_out += len(bes) * n_out
    return acc


def baseline_matmul(X, W, B: EncodedBias | None, twin: TwinBackends, public_keys,
                    rng=None, timer=None) -> BaselineResult:
    """Encrypt X column-wise in batches of n samples and run the comparator.

    Column ciphertexts are consumed as they are produced so memory stays at
    one ciphertext per modulus plus the |Y| accumulators.
    """
    X = _as_int_matrix(X, "X")
    n_rows = X.shape[0]
    if n_rows == 0 or X.shape[1] == 0:
        raise DimensionError("empty input matrix")
    n = twin.n
    counters = OpCounters()
    batches = []
    for start in range(0, n_rows, n):
        cols = encrypt_columns(X[start:start + n], twin, public_keys, rng)
        if timer is not None:
            cols = timer.wrap_iter("encryption", cols)
            with timer.phase("computation"):
                batches.append(baseline_matmul_batch(cols, W, B, twin, counters))
        else:
            batches.append(baseline_matmul_batch(cols, W, B, twin, counters))
    return BaselineResult(batches, n_rows, np.asarray(W).shape[1], n, counters)


def unpack_baseline(result: BaselineResult, twin: TwinBackends, secret_keys) -> np.ndarray:
    n = result.n
    rows = []
    for b, batch in enumerate(result.cts):
        count = min(n, result.n_rows - b * n)
        residues = []
        for be, sk, outs in zip(twin, secret_keys, batch):
            residues.append(np.stack([be.decode(be.decrypt(ct, sk))[:count] for ct in outs], axis=1))
        rows.append(twin.recombine(residues))
    return np.concatenate(rows, axis=0)
