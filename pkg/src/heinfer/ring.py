"""Exact arithmetic in Z_q[x]/(x^n + 1).

Residues are stored as ``uint64`` numpy arrays.  Moduli are restricted to
primes below 2**50 so that modular products can be reduced with a
double-precision quotient estimate (the product itself is formed with
wrapping 64-bit integer arithmetic and corrected by at most one modulus).

The batched kernels work on ``(rows, n)`` arrays where every row has its own
modulus and twiddle table; this is how RNS polynomials are processed.
"""
from __future__ import annotations

import secrets
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import sympy
from numba import njit

MAX_MODULUS_BITS = 50


class ParameterError(ValueError):
    """Raised for inconsistent ring or scheme parameters."""


# --------------------------------------------------------------------------
# moduli and tables


@dataclass(frozen=True)
class Modulus:
    value: int
    inv_float: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        q = int(self.value)
        if q < 3 or q % 2 == 0:
            raise ParameterError(f"modulus must be an odd prime, got {q}")
        if q.bit_length() > MAX_MODULUS_BITS:
            raise ParameterError(f"modulus {q} exceeds {MAX_MODULUS_BITS} bits")
        if not sympy.isprime(q):
            raise ParameterError(f"modulus {q} is not prime")
        object.__setattr__(self, "value", q)
        object.__setattr__(self, "inv_float", 1.0 / q)

    def __int__(self):
        return self.value

    def supports_ntt(self, n: int) -> bool:
        return (self.value - 1) % (2 * n) == 0


def find_ntt_primes(bits: int, n: int, count: int, exclude=()) -> list[int]:
    """Largest ``count`` primes below 2**bits that are 1 mod 2n."""
    step = 2 * n
    k = ((1 << bits) - 1) // step
    out = []
    excluded = set(exclude)
    while len(out) < count:
        if k <= 0:
            raise ParameterError(f"not enough {bits}-bit NTT primes for n={n}")
        p = k * step + 1
        if p not in excluded and sympy.isprime(p):
            out.append(p)
        k -= 1
    return out


def _bitrev(i: int, bits: int) -> int:
    return int(format(i, f"0{bits}b")[::-1], 2) if bits else 0


def _primitive_2n_root(q: int, n: int) -> int:
    for x in range(2, q):
        psi = pow(x, (q - 1) // (2 * n), q)
        if pow(psi, n, q) == q - 1:
            return psi
    raise ParameterError(f"no primitive {2 * n}-th root mod {q}")


@dataclass(frozen=True, eq=False)
class NttTables:
    """Twiddle tables for the negacyclic NTT of length n modulo q.

    ``exponents[j]`` is the odd exponent e such that output j of the forward
    transform equals p(root**e); ``index_of_exponent`` is its inverse.
    """

    modulus: Modulus
    n: int
    root: int
    psi_rev: np.ndarray
    psi_rev_f: np.ndarray
    ipsi_rev: np.ndarray
    ipsi_rev_f: np.ndarray
    inv_n: int
    exponents: np.ndarray
    index_of_exponent: np.ndarray

    @classmethod
    def build(cls, modulus: Modulus | int, n: int) -> "NttTables":
        return _build_tables(int(modulus), n)


@lru_cache(maxsize=None)
def _build_tables(q: int, n: int) -> NttTables:
    if n < 2 or n & (n - 1):
        raise ParameterError(f"ring degree must be a power of two, got {n}")
    modulus = Modulus(q)
    if not modulus.supports_ntt(n):
        raise ParameterError(f"modulus {q} is not 1 mod {2 * n}; no negacyclic NTT")
    psi = _primitive_2n_root(q, n)
    psi_inv = pow(psi, -1, q)
    bits = n.bit_length() - 1
    powers = [1] * (2 * n)
    for i in range(1, 2 * n):
        powers[i] = powers[i - 1] * psi % q
    inv_powers = [1] * n
    for i in range(1, n):
        inv_powers[i] = inv_powers[i - 1] * psi_inv % q
    rev = [_bitrev(i, bits) for i in range(n)]
    psi_rev = np.array([powers[r] for r in rev], dtype=np.uint64)
    ipsi_rev = np.array([inv_powers[r] for r in rev], dtype=np.uint64)
    # Output j of the Cooley-Tukey transform below is p(psi**(2*rev(j)+1)).
    exponents = np.array([2 * r + 1 for r in rev], dtype=np.int64)
    index_of_exponent = np.full(2 * n, -1, dtype=np.int64)
    index_of_exponent[exponents] = np.arange(n)
    tables = NttTables(
        modulus=modulus,
        n=n,
        root=psi,
        psi_rev=psi_rev,
        psi_rev_f=psi_rev.astype(np.float64) / q,
        ipsi_rev=ipsi_rev,
        ipsi_rev_f=ipsi_rev.astype(np.float64) / q,
        inv_n=pow(n, -1, q),
        exponents=exponents,
        index_of_exponent=index_of_exponent,
    )
    for arr in (psi_rev, ipsi_rev, tables.psi_rev_f, tables.ipsi_rev_f, exponents, index_of_exponent):
        arr.setflags(write=False)
    return tables


class RnsBase:
    """Stacked tables for a list of NTT primes sharing one ring degree."""

    def __init__(self, primes, n: int):
        self.n = n
        self.tables = [NttTables.build(p, n) for p in primes]
        self.primes = tuple(int(p) for p in primes)
        self.q = np.array(self.primes, dtype=np.uint64)
        self.q_f = 1.0 / self.q.astype(np.float64)
        self.psi_rev = np.stack([t.psi_rev for t in self.tables])
        self.psi_rev_f = np.stack([t.psi_rev_f for t in self.tables])
        self.ipsi_rev = np.stack([t.ipsi_rev for t in self.tables])
        self.ipsi_rev_f = np.stack([t.ipsi_rev_f for t in self.tables])
        self.inv_n = np.array([t.inv_n for t in self.tables], dtype=np.uint64)
        self.inv_n_f = self.inv_n.astype(np.float64) / self.q.astype(np.float64)

    def __len__(self):
        return len(self.primes)

    def sub(self, start: int, stop: int) -> "RnsBase":
        return RnsBase(self.primes[start:stop], self.n)

    def ntt(self, a: np.ndarray) -> np.ndarray:
        out = np.array(a, dtype=np.uint64, copy=True, order="C")
        ntt_rows(out, self.q, self.psi_rev, self.psi_rev_f)
        return out

    def intt(self, a: np.ndarray) -> np.ndarray:
        out = np.array(a, dtype=np.uint64, copy=True, order="C")
        intt_rows(out, self.q, self.ipsi_rev, self.ipsi_rev_f, self.inv_n, self.inv_n_f)
        return out

    def lift_signed(self, values: np.ndarray) -> np.ndarray:
        """Reduce small signed integers (|v| < 2**62) into every prime."""
        v = np.asarray(values, dtype=np.int64)
        return np.stack([np.mod(v, np.int64(p)).astype(np.uint64) for p in self.primes])


# --------------------------------------------------------------------------
# numba kernels


# Butterflies keep values lazily in [0, 2q); 2q < 2**51 keeps the float
# quotient estimate within one of the true quotient.


@njit(nogil=True, error_model="numpy", cache=True)
def _butterfly_ct(lo, hi, w, wf, q, q2):
    for j in range(lo.shape[0]):
        u = lo[j]
        x = hi[j]
        quot = np.uint64(np.int64(np.float64(x) * wf))
        v = x * w - quot * q
        v = min(v, v + q)
        s = u + v
        lo[j] = min(s, s - q2)
        d = u + q2 - v
        hi[j] = min(d, d - q2)


@njit(nogil=True, error_model="numpy", cache=True)
def _butterfly_gs(lo, hi, w, wf, q, q2):
    for j in range(lo.shape[0]):
        u = lo[j]
        x = hi[j]
        s = u + x
        lo[j] = min(s, s - q2)
        d = u + q2 - x
        d = min(d, d - q2)
        quot = np.uint64(np.int64(np.float64(d) * wf))
        v = d * w - quot * q
        hi[j] = min(v, v + q)


@njit(nogil=True, error_model="numpy", cache=True)
def _scale_row(x, w, wf, q):
    for j in range(x.shape[0]):
        y = x[j]
        quot = np.uint64(np.int64(np.float64(y) * wf))
        v = y * w - quot * q
        v = min(v, v + q)
        x[j] = min(v, v - q)


@njit(nogil=True, error_model="numpy", cache=True)
def ntt_rows(a, q, psi_rev, psi_rev_f):
    """In-place forward negacyclic NTT of every row (bit-reversed output)."""
    rows, n = a.shape
    for r in range(rows):
        x = a[r]
        qr = q[r]
        q2 = qr + qr
        t = n
        m = 1
        while m < n:
            t >>= 1
            for i in range(m):
                j1 = 2 * i * t
                _butterfly_ct(x[j1:j1 + t], x[j1 + t:j1 + 2 * t],
                              psi_rev[r, m + i], psi_rev_f[r, m + i], qr, q2)
            m <<= 1
        for j in range(n):
            y = x[j]
            x[j] = min(y, y - qr)


@njit(nogil=True, error_model="numpy", cache=True)
def intt_rows(a, q, ipsi_rev, ipsi_rev_f, inv_n, inv_n_f):
    """In-place inverse of :func:`ntt_rows`."""
    rows, n = a.shape
    for r in range(rows):
        x = a[r]
        qr = q[r]
        q2 = qr + qr
        t = 1
        m = n
        while m > 1:
            h = m >> 1
            j1 = 0
            for i in range(h):
                _butterfly_gs(x[j1:j1 + t], x[j1 + t:j1 + 2 * t],
                              ipsi_rev[r, h + i], ipsi_rev_f[r, h + i], qr, q2)
                j1 += 2 * t
            t <<= 1
            m = h
        _scale_row(x, inv_n[r], inv_n_f[r], qr)


@njit(nogil=True, error_model="numpy", cache=True)
def mul_rows(a, b, q, q_f):
    """Element-wise a*b mod q per row, for residues < q < 2**50."""
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        qr = q[r]
        qf = q_f[r]
        for j in range(n):
            x = a[r, j]
            y = b[r, j]
            quot = np.uint64(np.int64(np.float64(x) * np.float64(y) * qf))
            v = x * y - quot * qr
            v = min(v, v + qr)
            out[r, j] = min(v, v - qr)
    return out


@njit(nogil=True, error_model="numpy", cache=True)
def mul_scalar_rows(a, s, q, q_f):
    """a * s[r] mod q[r] for every row r."""
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        qr = q[r]
        w = s[r]
        wf = np.float64(w) * q_f[r]
        for j in range(n):
            y = a[r, j]
            quot = np.uint64(np.int64(np.float64(y) * wf))
            v = y * w - quot * qr
            v = min(v, v + qr)
            out[r, j] = min(v, v - qr)
    return out


@njit(nogil=True, error_model="numpy", cache=True)
def add_rows(a, b, q):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        qr = q[r]
        for j in range(n):
            s = a[r, j] + b[r, j]
            out[r, j] = min(s, s - qr)
    return out


@njit(nogil=True, error_model="numpy", cache=True)
def sub_rows(a, b, q):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        qr = q[r]
        for j in range(n):
            d = a[r, j] - b[r, j]
            out[r, j] = min(d, d + qr)
    return out


@njit(nogil=True, error_model="numpy", cache=True)
def neg_rows(a, q):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        qr = q[r]
        for j in range(n):
            x = a[r, j]
            out[r, j] = qr - x if x != 0 else x
    return out


@njit(nogil=True, error_model="numpy", cache=True)
def reduce_rows(x, q):
    """Reduce one row of arbitrary uint64 values into every modulus."""
    rows = q.shape[0]
    n = x.shape[0]
    out = np.empty((rows, n), dtype=np.uint64)
    for r in range(rows):
        qr = q[r]
        for j in range(n):
            out[r, j] = x[j] % qr
    return out


# --------------------------------------------------------------------------
# single-modulus polynomial API


@dataclass(frozen=True, eq=False)
class RingPoly:
    coeffs: np.ndarray
    modulus: Modulus
    ntt_form: bool = False

    def __post_init__(self):
        c = np.ascontiguousarray(self.coeffs, dtype=np.uint64)
        if c.ndim != 1:
            raise ParameterError("coefficients must be one-dimensional")
        n = c.shape[0]
        if n < 1 or n & (n - 1):
            raise ParameterError(f"ring degree must be a power of two, got {n}")
        if np.any(c >= np.uint64(self.modulus.value)):
            raise ParameterError("coefficient out of range")
        object.__setattr__(self, "coeffs", c)

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    @classmethod
    def from_signed(cls, values, modulus: Modulus) -> "RingPoly":
        v = np.asarray(values, dtype=np.int64)
        return cls(np.mod(v, np.int64(modulus.value)).astype(np.uint64), modulus)

    def centered(self) -> np.ndarray:
        q = self.modulus.value
        c = self.coeffs.astype(np.int64)
        return np.where(c > q // 2, c - q, c)

    def __add__(self, other: "RingPoly") -> "RingPoly":
        _check_same(self, other)
        q = np.array([self.modulus.value], dtype=np.uint64)
        return RingPoly(add_rows(self.coeffs[None], other.coeffs[None], q)[0], self.modulus, self.ntt_form)

    def __eq__(self, other):
        if not isinstance(other, RingPoly):
            return NotImplemented
        return (self.modulus.value == other.modulus.value and self.ntt_form == other.ntt_form
                and np.array_equal(self.coeffs, other.coeffs))

    __hash__ = None


def _check_same(a: RingPoly, b: RingPoly):
    if a.modulus.value != b.modulus.value or a.n != b.n:
        raise ParameterError("polynomials live in different rings")
    if a.ntt_form != b.ntt_form:
        raise ParameterError("polynomials are in different representations")


def _one_row(tables: NttTables):
    q = np.array([tables.modulus.value], dtype=np.uint64)
    return q


def ntt_forward(p: RingPoly, tables: NttTables | None = None) -> RingPoly:
    if p.ntt_form:
        raise ParameterError("polynomial is already in evaluation form")
    tables = tables or NttTables.build(p.modulus, p.n)
    a = p.coeffs.copy()[None]
    ntt_rows(a, _one_row(tables), tables.psi_rev[None], tables.psi_rev_f[None])
    return RingPoly(a[0], p.modulus, ntt_form=True)


def ntt_inverse(p: RingPoly, tables: NttTables | None = None) -> RingPoly:
    if not p.ntt_form:
        raise ParameterError("polynomial is already in coefficient form")
    tables = tables or NttTables.build(p.modulus, p.n)
    a = p.coeffs.copy()[None]
    inv_n = np.array([tables.inv_n], dtype=np.uint64)
    intt_rows(a, _one_row(tables), tables.ipsi_rev[None], tables.ipsi_rev_f[None],
              inv_n, inv_n.astype(np.float64) / tables.modulus.value)
    return RingPoly(a[0], p.modulus, ntt_form=False)


def negacyclic_mul(a: RingPoly, b: RingPoly, tables: NttTables | None = None) -> RingPoly:
    """a*b mod (x^n + 1, q) for coefficient-form inputs."""
    _check_same(a, b)
    if a.ntt_form:
        raise ParameterError("negacyclic_mul expects coefficient form")
    tables = tables or NttTables.build(a.modulus, a.n)
    fa = ntt_forward(a, tables)
    fb = ntt_forward(b, tables)
    q = _one_row(tables)
    prod = mul_rows(fa.coeffs[None], fb.coeffs[None], q, 1.0 / q.astype(np.float64))
    return ntt_inverse(RingPoly(prod[0], a.modulus, ntt_form=True), tables)


# --------------------------------------------------------------------------
# sampling


def default_rng(seed=None) -> np.random.Generator:
    """Philox-backed generator; OS entropy unless a seed is given."""
    if seed is None:
        seed = secrets.randbits(128)
    return np.random.Generator(np.random.Philox(seed))


def sample_uniform(n: int, q: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, q, size=n, dtype=np.uint64)


def sample_ternary(n: int, rng: np.random.Generator) -> np.ndarray:
    """Signed coefficients drawn uniformly from {-1, 0, 1}."""
    return rng.integers(-1, 2, size=n, dtype=np.int64)


def sample_gaussian(n: int, rng: np.random.Generator, sigma: float = 3.2) -> np.ndarray:
    """Rounded normal samples, rejected beyond 6 sigma."""
    bound = 6 * sigma
    out = np.rint(rng.normal(0.0, sigma, size=n))
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = np.rint(rng.normal(0.0, sigma, size=int(bad.sum())))
        bad = np.abs(out) > bound
    return out.astype(np.int64)
