"""BFV with slot batching, plaintext products and Galois rotations.

Ciphertexts are kept in NTT form over the RNS ciphertext base Q.  Key
switching for rotations uses one RNS digit per ciphertext prime and a single
special prime P (the key-switching keys live modulo Q*P).

:class:`ClearSimBackend` implements the same interface directly on slot
vectors and is the oracle used throughout the test-suite.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .ring import (
    NttTables,
    ParameterError,
    RnsBase,
    add_rows,
    default_rng,
    find_ntt_primes,
    intt_rows,
    mul_rows,
    mul_scalar_rows,
    neg_rows,
    ntt_rows,
    sample_gaussian,
    sample_ternary,
)
from numba import njit

PAPER_T0 = 1073872897
PAPER_T1 = 114689
PAPER_N = 8192

# Max log2(Q*P) for ternary secrets, from the homomorphic encryption
# security standard tables (classical attacks).
HE_STANDARD_MAX_LOGQ = {
    128: {1024: 27, 2048: 54, 4096: 109, 8192: 218, 16384: 438, 32768: 881},
    192: {1024: 19, 2048: 37, 4096: 75, 8192: 152, 16384: 305, 32768: 611},
    256: {1024: 14, 2048: 29, 4096: 58, 8192: 118, 16384: 237, 32768: 476},
}


class EncodingError(ValueError):
    pass


class DecryptionError(RuntimeError):
    """Noise budget exhausted; the plaintext cannot be trusted."""


class GaloisKeyError(KeyError):
    pass


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class EncryptionParams:
    n: int
    t: int
    q_primes: tuple
    special_prime: int
    security_level: int = 128
    sigma: float = 3.2

    def __post_init__(self):
        object.__setattr__(self, "q_primes", tuple(int(q) for q in self.q_primes))
        n, t = self.n, self.t
        if n < 2 or n & (n - 1):
            raise ParameterError(f"n must be a power of two, got {n}")
        if (t - 1) % (2 * n):
            raise ParameterError(f"plaintext modulus {t} is not 1 mod {2 * n}; batching impossible")
        NttTables.build(t, n)
        moduli = self.q_primes + (self.special_prime,)
        if not self.q_primes or len(set(moduli)) != len(moduli):
            raise ParameterError("ciphertext primes must be non-empty and distinct")
        if t in moduli:
            raise ParameterError("plaintext modulus must be coprime to the ciphertext modulus")
        for q in moduli:
            NttTables.build(q, n)
        if max(self.q_primes) > self.special_prime:
            raise ParameterError("special prime must exceed every ciphertext prime")
        if t >= min(self.q_primes):
            raise ParameterError("plaintext modulus must be smaller than every ciphertext prime")
        if self.security_level:
            table = HE_STANDARD_MAX_LOGQ.get(self.security_level)
            if table is None or n not in table:
                raise ParameterError(f"no standard bound for n={n}, {self.security_level}-bit security")
            if self.log2_qp > table[n]:
                raise ParameterError(
                    f"log2(QP)={self.log2_qp:.1f} exceeds {table[n]} bits for {self.security_level}-bit security")

    @property
    def log2_qp(self) -> float:
        return sum(math.log2(q) for q in self.q_primes) + math.log2(self.special_prime)

    @property
    def slot_count(self) -> int:
        return self.n

    def digest(self) -> int:
        text = f"{self.n}|{self.t}|{','.join(map(str, self.q_primes))}|{self.special_prime}|{self.sigma}"
        return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")

    def to_dict(self) -> dict:
        return {"n": self.n, "t": self.t, "q_primes": list(self.q_primes),
                "special_prime": self.special_prime, "security_level": self.security_level,
                "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "EncryptionParams":
        return cls(n=d["n"], t=d["t"], q_primes=tuple(d["q_primes"]), special_prime=d["special_prime"],
                   security_level=d.get("security_level", 128), sigma=d.get("sigma", 3.2))


def _chain(n: int, count: int) -> tuple[tuple[int, ...], int]:
    primes = find_ntt_primes(50, n, count + 1)
    return tuple(primes[1:]), primes[0]


def paper_params(t: int, n: int = PAPER_N) -> EncryptionParams:
    """128-bit parameters at n=8192.

    Three 50-bit ciphertext primes for a 30-bit t, two for a small t, plus
    a 50-bit special prime; log2(QP) stays under the 218-bit bound.
    """
    q_primes, special = _chain(n, 3 if t.bit_length() > 20 else 2)
    return EncryptionParams(n=n, t=t, q_primes=q_primes, special_prime=special)


def test_params(n: int, t: int, q_count: int = 3) -> EncryptionParams:
    """Small insecure parameters for fast tests (no security check)."""
    q_primes, special = _chain(n, q_count)
    return EncryptionParams(n=n, t=t, q_primes=q_primes, special_prime=special, security_level=0)


# --------------------------------------------------------------------------
# keys and values


@dataclass(frozen=True, eq=False)
class SecretKey:
    params_digest: int
    ntt: np.ndarray  # (L+1, n) over Q*P


@dataclass(frozen=True, eq=False)
class PublicKey:
    params_digest: int
    data: np.ndarray  # (2, L, n) over Q


@dataclass(frozen=True, eq=False)
class GaloisKeySet:
    """Key-switching keys indexed by Galois element.

    For BFV each value is a pair of ``(L, L+1, n)`` arrays; the clear
    simulator stores ``None`` and only tracks which elements exist.
    """

    n: int
    params_digest: int
    keys: dict

    def element_for_step(self, step: int) -> int:
        return pow(3, step, 2 * self.n)

    @property
    def swap_element(self) -> int:
        return 2 * self.n - 1

    @property
    def steps(self) -> list[int]:
        inv = {pow(3, s, 2 * self.n): s for s in range(1, self.n // 2)}
        return sorted(inv[g] for g in self.keys if g in inv)

    def has_step(self, step: int) -> bool:
        return self.element_for_step(step) in self.keys

    def has_swap(self) -> bool:
        return self.swap_element in self.keys

    def get(self, g: int):
        try:
            return self.keys[g]
        except KeyError:
            raise GaloisKeyError(f"no Galois key for element {g}") from None


@dataclass(frozen=True)
class KeySet:
    secret: SecretKey
    public: PublicKey
    galois: GaloisKeySet


def sum_rotation_steps(n: int) -> list[int]:
    """Steps 1, 2, 4, ..., n/4 used by :func:`sum_all_slots`."""
    out, s = [], 1
    while s < n // 2:
        out.append(s)
        s <<= 1
    return out


@dataclass(eq=False)
class Plaintext:
    coeffs: np.ndarray  # uint64 residues mod t
    params_digest: int
    constant: bool = False
    _lifted: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class Ciphertext:
    data: np.ndarray  # (2, L, n) NTT form over Q
    params_digest: int


def _centered(x: np.ndarray, m: int) -> np.ndarray:
    v = x.astype(np.int64)
    return np.where(v > m // 2, v - m, v)


@njit(nogil=True, error_model="numpy", cache=True)
def _mac_rows(acc, a, b, q, q_f):
    rows, n = acc.shape
    for r in range(rows):
        qr = q[r]
        qf = q_f[r]
        for j in range(n):
            x = a[r, j]
            y = b[r, j]
            quot = np.uint64(np.int64(np.float64(x) * np.float64(y) * qf))
            v = x * y - quot * qr
            v = min(v, v + qr)
            v = min(v, v - qr)
            s = acc[r, j] + v
            acc[r, j] = min(s, s - qr)


@njit(nogil=True, error_model="numpy", cache=True)
def _reduce_into(out, x, q, qf):
    for j in range(x.shape[0]):
        y = x[j]
        quot = np.uint64(np.int64(np.float64(y) * qf))
        y = y - quot * q
        y = min(y, y + q)
        out[j] = min(y, y - q)


@njit(nogil=True, error_model="numpy", cache=True)
def _key_switch(c1, ksk_b, ksk_a, qp, qp_f, psi, psi_f, ipsi, ipsi_f, inv_n, inv_n_f,
                p_inv, p_inv_f):
    """Switch an NTT-form component c1 (L, n) to the base secret.

    Returns (d0, d1) over Q such that d0 + d1*s ~= c1*s' where the key
    encrypts P*s' under s modulo Q*P.
    """
    L, n = c1.shape
    big = L + 1
    coeff = c1.copy()
    intt_rows(coeff, qp[:L], ipsi[:L], ipsi_f[:L], inv_n[:L], inv_n_f[:L])
    acc0 = np.zeros((big, n), dtype=np.uint64)
    acc1 = np.zeros((big, n), dtype=np.uint64)
    digit = np.empty((big, n), dtype=np.uint64)
    for i in range(L):
        for r in range(big):
            if r == i:
                digit[r, :] = c1[i, :]
            else:
                _reduce_into(digit[r], coeff[i], qp[r], qp_f[r])
                ntt_rows(digit[r:r + 1], qp[r:r + 1], psi[r:r + 1], psi_f[r:r + 1])
        _mac_rows(acc0, digit, ksk_b[i], qp, qp_f)
        _mac_rows(acc1, digit, ksk_a[i], qp, qp_f)
    out0 = np.empty((L, n), dtype=np.uint64)
    out1 = np.empty((L, n), dtype=np.uint64)
    p = qp[L]
    half = p >> np.uint64(1)
    tail = np.empty((1, n), dtype=np.uint64)
    lifted = np.empty((L, n), dtype=np.uint64)
    for which in range(2):
        acc = acc0 if which == 0 else acc1
        out = out0 if which == 0 else out1
        tail[0, :] = acc[L, :]
        intt_rows(tail, qp[L:], ipsi[L:], ipsi_f[L:], inv_n[L:], inv_n_f[L:])
        for r in range(L):
            qr = qp[r]
            qf = qp_f[r]
            for j in range(n):
                x = tail[0, j]
                neg = x > half
                y = p - x if neg else x
                quot = np.uint64(np.int64(np.float64(y) * qf))
                y = y - quot * qr
                y = min(y, y + qr)
                y = min(y, y - qr)
                if neg and y != 0:
                    y = qr - y
                lifted[r, j] = y
        ntt_rows(lifted, qp[:L], psi[:L], psi_f[:L])
        for r in range(L):
            qr = qp[r]
            w = p_inv[r]
            wf = p_inv_f[r]
            for j in range(n):
                d = acc[r, j] - lifted[r, j]
                d = min(d, d + qr)
                quot = np.uint64(np.int64(np.float64(d) * wf))
                v = d * w - quot * qr
                v = min(v, v + qr)
                out[r, j] = min(v, v - qr)
    return out0, out1


# --------------------------------------------------------------------------
# slot layout shared by both backends


class SlotLayout:
    """Maps the n batching slots onto NTT positions modulo t.

    Slot r*(n/2) + c is the evaluation at root**(+-3**c), sign chosen by row r,
    so the Galois element 3**k rotates both rows left by k and 2n-1 swaps
    the rows.
    """

    def __init__(self, n: int, t: int):
        self.n = n
        self.t = t
        self.tables = NttTables.build(t, n)
        half = n // 2
        pos = np.empty(n, dtype=np.int64)
        g = 1
        for c in range(half):
            pos[c] = self.tables.index_of_exponent[g]
            pos[half + c] = self.tables.index_of_exponent[(2 * n - g) % (2 * n)]
            g = g * 3 % (2 * n)
        self.slot_to_index = pos
        self._base = RnsBase([t], n)

    def encode(self, slots: np.ndarray) -> np.ndarray:
        evals = np.zeros((1, self.n), dtype=np.uint64)
        evals[0, self.slot_to_index] = slots
        return self._base.intt(evals)[0]

    def decode(self, coeffs: np.ndarray) -> np.ndarray:
        return self._base.ntt(coeffs[None])[0][self.slot_to_index]


def _check_slots(values, n: int, t: int) -> np.ndarray:
    v = np.asarray(values)
    if v.ndim != 1 or v.shape[0] > n:
        raise EncodingError(f"expected at most {n} slot values")
    if v.dtype == object:
        if any(int(x) < 0 or int(x) >= t for x in v):
            raise EncodingError(f"slot value outside [0, {t})")
        v = v.astype(np.int64)
    v = v.astype(np.int64)
    if v.size and (v.min() < 0 or v.max() >= t):
        raise EncodingError(f"slot value outside [0, {t})")
    out = np.zeros(n, dtype=np.int64)
    out[: v.shape[0]] = v
    return out


def sum_all_slots(backend, ct, galois: GaloisKeySet):
    """Every slot becomes the total over all n slots (mod t).

    Uses log2(n/2) row rotations and one row swap, each followed by an add.
    """
    s = 1
    while s < backend.n // 2:
        ct = backend.add(ct, backend.rotate_slots(ct, s, galois))
        s <<= 1
    return backend.add(ct, backend.swap_halves(ct, galois))


# --------------------------------------------------------------------------
# BFV backend


class BfvBackend:
    """Single-plaintext-modulus BFV instance."""

    variant = "BFV"

    def __init__(self, params: EncryptionParams):
        self.params = params
        self.n = params.n
        self.t = params.t
        self.digest = params.digest()
        self.layout = SlotLayout(self.n, self.t)
        self.base_q = RnsBase(params.q_primes, self.n)
        self.base_qp = RnsBase(params.q_primes + (params.special_prime,), self.n)
        self.L = len(params.q_primes)
        self.Q = math.prod(params.q_primes)
        self.P = params.special_prime
        self.delta = self.Q // self.t
        self._delta_res = np.array([self.delta % q for q in params.q_primes], dtype=np.uint64)
        self._p_inv = np.array([pow(self.P, -1, q) for q in params.q_primes], dtype=np.uint64)
        self._p_inv_f = self._p_inv.astype(np.float64) / self.base_q.q.astype(np.float64)
        self._q2 = np.tile(self.base_q.q, 2)
        self._q2_f = np.tile(self.base_q.q_f, 2)
        # CRT reconstruction weights for decryption
        self._crt_w = [(self.Q // q) * pow(self.Q // q, -1, q) for q in params.q_primes]
        exps = self.base_q.tables[0].exponents
        self._exponents = exps
        self._index_of_exp = self.base_q.tables[0].index_of_exponent
        self._perm_cache: dict[int, np.ndarray] = {}

    # -- keys --------------------------------------------------------------

    def keygen(self, rng=None, rotation_steps=()) -> KeySet:
        rng = rng if rng is not None else default_rng()
        n, sigma = self.n, self.params.sigma
        s = sample_ternary(n, rng)
        s_ntt = self.base_qp.ntt(self.base_qp.lift_signed(s))
        sk = SecretKey(self.digest, s_ntt)
        a = np.stack([rng.integers(0, q, size=n, dtype=np.uint64) for q in self.params.q_primes])
        e = self.base_q.ntt(self.base_q.lift_signed(sample_gaussian(n, rng, sigma)))
        s_q = s_ntt[: self.L]
        b = neg_rows(add_rows(mul_rows(a, s_q, self.base_q.q, self.base_q.q_f), e, self.base_q.q), self.base_q.q)
        pk = PublicKey(self.digest, np.stack([b, a]))
        steps = sorted(set(sum_rotation_steps(n)) | {int(x) for x in rotation_steps})
        elements = [pow(3, st, 2 * n) for st in steps] + [2 * n - 1]
        keys = {g: self._galois_key(s_ntt, g, rng) for g in elements}
        return KeySet(sk, pk, GaloisKeySet(n, self.digest, keys))

    def _galois_key(self, s_ntt, g, rng):
        base = self.base_qp
        n, L = self.n, self.L
        s_g = s_ntt[:, self._perm(g)]
        kb = np.empty((L, L + 1, n), dtype=np.uint64)
        ka = np.empty((L, L + 1, n), dtype=np.uint64)
        for i in range(L):
            a = np.stack([rng.integers(0, q, size=n, dtype=np.uint64) for q in base.primes])
            e = base.ntt(base.lift_signed(sample_gaussian(n, rng, self.params.sigma)))
            b = neg_rows(add_rows(mul_rows(a, s_ntt, base.q, base.q_f), e, base.q), base.q)
            # P * (Q/q_i) * [(Q/q_i)^-1]_{q_i} is P mod q_i on row i and 0 elsewhere
            qi = base.q[i:i + 1]
            factor = np.array([self.P % self.params.q_primes[i]], dtype=np.uint64)
            extra = mul_scalar_rows(s_g[i:i + 1], factor, qi, 1.0 / qi.astype(np.float64))
            b[i:i + 1] = add_rows(b[i:i + 1], extra, qi)
            kb[i], ka[i] = b, a
        return kb, ka

    def _perm(self, g: int) -> np.ndarray:
        perm = self._perm_cache.get(g)
        if perm is None:
            perm = self._index_of_exp[(self._exponents * g) % (2 * self.n)]
            self._perm_cache[g] = perm
        return perm

    # -- encoding ------------------------------------------------------------

    def encode(self, values) -> Plaintext:
        slots = _check_slots(values, self.n, self.t)
        if np.all(slots == slots[0]):
            coeffs = np.zeros(self.n, dtype=np.uint64)
            coeffs[0] = slots[0]
            return Plaintext(coeffs, self.digest, constant=True)
        return Plaintext(self.layout.encode(slots.astype(np.uint64)), self.digest)

    def decode(self, pt: Plaintext) -> np.ndarray:
        self._check(pt)
        return self.layout.decode(pt.coeffs).astype(np.int64)

    def _lift_plain(self, pt: Plaintext) -> np.ndarray:
        if pt._lifted is None:
            pt._lifted = self.base_q.ntt(self.base_q.lift_signed(_centered(pt.coeffs, self.t)))
        return pt._lifted

    def _scaled_plain(self, pt: Plaintext) -> np.ndarray:
        m = self.base_q.lift_signed(pt.coeffs.astype(np.int64))
        dm = mul_scalar_rows(m, self._delta_res, self.base_q.q, self.base_q.q_f)
        return self.base_q.ntt(dm)

    # -- encryption ------------------------------------------------------------

    def encrypt(self, pt: Plaintext, pk: PublicKey, rng=None) -> Ciphertext:
        self._check(pt)
        self._check(pk)
        rng = rng if rng is not None else default_rng()
        bq = self.base_q
        n, sigma = self.n, self.params.sigma
        u = bq.ntt(bq.lift_signed(sample_ternary(n, rng)))
        e1 = bq.lift_signed(sample_gaussian(n, rng, sigma))
        e2 = bq.lift_signed(sample_gaussian(n, rng, sigma))
        m = bq.lift_signed(pt.coeffs.astype(np.int64))
        dm = mul_scalar_rows(m, self._delta_res, bq.q, bq.q_f)
        noisy = bq.ntt(add_rows(e1, dm, bq.q))
        e2n = bq.ntt(e2)
        c0 = add_rows(mul_rows(pk.data[0], u, bq.q, bq.q_f), noisy, bq.q)
        c1 = add_rows(mul_rows(pk.data[1], u, bq.q, bq.q_f), e2n, bq.q)
        return Ciphertext(np.stack([c0, c1]), self.digest)

    def _phase(self, ct: Ciphertext, sk: SecretKey) -> list[int]:
        bq = self.base_q
        x = add_rows(ct.data[0], mul_rows(ct.data[1], sk.ntt[: self.L], bq.q, bq.q_f), bq.q)
        res = bq.intt(x)
        total = np.zeros(self.n, dtype=object)
        for row, w in zip(res, self._crt_w):
            total = total + row.astype(object) * w
        return [int(v) % self.Q for v in total]

    def _budget_from_phase(self, phase) -> int:
        Q, t = self.Q, self.t
        norm = 0
        for x in phase:
            w = (t * x) % Q
            if w > Q // 2:
                w = Q - w
            if w > norm:
                norm = w
        return max(0, Q.bit_length() - 1 - norm.bit_length())

    def decrypt(self, ct: Ciphertext, sk: SecretKey) -> Plaintext:
        self._check(ct)
        self._check(sk)
        phase = self._phase(ct, sk)
        if self._budget_from_phase(phase) <= 0:
            raise DecryptionError("noise budget exhausted")
        Q, t = self.Q, self.t
        m = np.array([((t * x + Q // 2) // Q) % t for x in phase], dtype=np.uint64)
        return Plaintext(m, self.digest)

    def noise_budget(self, ct: Ciphertext, sk: SecretKey) -> int:
        self._check(ct)
        return self._budget_from_phase(self._phase(ct, sk))

    # -- evaluation ------------------------------------------------------------

    def _check(self, obj):
        if obj.params_digest != self.digest:
            raise ParameterError("object belongs to different encryption parameters")

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check(a)
        self._check(b)
        shape = (2 * self.L, self.n)
        out = add_rows(a.data.reshape(shape), b.data.reshape(shape), self._q2)
        return Ciphertext(out.reshape(a.data.shape), self.digest)

    def add_many(self, cts) -> Ciphertext:
        cts = list(cts)
        if not cts:
            raise ValueError("add_many needs at least one ciphertext")
        acc = cts[0]
        for c in cts[1:]:
            acc = self.add(acc, c)
        return acc

    def add_plain(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext:
        self._check(ct)
        self._check(pt)
        bq = self.base_q
        c0 = add_rows(ct.data[0], self._scaled_plain(pt), bq.q)
        return Ciphertext(np.stack([c0, ct.data[1]]), self.digest)

    def mul_plain(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext:
        self._check(ct)
        self._check(pt)
        shape = (2 * self.L, self.n)
        flat = ct.data.reshape(shape)
        if pt.constant:
            c = int(_centered(pt.coeffs[:1], self.t)[0])
            s = np.array([c % q for q in self.params.q_primes] * 2, dtype=np.uint64)
            out = mul_scalar_rows(flat, s, self._q2, self._q2_f)
        else:
            lifted = self._lift_plain(pt)
            out = mul_rows(flat, np.concatenate([lifted, lifted]), self._q2, self._q2_f)
        return Ciphertext(out.reshape(ct.data.shape), self.digest)

    def _apply_galois(self, ct: Ciphertext, g: int, galois: GaloisKeySet) -> Ciphertext:
        self._check(ct)
        if galois.params_digest != self.digest:
            raise ParameterError("Galois keys belong to different encryption parameters")
        kb, ka = galois.get(g)
        perm = self._perm(g)
        c0 = np.ascontiguousarray(ct.data[0][:, perm])
        c1 = np.ascontiguousarray(ct.data[1][:, perm])
        bqp = self.base_qp
        d0, d1 = _key_switch(c1, kb, ka, bqp.q, bqp.q_f, bqp.psi_rev, bqp.psi_rev_f,
                             bqp.ipsi_rev, bqp.ipsi_rev_f, bqp.inv_n, bqp.inv_n_f,
                             self._p_inv, self._p_inv_f)
        c0 = add_rows(c0, d0, self.base_q.q)
        return Ciphertext(np.stack([c0, d1]), self.digest)

    def rotate_slots(self, ct: Ciphertext, step: int, galois: GaloisKeySet) -> Ciphertext:
        if not 1 <= step < self.n // 2:
            raise ValueError(f"rotation step must lie in [1, {self.n // 2})")
        return self._apply_galois(ct, pow(3, step, 2 * self.n), galois)

    def swap_halves(self, ct: Ciphertext, galois: GaloisKeySet) -> Ciphertext:
        return self._apply_galois(ct, 2 * self.n - 1, galois)

    def sum_all_slots(self, ct: Ciphertext, galois: GaloisKeySet) -> Ciphertext:
        return sum_all_slots(self, ct, galois)


# --------------------------------------------------------------------------
# clear simulator


@dataclass(frozen=True, eq=False)
class ClearPlaintext:
    slots: np.ndarray
    params_digest: int


@dataclass(frozen=True, eq=False)
class ClearCiphertext:
    slots: np.ndarray
    params_digest: int


@dataclass(frozen=True)
class ClearKey:
    params_digest: int
    role: str


class ClearSimBackend:
    """Slot-level oracle with the BFV interface; no noise, no security."""

    variant = "ClearSim"

    def __init__(self, n: int, t: int):
        if n < 2 or n & (n - 1):
            raise ParameterError(f"n must be a power of two, got {n}")
        if (t - 1) % (2 * n):
            raise ParameterError(f"plaintext modulus {t} is not 1 mod {2 * n}")
        self.n = n
        self.t = t
        self.digest = int.from_bytes(hashlib.blake2b(f"clear|{n}|{t}".encode(), digest_size=8).digest(), "little")

    @classmethod
    def like(cls, params: EncryptionParams) -> "ClearSimBackend":
        return cls(params.n, params.t)

    def _check(self, obj):
        if obj.params_digest != self.digest:
            raise ParameterError("object belongs to a different backend")

    def keygen(self, rng=None, rotation_steps=()) -> KeySet:
        steps = sorted(set(sum_rotation_steps(self.n)) | {int(x) for x in rotation_steps})
        keys = {pow(3, s, 2 * self.n): None for s in steps}
        keys[2 * self.n - 1] = None
        return KeySet(ClearKey(self.digest, "secret"), ClearKey(self.digest, "public"),
                      GaloisKeySet(self.n, self.digest, keys))

    def encode(self, values) -> ClearPlaintext:
        return ClearPlaintext(_check_slots(values, self.n, self.t), self.digest)

    def decode(self, pt) -> np.ndarray:
        self._check(pt)
        return pt.slots.copy()

    def encrypt(self, pt, pk, rng=None) -> ClearCiphertext:
        self._check(pt)
        self._check(pk)
        return ClearCiphertext(pt.slots.copy(), self.digest)

    def decrypt(self, ct, sk) -> ClearPlaintext:
        self._check(ct)
        self._check(sk)
        return ClearPlaintext(ct.slots.copy(), self.digest)

    def noise_budget(self, ct, sk) -> float:
        return math.inf

    def add(self, a, b):
        self._check(a)
        self._check(b)
        return ClearCiphertext((a.slots + b.slots) % self.t, self.digest)

    def add_many(self, cts):
        cts = list(cts)
        if not cts:
            raise ValueError("add_many needs at least one ciphertext")
        acc = cts[0]
        for c in cts[1:]:
            acc = self.add(acc, c)
        return acc

    def add_plain(self, ct, pt):
        self._check(ct)
        self._check(pt)
        return ClearCiphertext((ct.slots + pt.slots) % self.t, self.digest)

    def mul_plain(self, ct, pt):
        self._check(ct)
        self._check(pt)
        if self.t < 1 << 31:
            prod = (ct.slots * pt.slots) % self.t
        else:
            prod = ((ct.slots.astype(object) * pt.slots.astype(object)) % self.t).astype(np.int64)
        return ClearCiphertext(prod, self.digest)

    def _galois(self, galois: GaloisKeySet, g: int):
        if galois.params_digest != self.digest:
            raise ParameterError("Galois keys belong to a different backend")
        galois.get(g)

    def rotate_slots(self, ct, step, galois):
        if not 1 <= step < self.n // 2:
            raise ValueError(f"rotation step must lie in [1, {self.n // 2})")
        self._check(ct)
        self._galois(galois, pow(3, step, 2 * self.n))
        h = self.n // 2
        rows = ct.slots.reshape(2, h)
        return ClearCiphertext(np.roll(rows, -step, axis=1).reshape(self.n), self.digest)

    def swap_halves(self, ct, galois):
        self._check(ct)
        self._galois(galois, 2 * self.n - 1)
        h = self.n // 2
        return ClearCiphertext(np.concatenate([ct.slots[h:], ct.slots[:h]]), self.digest)

    def sum_all_slots(self, ct, galois):
        return sum_all_slots(self, ct, galois)


def make_backend(params: EncryptionParams, variant: str = "BFV"):
    if variant == "BFV":
        return BfvBackend(params)
    if variant == "ClearSim":
        return ClearSimBackend.like(params)
    raise ValueError(f"unknown backend variant {variant!r}")


# --------------------------------------------------------------------------
# binary serialization
#
# header: magic "HECT", version u16, kind u8, params hash u64, n u32,
# part count u32; each part: tag u64, rows u32, then rows*n u64 (LE).

MAGIC = b"HECT"
VERSION = 1
_HEADER = struct.Struct("<4sHBQII")
_PART = struct.Struct("<QI")

KIND_CIPHERTEXT, KIND_PLAINTEXT, KIND_SECRET, KIND_PUBLIC, KIND_GALOIS = 1, 2, 3, 4, 5


class SerializationError(ValueError):
    pass


def _parts_of(obj):
    if isinstance(obj, Ciphertext):
        return KIND_CIPHERTEXT, [(0, obj.data[0]), (1, obj.data[1])], obj.data.shape[2]
    if isinstance(obj, Plaintext):
        return KIND_PLAINTEXT, [(int(obj.constant), obj.coeffs[None])], obj.coeffs.shape[0]
    if isinstance(obj, SecretKey):
        return KIND_SECRET, [(0, obj.ntt)], obj.ntt.shape[1]
    if isinstance(obj, PublicKey):
        return KIND_PUBLIC, [(0, obj.data[0]), (1, obj.data[1])], obj.data.shape[2]
    if isinstance(obj, GaloisKeySet):
        parts = []
        for g in sorted(obj.keys):
            kb, ka = obj.keys[g]
            L, big, n = kb.shape
            parts.append(((g << 1) | 0, kb.reshape(L * big, n)))
            parts.append(((g << 1) | 1, ka.reshape(L * big, n)))
        return KIND_GALOIS, parts, obj.n
    raise SerializationError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> bytes:
    kind, parts, n = _parts_of(obj)
    chunks = [_HEADER.pack(MAGIC, VERSION, kind, obj.params_digest, n, len(parts))]
    for tag, arr in parts:
        arr = np.ascontiguousarray(arr, dtype="<u8")
        chunks.append(_PART.pack(tag, arr.shape[0]))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def loads(data: bytes, offset: int = 0):
    """Parse one object; returns (obj, next_offset)."""
    if len(data) - offset < _HEADER.size:
        raise SerializationError("truncated header")
    magic, version, kind, digest, n, count = _HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise SerializationError("bad magic")
    if version != VERSION:
        raise SerializationError(f"unsupported version {version}")
    pos = offset + _HEADER.size
    parts = []
    for _ in range(count):
        if len(data) - pos < _PART.size:
            raise SerializationError("truncated part header")
        tag, rows = _PART.unpack_from(data, pos)
        pos += _PART.size
        size = rows * n * 8
        if len(data) - pos < size:
            raise SerializationError("truncated part body")
        arr = np.frombuffer(data, dtype="<u8", count=rows * n, offset=pos).reshape(rows, n).astype(np.uint64)
        pos += size
        parts.append((tag, arr))
    if kind == KIND_CIPHERTEXT:
        obj = Ciphertext(np.stack([parts[0][1], parts[1][1]]), digest)
    elif kind == KIND_PLAINTEXT:
        obj = Plaintext(parts[0][1][0].copy(), digest, constant=bool(parts[0][0]))
    elif kind == KIND_SECRET:
        obj = SecretKey(digest, parts[0][1])
    elif kind == KIND_PUBLIC:
        obj = PublicKey(digest, np.stack([parts[0][1], parts[1][1]]))
    elif kind == KIND_GALOIS:
        keys = {}
        for (tag_b, kb), (_, ka) in zip(parts[0::2], parts[1::2]):
            rows = kb.shape[0]
            L = int((math.isqrt(4 * rows + 1) - 1) // 2)  # rows = L*(L+1)
            keys[tag_b >> 1] = (kb.reshape(L, L + 1, n), ka.reshape(L, L + 1, n))
        obj = GaloisKeySet(n, digest, keys)
    else:
        raise SerializationError(f"unknown kind {kind}")
    return obj, pos
