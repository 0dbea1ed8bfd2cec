"""Fixed-point scaling and plaintext CRT across two plaintext moduli."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bfv import PAPER_T0, PAPER_T1


class RangeError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingConfig:
    s_x: int = 6
    s_w: int = 14
    input_int_bits: int = 8

    def __post_init__(self):
        if self.s_x < 0 or self.s_w < 0:
            raise ValueError("scale exponents must be non-negative")

    @property
    def output_exponent(self) -> int:
        return self.s_x + self.s_w


@dataclass(frozen=True)
class PlainModuliPair:
    t0: int = PAPER_T0
    t1: int = PAPER_T1

    def __post_init__(self):
        if math.gcd(self.t0, self.t1) != 1:
            raise ValueError("plaintext moduli must be coprime")

    @property
    def moduli(self) -> tuple[int, int]:
        return (self.t0, self.t1)

    @property
    def product(self) -> int:
        return self.t0 * self.t1

    @property
    def capacity_bits(self) -> float:
        return math.log2(self.product)

    @property
    def half_range(self) -> int:
        """Values must satisfy |v| < half_range."""
        return (self.product + 1) // 2


@dataclass(frozen=True)
class SignedResidues:
    r0: int
    r1: int


# --------------------------------------------------------------------------
# scaling


def scale_value(x: float, exponent: int, limit: int | None = None) -> int:
    """round(x * 2**exponent), halves rounded away from zero."""
    y = math.ldexp(float(x), exponent)
    if not math.isfinite(y):
        raise RangeError(f"cannot scale {x!r}")
    v = int(math.floor(abs(y) + 0.5))
    v = -v if y < 0 else v
    if limit is not None and abs(v) >= limit:
        raise RangeError(f"scaled value {v} exceeds capacity {limit}")
    return v


def scale_array(x, exponent: int, limit: int | None = None) -> np.ndarray:
    """Vectorised :func:`scale_value`; returns int64."""
    y = np.ldexp(np.asarray(x, dtype=np.float64), exponent)
    if not np.all(np.isfinite(y)):
        raise RangeError("non-finite value")
    if y.size and np.max(np.abs(y)) >= 2.0 ** 62:
        raise RangeError("scaled value does not fit in 63 bits")
    v = (np.sign(y) * np.floor(np.abs(y) + 0.5)).astype(np.int64)
    if limit is not None and v.size and np.max(np.abs(v)) >= limit:
        raise RangeError(f"scaled value exceeds capacity {limit}")
    return v


def descale_output(v, cfg: ScalingConfig):
    """Scaled integer result back to a real number."""
    if isinstance(v, (int, np.integer)):
        return math.ldexp(float(int(v)), -cfg.output_exponent)
    return np.ldexp(np.asarray(v, dtype=np.float64), -cfg.output_exponent)


# --------------------------------------------------------------------------
# capacity


def required_output_bits(f: int, cfg: ScalingConfig) -> int:
    if f < 1:
        raise ValueError("feature count must be positive")
    return cfg.input_int_bits + cfg.s_x + cfg.s_w + (f - 1).bit_length()


@dataclass(frozen=True)
class CapacityReport:
    required_bits: int
    available_bits: int

    @property
    def ok(self) -> bool:
        return self.required_bits + 1 <= self.available_bits

    @property
    def deficit(self) -> int:
        return max(0, self.required_bits + 1 - self.available_bits)


def capacity_check(f: int, cfg: ScalingConfig, moduli) -> CapacityReport:
    """Compare needed output bits (+1 for sign) with floor(log2(prod t))."""
    if isinstance(moduli, PlainModuliPair):
        moduli = moduli.moduli
    elif isinstance(moduli, int):
        moduli = (moduli,)
    product = math.prod(int(m) for m in moduli)
    return CapacityReport(required_output_bits(f, cfg), product.bit_length() - 1)


def ensure_capacity(f: int, cfg: ScalingConfig, moduli) -> None:
    report = capacity_check(f, cfg, moduli)
    if not report.ok:
        raise CapacityError(
            f"f={f} needs {report.required_bits}+1 bits but the plaintext space holds "
            f"{report.available_bits}; short by {report.deficit} bits")


# --------------------------------------------------------------------------
# CRT


def crt_split(v: int, pair: PlainModuliPair = PlainModuliPair()) -> SignedResidues:
    v = int(v)
    if abs(v) >= pair.half_range:
        raise RangeError(f"|{v}| does not fit below t0*t1/2")
    return SignedResidues(v % pair.t0, v % pair.t1)


def crt_recombine(r: SignedResidues, pair: PlainModuliPair = PlainModuliPair()) -> int:
    t0, t1 = pair.t0, pair.t1
    # Garner: v = r0 + t0 * ((r1 - r0) * t0^-1 mod t1)
    k = ((r.r1 - r.r0) * pow(t0, -1, t1)) % t1
    v = r.r0 + t0 * k
    return v - pair.product if v >= pair.half_range else v


def crt_split_array(v, pair: PlainModuliPair = PlainModuliPair()) -> tuple[np.ndarray, np.ndarray]:
    """Signed int64 values to residue arrays (one per modulus)."""
    v = np.asarray(v, dtype=np.int64)
    if v.size and np.max(np.abs(v)) >= pair.half_range:
        raise RangeError("value does not fit below t0*t1/2")
    return np.mod(v, pair.t0), np.mod(v, pair.t1)


def crt_recombine_array(r0, r1, pair: PlainModuliPair = PlainModuliPair()) -> np.ndarray:
    """Inverse of :func:`crt_split_array` with centred lift; exact in int64."""
    t0, t1 = pair.t0, pair.t1
    if pair.product >= 1 << 62 or t1 >= 1 << 31:
        out = [crt_recombine(SignedResidues(int(a), int(b)), pair)
               for a, b in zip(np.ravel(r0), np.ravel(r1))]
        return np.array(out, dtype=object).reshape(np.shape(r0))
    r0 = np.asarray(r0, dtype=np.int64)
    r1 = np.asarray(r1, dtype=np.int64)
    k = (np.mod(r1 - r0, t1) * pow(t0, -1, t1)) % t1
    v = r0 + t0 * k
    return np.where(v >= pair.half_range, v - pair.product, v)


class TwinBackends:
    """One single-modulus backend per plaintext modulus, run side by side.

    Usually two backends (the CRT pair); a single backend is accepted for
    small experiments, in which case results are centred mod t.
    """

    def __init__(self, backends):
        backends = tuple(backends)
        if not 1 <= len(backends) <= 2:
            raise ValueError("expected one or two backends")
        if len({b.n for b in backends}) != 1:
            raise ValueError("backends disagree on ring degree")
        self.backends = backends
        self.moduli = tuple(b.t for b in backends)
        self.pair = PlainModuliPair(*self.moduli) if len(backends) == 2 else None
        self.n = backends[0].n

    def __iter__(self):
        return iter(self.backends)

    def __len__(self):
        return len(self.backends)

    def __getitem__(self, i):
        return self.backends[i]

    @property
    def product(self) -> int:
        return math.prod(self.moduli)

    def split(self, values) -> list[np.ndarray]:
        v = np.asarray(values, dtype=np.int64)
        if v.size and np.max(np.abs(v)) >= (self.product + 1) // 2:
            raise RangeError("value does not fit below half the plaintext space")
        return [np.mod(v, t) for t in self.moduli]

    def recombine(self, residues) -> np.ndarray:
        if self.pair is not None:
            return crt_recombine_array(residues[0], residues[1], self.pair)
        t = self.moduli[0]
        r = np.asarray(residues[0], dtype=np.int64)
        return np.where(r > t // 2, r - t, r)
