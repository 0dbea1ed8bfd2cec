"""Timing runs for the packed matmul and the sample-batched comparator.

Both runs report wall time per phase (encryption, computation, decryption)
and operation counters.  Inputs are streamed in row batches so the
543 x 40960 case never holds all input ciphertexts at once.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .fixed_point import ScalingConfig
from .matmul import (OpCounters, PackedAccumulator, baseline_matmul, encode_bias, encode_inputs,
                     encode_weights, unpack_baseline, unpack_results)
from .protocol import ClientKeys, QuantizedModel
from .timing import PhaseTimer

PHASES = ("encryption", "computation", "decryption")


@dataclass
class BenchCase:
    f: int
    samples: int
    n_out: int = 11
    seed: int = 0

    def data(self, cfg: ScalingConfig, moduli):
        """Random features in [0, 2**8) and signed unit-scale weights, quantized."""
        rng = np.random.default_rng([self.seed, self.f, self.samples, self.n_out])
        X = rng.uniform(0, 1 << cfg.input_int_bits, (self.samples, self.f))
        W = rng.uniform(-1, 1, (self.n_out, self.f))
        b = rng.uniform(-1, 1, self.n_out)
        q = QuantizedModel.build(W, b, cfg, moduli)
        Xq = np.floor(X * (1 << cfg.s_x) + 0.5).astype(np.int64)
        return Xq, q


@dataclass
class BenchResult:
    method: str
    case: BenchCase
    phases: dict
    counters: OpCounters
    exact: bool
    noise_budget: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return sum(self.phases.get(p, 0.0) for p in PHASES)

    def rows(self):
        for p in PHASES:
            yield {"method": self.method, "f": self.case.f, "samples": self.case.samples,
                   "outputs": self.case.n_out, "phase": p, "seconds": round(self.phases.get(p, 0.0), 6),
                   **self.counters.as_dict(), "exact": int(self.exact)}


CSV_FIELDS = ["method", "f", "samples", "outputs", "phase", "seconds",
              *OpCounters().as_dict().keys(), "exact"]


def run_packed(case: BenchCase, keys: ClientKeys, cfg: ScalingConfig = ScalingConfig(),
               batch_rows: int = 64, workers: int | None = None, rng=None) -> BenchResult:
    twin = keys.twin
    Xq, q = case.data(cfg, twin.pair or twin.moduli[0])
    timer = PhaseTimer()
    W = encode_weights(q.W, twin)
    B = encode_bias(q.b, twin)
    acc = PackedAccumulator(W, B, twin, keys.galois, case.samples, cfg=cfg, workers=workers)
    for start in range(0, case.samples, batch_rows):
        with timer.phase("encryption"):
            X = encode_inputs(Xq[start:start + batch_rows], twin, keys.public, rng)
        with timer.phase("computation"):
            acc.add_rows(X, start)
        del X
    with timer.phase("computation"):
        Y = acc.finish()
    with timer.phase("decryption"):
        got = unpack_results(Y, twin, keys.secret)
    budgets = [be.noise_budget(cts[0], sk) for be, cts, sk in zip(twin, Y.cts, keys.secret)]
    exact = bool(np.array_equal(got, q.scores(Xq)))
    return BenchResult("packed", case, timer.as_dict(), Y.counters, exact, budgets)


def run_baseline(case: BenchCase, keys: ClientKeys, cfg: ScalingConfig = ScalingConfig(),
                 rng=None) -> BenchResult:
    twin = keys.twin
    Xq, q = case.data(cfg, twin.pair or twin.moduli[0])
    timer = PhaseTimer()
    B = encode_bias(q.b, twin)
    res = baseline_matmul(Xq, q.W, B, twin, keys.public, rng, timer=timer)
    with timer.phase("decryption"):
        got = unpack_baseline(res, twin, keys.secret)
    exact = bool(np.array_equal(got, q.scores(Xq)))
    return BenchResult("baseline", case, timer.as_dict(), res.counters, exact)


def write_csv(results, fh) -> None:
    w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in results:
        for row in r.rows():
            w.writerow(row)
