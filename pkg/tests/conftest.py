import numpy as np
import pytest

from heinfer import bfv
from heinfer.fixed_point import TwinBackends
from heinfer.ring import default_rng

# small plaintext moduli (prime, = 1 mod 2n) for the test rings
SMALL_T = {8: (65537, 7681), 16: (65537, 7681), 32: (65537, 12289)}


@pytest.fixture(scope="session")
def small_twins():
    """n -> (BFV twin, ClearSim twin, BFV key sets, ClearSim key sets)."""
    out = {}
    rng = default_rng(1234)
    for n, ts in SMALL_T.items():
        bes = [bfv.BfvBackend(bfv.test_params(n, t)) for t in ts]
        sims = [bfv.ClearSimBackend(n, t) for t in ts]
        out[n] = (TwinBackends(bes), TwinBackends(sims),
                  [b.keygen(rng) for b in bes], [s.keygen() for s in sims])
    return out


@pytest.fixture(scope="session")
def paper_backends():
    return [bfv.BfvBackend(bfv.paper_params(t)) for t in (bfv.PAPER_T0, bfv.PAPER_T1)]


@pytest.fixture(scope="session")
def paper_keys(paper_backends):
    rng = default_rng(99)
    return [b.keygen(rng) for b in paper_backends]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
