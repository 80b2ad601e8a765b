import numpy as np
import pytest

from recoup.density import invariant_density
from recoup.dynamics import MapSpec
from recoup.measures import spec_acip, spec_lebesgue, spec_mu
from recoup.regen import build_engine

# criterion id -> (passed, detail); filled by the acceptance tests
ACCEPTANCE = {}


class System:
    """Invariant density, engine and the standard specs for one map."""

    def __init__(self, map: MapSpec, r_max: int, tau_max: int):
        self.map = map
        self.inv = invariant_density(map)
        self.h = self.inv.h
        self.engine = build_engine(map, self.inv, tau_max=tau_max)
        self.r_max = r_max
        self.tau_max = tau_max
        self._specs = {}

    def spec(self, name):
        if name not in self._specs:
            if name == "mu":
                self._specs[name] = spec_mu(self.map)
            elif name == "lebesgue":
                self._specs[name] = spec_lebesgue(self.map, self.r_max, self.engine)
            else:
                self._specs[name] = spec_acip(self.map, self.h, self.tau_max, self.engine)
        return self._specs[name]


@pytest.fixture(scope="session")
def lsv():
    return System(MapSpec.lsv(0.5), 10**5, 10**6)


@pytest.fixture(scope="session")
def lsv04():
    return System(MapSpec.lsv(0.4), 10**5, 10**6)


@pytest.fixture(scope="session")
def doubling():
    return System(MapSpec.doubling(), 64, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
