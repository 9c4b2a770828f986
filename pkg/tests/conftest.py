import numpy as np
import pytest

from cfdiff import world as wd
from cfdiff.world import MixtureComponent, make_world

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def triad():
    return wd.get_world("triad")


@pytest.fixture
def moons():
    return wd.get_world("two-moons-gauss")


@pytest.fixture
def sym_world():
    """Two equal-weight isotropic classes at (+-2, 0)."""
    return make_world([
        MixtureComponent((2.0, 0.0), 0.25, 0.5, 0, (0.9, 0.1)),
        MixtureComponent((-2.0, 0.0), 0.25, 0.5, 1, (0.1, 0.9)),
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_makereport(item, call):
    crit = item.get_closest_marker("criterion")
    if crit is None or call.when != "call":
        return
    n = crit.args[0]
    ok = call.excinfo is None
    prev = ACCEPTANCE_RESULTS.get(n, (True, item.name))
    ACCEPTANCE_RESULTS[n] = (prev[0] and ok, item.name if not ok else prev[1])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, name = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}" + ("" if ok else f" ({name})"))


@pytest.fixture(scope="session")
def moons_harness():
    """Trained linear target on two-moons with an 8-D ambient codec."""
    from pathlib import Path

    from cfdiff.cli import Harness
    from cfdiff.config import load_config

    h = Harness.from_config(load_config(Path(__file__).parents[1] / "configs" / "moons_linear.json"))
    return h, h.classifier()


@pytest.fixture(scope="session")
def overfit_harness():
    from pathlib import Path

    from cfdiff.cli import Harness
    from cfdiff.config import load_config

    h = Harness.from_config(load_config(Path(__file__).parents[1] / "configs" / "moons_overfit_mlp.json"))
    return h, h.classifier()
