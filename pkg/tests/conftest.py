import numpy as np
import pytest

from qihnmpc.lyapunov import StageWeights, TuningParams
from qihnmpc.model import BoxSet, two_state_benchmark
from qihnmpc.terminal import synthesize_terminal


@pytest.fixture(scope="session")
def bench():
    return two_state_benchmark()


@pytest.fixture(scope="session")
def euler_bench():
    return two_state_benchmark(discretization="euler")


@pytest.fixture(scope="session")
def weights():
    return StageWeights(np.eye(2), np.array([[0.5]]))


@pytest.fixture(scope="session")
def ubox():
    return BoxSet.symmetric(2.0)


@pytest.fixture(scope="session")
def regions(bench, weights, ubox):
    """Certified comparison regions, computed once per session."""
    specs = {
        "yu": TuningParams("yu", kappa=1.0 / 0.91),
        "ac_best": TuningParams("arbitrary_controller", rho_x=100.0, rho_u=100.0),
        "lqr_best": TuningParams("lqr_inflated", rho_x=100.0, rho_u=100.0),
    }
    return {k: synthesize_terminal(bench, weights, p, ubox) for k, p in specs.items()}


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
