import numpy as np
import pytest

from sparsetdnn.model import Topology, init_params


def random_params(scale=1 / 16, n_classes=3, seed=0, bias_std=0.1):
    """Model with random weights and non-zero biases (so dead-unit paths are exercised)."""
    rng = np.random.default_rng(seed)
    p = init_params(Topology.table1(scale), n_classes, rng)
    for k in p.tensors:
        if k.endswith("bias"):
            p.tensors[k] = rng.normal(0, bias_std, p.tensors[k].shape)
    return p


@pytest.fixture
def small_params():
    return random_params()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria register one line each; printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"ACCEPTANCE C{n} {'PASS' if ok else 'FAIL'}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
