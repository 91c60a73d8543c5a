import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nettmle.scenarios import make_best_arm, make_cluster_mdp, make_household_censoring  # noqa: E402


def tiny_scenarios():
    """Small audited instances (N <= 3, binary supports) used by the oracle checks."""
    return [
        make_best_arm(n_units=2, tau=2, seed=3)[0],
        make_best_arm(n_units=3, tau=3, seed=7)[0],
        make_cluster_mdp(n_clusters=1, cluster_size=2, tau=2, dependence=0.7, seed=4),
        make_cluster_mdp(n_clusters=2, cluster_size=1, tau=3, seed=2),
        make_household_censoring(households=((0,), (1,)), contacts=((1,), (0,)), tau=2),
        make_cluster_mdp(n_clusters=3, cluster_size=1, tau=2, dependence=0.3, seed=9),
    ]


@pytest.fixture(params=range(6), ids=["arm-N2", "arm-N3", "cluster-1x2", "cluster-2x1", "household-2", "cluster-3x1"])
def tiny(request):
    return tiny_scenarios()[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
