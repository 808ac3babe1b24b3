import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from patientgraph import gnn  # noqa: E402
from patientgraph.ehr import CohortSpec, generate_cohort  # noqa: E402
from patientgraph.encoding import encode_cohort, fit_schema  # noqa: E402


@pytest.fixture(scope="session")
def cohort200():
    return generate_cohort(CohortSpec(200, seed=3, mortality_rate=0.2, signal_strength=1.0, missing_rate=0.1))


@pytest.fixture(scope="session")
def schema200(cohort200):
    return fit_schema(cohort200)


@pytest.fixture(scope="session")
def features200(cohort200, schema200):
    return encode_cohort(cohort200, schema200)


def random_graph_ops(n, p, rng, dense=None):
    i, j = np.triu_indices(n, 1)
    keep = rng.random(i.size) < p
    w = rng.uniform(0.1, 1.0, keep.sum())
    return gnn.GraphOps(n, i[keep], j[keep], w, dense=dense), (i[keep], j[keep], w)


def dense_adj(n, i, j, w):
    A = np.zeros((n, n))
    A[i, j] = w
    A[j, i] = w
    return A


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
