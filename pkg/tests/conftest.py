import sys

import numpy as np
import pytest
import scipy.sparse as sp

from sketchgnn.data import GraphDataset, sbm_generate
from sketchgnn.model import GnnVariant
from sketchgnn.verify import _variant_matrix, random_graph


def small_variant(kind, n, rng, p=None):
    a = random_graph(n, p if p is not None else min(1.0, 3.0 / n), rng)
    return GnnVariant(kind, _variant_matrix(kind, a))


def dense(m):
    return m.toarray() if sp.issparse(m) else np.asarray(m)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_sbm():
    """300-node two-block planted partition used by the training examples."""
    return sbm_generate(2, 150, 0.1, 0.01, 32, 0, noise=0.5)


@pytest.fixture
def tiny_dataset():
    edges = np.array([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [0, 5], [1, 4]])
    feats = np.arange(18, dtype=np.float64).reshape(6, 3) / 10.0
    labels = np.array([0, 0, 1, 1, 0, 1])
    return GraphDataset(6, edges, feats, labels,
                        {"train": [0, 1, 2, 3], "val": [4], "test": [5]})


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
        terminalreporter.write_line(line)
    terminalreporter.write_line(mod.NOT_APPLICABLE)
