import numpy as np
import pytest

from dzcbf.dynamics import ConsensusModel
from dzcbf.graph import CommGraph
from dzcbf.sim import DatasetSpec, Scenario


def case_a_graph():
    return CommGraph.from_lists(4, [0, 3], [(0, 1), (0, 2), (2, 3), (0, 3)])


def case_b_graph():
    return CommGraph.from_lists(4, [0, 3], [(0, 1), (1, 2), (2, 3)])


def case_a_model(graph=None):
    g = case_a_graph() if graph is None else graph
    return ConsensusModel(g, {e: 1.0 for e in g.edges}, n=1)


def case_b_model(graph=None):
    g = case_b_graph() if graph is None else graph
    return ConsensusModel(g, {(0, 1): [1.0, 2.0], (1, 2): [2.0, 1.0], (2, 3): [1.0, 1.0]}, n=2)


def case_a_scenario(**kw):
    g = case_a_graph()
    kw.setdefault("dataset", DatasetSpec())
    kw.setdefault("x0", [-0.5, -1.0, 1.5, 2.0])
    return Scenario(g, case_a_model(g), {0: [1.0], 3: [5.0]}, 15.0, **kw)


def case_b_scenario(**kw):
    g = case_b_graph()
    kw.setdefault("dataset", DatasetSpec(horizon=0.01, dt=0.001))
    kw.setdefault("x0", [0.0, 0.0, 0.5, 0.5, 1.0, 1.0, 1.5, 1.5])
    return Scenario(g, case_b_model(g), {0: [1.0, 1.0], 3: [5.0, 5.0]}, 10.0, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def case_a_pipeline():
    from dzcbf.sim import build_pipeline

    scn = case_a_scenario()
    ds, b = build_pipeline(scn, seed=0)
    return scn, ds, b
