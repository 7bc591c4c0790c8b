import numpy as np
import pytest
from hypothesis import settings

from distofo.netgraph import build_graph, metropolis_weights, standard_graphs
from distofo.objective import ReducedObjective, remark2_scale, tracking_objectives
from distofo.plant import AffinePlant

settings.register_profile("default", deadline=None)
settings.load_profile("default")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


PATH3_H = np.array([[0.5, 0.2, 0.0], [0.2, 0.5, 0.2], [0.0, 0.2, 0.5]])
PATH3_B = np.array([0.3, -0.2, 0.1])


@pytest.fixture
def path3_problem():
    """3-node path with an affine plant and tracking objectives scaled so that m > 1."""
    graph = standard_graphs("path", 3)
    plant = AffinePlant(PATH3_H, PATH3_B)
    objs = tracking_objectives(np.zeros(3))
    model = ReducedObjective(plant, objs).quadratic_model()
    m = float(np.linalg.eigvalsh(model.hessian())[0])
    c = remark2_scale(m)
    objs = [o.scaled(c) for o in objs]
    return graph, plant, objs, c


def random_connected_graph(rng: np.random.Generator, n: int, extra: float = 0.3):
    """Random spanning tree plus each remaining pair with probability ``extra``."""
    perm = rng.permutation(n)
    edges = {tuple(sorted((int(perm[i]), int(perm[rng.integers(0, i)])))) for i in range(1, n)}
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < extra:
                edges.add((i, j))
    return build_graph(n, sorted(edges))


def random_weights(rng, n, tau=1):
    return metropolis_weights(random_connected_graph(rng, n), tau)
