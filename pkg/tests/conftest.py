import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    max_examples=50,
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid_mesh():
    from meshglm import make_grid_mesh

    return make_grid_mesh(6, 7)


@pytest.fixture(scope="session")
def grid_fem(grid_mesh):
    from meshglm import assemble_fem

    return assemble_fem(grid_mesh)


@pytest.fixture(scope="session")
def icosphere():
    from meshglm import make_icosphere

    return make_icosphere(1, radius=10.0)


def rng(seed=0):
    return np.random.default_rng(seed)
