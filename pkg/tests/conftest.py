import numpy as np
import pytest

from freestream import Ball, PopulationTriangle, Slab, build_grids


@pytest.fixture(scope="session")
def slab():
    return Slab(1.0)


@pytest.fixture(scope="session")
def slab_grids(slab):
    return build_grids(slab, nx=60, nv=40)


@pytest.fixture(scope="session")
def slab_grids_inclusive(slab):
    return build_grids(slab, nx=60, nv=40, speed_rule="inclusive")


@pytest.fixture(scope="session")
def ball():
    return Ball(2, 1.0, speeds=(0.5, 1.0))


@pytest.fixture(scope="session")
def ball_grids(ball):
    return build_grids(ball, nx=12, nv=4, n_dir=32, n_boundary=32)


@pytest.fixture(scope="session")
def unit_ball():
    return Ball(2, 1.0, speeds=(1.0, 1.0))


@pytest.fixture(scope="session")
def unit_ball_grids(unit_ball):
    return build_grids(unit_ball, nx=10, nv=2, n_dir=32, n_boundary=32)


@pytest.fixture(scope="session")
def triangle():
    return PopulationTriangle(0.2, 1.0)


@pytest.fixture(scope="session")
def triangle_grids(triangle):
    return build_grids(triangle, nx=24, nv=32)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
