import numpy as np
import pytest

from thermoscout.config import build_setup, parse_config

from oracles import icosphere


@pytest.fixture(scope="session")
def sphere_mesh3():
    """Level-3 unit icosphere as a thermoscout TriMesh."""
    from thermoscout.geometry import TriMesh

    verts, faces = icosphere(3)
    return TriMesh(vertices=verts, faces=faces)


SMALL_SCENARIO = {
    "part": {
        "outer": [16.0, 12.0],
        "pocket": [8.0, 4.0],
        "n_layers": 10,
        "layer_interval_steps": 40,
    },
    "loop": {"horizon_steps": 400, "steps_per_measurement": 40},
    "sensor": {"noise_std": 1.0},
    "ground_truth": {"resolution_factor": 2, "substeps": 2},
    "seed": 11,
}


@pytest.fixture(scope="session")
def small_setup():
    """A fast 10-cycle scenario shared by loop-level tests."""
    return build_setup(parse_config(SMALL_SCENARIO))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
