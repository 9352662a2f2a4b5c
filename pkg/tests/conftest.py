import numpy as np
import pytest

from fracspde.mesh import build_rect_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(20260823)


@pytest.fixture(scope="session")
def unit_mesh():
    """16 vertices, 18 triangles on [0,2]^2 with a half-unit extension."""
    return build_rect_mesh((0.0, 2.0, 0.0, 2.0), 0.5, 1.0)
