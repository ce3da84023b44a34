import math

import pytest

from novikov_lab.flow import incidence_table
from novikov_lab.manifold import cosine_model


@pytest.fixture(scope="session")
def exact_t2():
    m = cosine_model((0, 0))
    return m, incidence_table(m, 1.0)


@pytest.fixture(scope="session")
def novikov():
    """0.1 dtheta_1 + 0.3 d(cos theta_1 + cos theta_2) with three periods of action."""
    m = cosine_model((0.1, 0), 0.3)
    return m, incidence_table(m, 3 * 2 * math.pi * 0.1)
