import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from arbc.core import AutoregressiveMdp
from arbc.policies import TabularPolicy

settings.register_profile("arbc", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("arbc")


def random_mdp(rng, m=None, A=None, H=None):
    m = m or int(rng.integers(1, 4))
    A = A or int(rng.integers(2, 4))
    H = H or int(rng.integers(1, 4))
    return AutoregressiveMdp(rng.dirichlet(np.ones(m)), A, H)


def random_policy(rng, mdp, alpha=1.0):
    A = mdp.n_actions
    tabs = [rng.dirichlet(alpha * np.ones(A), size=mdp.n_contexts * A ** (h - 1)) for h in range(1, mdp.horizon + 1)]
    return TabularPolicy(tabs, A)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
