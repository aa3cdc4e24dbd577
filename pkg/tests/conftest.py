import pytest

from deltaKit.core.numerics import Rng
from deltaKit.core.scan import random_inputs


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def make_inputs():
    """Factory for valid random sequence inputs: make_inputs(rule, L, d_k, d_v=None, lanes=(), seed=0)."""
    def factory(rule, L, d_k=8, d_v=None, lanes=(), seed=0):
        return random_inputs(rule, L, d_k, d_v, lanes=lanes, seed=seed)
    return factory
