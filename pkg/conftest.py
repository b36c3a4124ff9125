"""Shared fixtures: a two-observation toy model and seeded one-way layouts."""
import numpy as np
import pytest

from scripts.lmm_model import ContrastSet, LmmSpec, VarComponents
from tests.oracles import one_way_spec, random_spec


@pytest.fixture
def toy_spec() -> LmmSpec:
    return LmmSpec(y=np.array([1.0, 3.0]), X=np.ones((2, 1)), Z_blocks=(np.eye(2),))


@pytest.fixture
def toy_vc() -> VarComponents:
    return VarComponents(np.array([1.0, 1.0]))


@pytest.fixture
def intercept_only() -> ContrastSet:
    return ContrastSet(np.array([[1.0]]), np.zeros((2, 1)))


@pytest.fixture
def one_way() -> LmmSpec:
    return one_way_spec(a=4, m=5, seed=7)


@pytest.fixture
def random_instance():
    return random_spec
