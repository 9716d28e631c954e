import pytest

from model_manager import HmmModel, make_builtin


@pytest.fixture
def two_state() -> HmmModel:
    return make_builtin('two-state')


@pytest.fixture
def tail_model() -> HmmModel:
    return make_builtin('tail-example')


@pytest.fixture
def ar1_model() -> HmmModel:
    return make_builtin('ar1-indicator')
