"""Shared pytest fixtures."""

import pytest

from aoi_whittle.policy_core import ClassSpec, SystemConfig
from aoi_whittle.relaxed_solver import solve_relaxed


@pytest.fixture
def two_class_config():
    """Two equally sized classes, p = (0.8, 0.5), half the users scheduled per slot."""
    return SystemConfig(classes=(ClassSpec(p=0.8, gamma=0.5), ClassSpec(p=0.5, gamma=0.5)), alpha=0.5)


@pytest.fixture
def two_class_solution(two_class_config):
    return solve_relaxed(two_class_config)


@pytest.fixture
def perfect_channel_config():
    """Single class with a perfect channel and half the users scheduled."""
    return SystemConfig(classes=(ClassSpec(p=1.0, gamma=1.0),), alpha=0.5)


@pytest.fixture
def violating_config():
    """Two-class config whose budget is below B_alpha = 0.625."""
    return SystemConfig(classes=(ClassSpec(p=0.4, gamma=0.5), ClassSpec(p=0.2, gamma=0.5)), alpha=0.3)
