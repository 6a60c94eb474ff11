from __future__ import annotations

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from postadiabatic.operators import (one_coordinate_two_level, standard_two_level_complex,  # noqa: E402
                                     standard_two_level_real)
from postadiabatic.scenario import load_scenario  # noqa: E402
from postadiabatic.tensors import ModelField, Potential  # noqa: E402


@pytest.fixture(scope="session")
def real_field():
    return standard_two_level_real()


@pytest.fixture(scope="session")
def complex_field():
    return standard_two_level_complex()


@pytest.fixture(scope="session")
def k1_field():
    return one_coordinate_two_level()


@pytest.fixture(scope="session")
def standard_scenario():
    return load_scenario("complex_standard")


@pytest.fixture(scope="session")
def standard_model(standard_scenario):
    return standard_scenario.model_field()


@pytest.fixture(scope="session")
def o4_model(k1_field):
    return ModelField(k1_field, level=0, epsilon=0.1, kinetic_mass=0.01, potential=Potential.harmonic(1, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    lines = test_acceptance.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
