"""Shared fixtures for the HOLD test suite."""

from pathlib import Path
import sys

import numpy as np
import pytest

# Ensure imports work when pytest runs from any directory
PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(PROJECT_ROOT))

from modules.hold_config import HoldParams, NetSpec  # noqa: E402


@pytest.fixture
def params() -> HoldParams:
    """Short horizon for the kernel and step-level tests."""
    return HoldParams(T=1.0).validate()


@pytest.fixture
def mixed_params() -> HoldParams:
    """Default horizon, long enough for p_T to match the prior."""
    return HoldParams().validate()


@pytest.fixture
def small_spec() -> NetSpec:
    return NetSpec(d=1, hidden_width=8, n_hidden=2)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
