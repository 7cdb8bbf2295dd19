"""Shared fixtures: small instances for unit tests, suites for acceptance."""

from __future__ import annotations

import numpy as np
import pytest

from undistort.synth import SynthSpec, generate, make_suite


@pytest.fixture(scope="session")
def small_spec():
    """Compact generation settings for fast unit tests."""
    return SynthSpec(n_landmarks=24, latent_dim=5, width=256, height=256)


@pytest.fixture(scope="session")
def small_instance(small_spec):
    return generate(11, small_spec)


@pytest.fixture(scope="session")
def default_instance():
    """One full-size instance with the default generation settings."""
    return generate(5, SynthSpec())


@pytest.fixture(scope="session")
def standard_suite():
    """The 100-instance noiseless suite shared by the recovery criteria."""
    return make_suite(100, 1000, SynthSpec())


@pytest.fixture(scope="session")
def noisy_suite():
    """Same seeds as the standard suite but with landmark noise."""
    return make_suite(100, 1000, SynthSpec(noise_sigma=0.002))


@pytest.fixture(scope="session")
def heldout_suite():
    """50 instances on seeds disjoint from the standard suite."""
    return make_suite(50, 20000, SynthSpec())


@pytest.fixture
def rng():
    return np.random.default_rng(0)
