"""Shared fixtures for the gibbswave test suite."""

import numpy as np
import pytest

from gibbswave.linear_system import CouplingConfig
from gibbswave.spectral_field import hermitian_from_nonnegative


def random_coeffs(rng, m, batch=(), decay=0.0):
    """Random Hermitian coefficients with |c_k| ~ (1+k^2)^(-decay/2)."""
    k = np.arange(m + 1)
    scale = (1.0 + k * k) ** (-decay / 2)
    half = (rng.standard_normal(batch + (m + 1,)) + 1j * rng.standard_normal(batch + (m + 1,))) * scale
    half[..., 0] = half[..., 0].real
    return hermitian_from_nonnegative(half)


def cos_alpha(m_alpha=4):
    """Coefficients of cos x on ``|k| <= m_alpha``."""
    a = np.zeros(2 * m_alpha + 1, dtype=complex)
    a[m_alpha + 1] = a[m_alpha - 1] = np.sqrt(2 * np.pi) / 2
    return a


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def cos_coupling():
    """K = 1, alpha = cos x, T = 1, mu = 1."""
    return CouplingConfig(cos_alpha()[None], [1.0], mu=1.0)


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES = {}


def record_criterion(number, title, passed, detail, seconds, budget):
    """Store the verdict line for one acceptance criterion."""
    flag = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES[number] = (
        f"[{flag}] criterion {number:>2}: {title} ({detail}; {seconds:.1f}s of {budget:.0f}s budget)"
    )


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
