"""Shared fixtures: one trained desk model per session and an acceptance report."""

from __future__ import annotations

import pytest

from cvst import selftest

_REPORT: list[str] = []


@pytest.fixture(scope="session")
def ctx():
    """Selftest context whose desk model is trained once for the whole session."""
    c = selftest.Context(seed=0)
    c.trained()
    return c


@pytest.fixture(scope="session")
def trained(ctx):
    model, trainer = ctx.trained()
    return model, trainer


@pytest.fixture(scope="session")
def micro():
    """A fresh micro model and trainer (<= 500 parameters)."""
    return selftest.micro_trainer(0)


@pytest.fixture
def report():
    """Collects one line per acceptance criterion for the terminal summary."""
    return _REPORT.append


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
