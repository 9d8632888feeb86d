import math

import numpy as np
import pytest

from varhor.model import SIGNATURES, ControlPath, Dims, TimeGrid, _poly, builtin, load_problem
from varhor.pipeline import Pipeline, Settings

LN2 = math.log(2.0)


@pytest.fixture(scope="session")
def example():
    return builtin("paper-example")


@pytest.fixture(scope="session")
def classical():
    return builtin("classical-example")


@pytest.fixture(scope="session")
def lq():
    return builtin("lq-noise-1d")


@pytest.fixture(scope="session")
def lq_free():
    """The LQ problem with its diffusion switched off."""
    zero = _poly("sigma", (1, 1), SIGNATURES["sigma"], Dims(1, 1, 1, 1), key="lq-free.sigma")
    return builtin("lq-noise-1d", sigma=zero, name="lq-free")


@pytest.fixture(scope="session")
def fine_grid():
    return TimeGrid(10000, 1.0)


@pytest.fixture(scope="session")
def optimal(example, fine_grid):
    """Pipeline at the known optimum u = 1 of the worked example."""
    return Pipeline(example, ControlPath.constant(fine_grid, 1.0))


@pytest.fixture(scope="session")
def suboptimal(example, fine_grid):
    return Pipeline(example, ControlPath.constant(fine_grid, 2.0))


def inline(problem: dict, T=1.0, alpha="inf", x0=(0.0,), lo=(-1.0,), hi=(1.0,), **extra):
    cfg = {"problem": problem, "T": T, "alpha": alpha, "x0": list(x0),
           "control": {"box": {"lo": list(lo), "hi": list(hi)}}}
    cfg.update(extra)
    return load_problem(cfg)


def settings(M=1, seed=0, **kw):
    return Settings(M=M, seed=seed, **kw)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
