import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def numeric_grad(f, x: np.ndarray, coords, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (mutated in place) at ``coords``."""
    out = np.empty(len(coords))
    for n, c in enumerate(coords):
        old = x[c]
        x[c] = old + h
        up = f()
        x[c] = old - h
        down = f()
        x[c] = old
        out[n] = (up - down) / (2 * h)
    return out


def rel_err(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def sample_coords(shape, k: int, rng) -> list[tuple]:
    size = int(np.prod(shape))
    flat = rng.choice(size, min(k, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report -------------------------------------------------------------
_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def report(request, capsys):
    """``report(n, status, detail)`` prints one line per acceptance criterion."""

    def emit(n: int, status: str, detail: str) -> None:
        line = f"criterion {n:>2}: {status} - {detail}"
        request.config.stash[_ACCEPTANCE].append((n, line))
        with capsys.disabled():
            print("\n" + line)

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda t: t[0]):
            terminalreporter.write_line(line)
