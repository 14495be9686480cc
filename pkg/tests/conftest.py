import numpy as np
import pytest

from agsdfl import nn
from agsdfl.data import Dataset, gen_synthetic

# criterion -> [(part, ok, detail)], filled by the acceptance tests
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def acceptance_lines() -> list[str]:
    lines = []
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name}: {'ok' if good else 'FAILED'} ({d})" if name else d for name, good, d in parts)
        lines.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return lines


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return nn.ModelSpec((6, 5, 4, 3))


@pytest.fixture
def blobs():
    return gen_synthetic(3, 6, 40, separation=10.0, seed=7, noise=0.05)


def make_dataset(x, y, k):
    return Dataset(np.asarray(x, dtype=float), np.asarray(y), k)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines():
            terminalreporter.write_line(line)
