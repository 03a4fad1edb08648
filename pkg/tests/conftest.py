from __future__ import annotations

import numpy as np
import pytest

from plumepipe.raster import HyperCube


def random_cube(rng, rows=6, cols=5, bands=4, invalid_frac=0.2, wl0=1000.0):
    data = rng.normal(10.0, 3.0, size=(rows, cols, bands)).astype(np.float32)
    valid = rng.random((rows, cols)) >= invalid_frac
    return HyperCube(data, wl0 + 10.0 * np.arange(bands), valid)


def brute_nearest(seeds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest-seed search; seeds enumerated row-major, first minimum wins."""
    sr, sc = np.nonzero(seeds)
    rows, cols = seeds.shape
    qr, qc = np.indices((rows, cols))
    d = (qr.reshape(-1, 1) - sr[None, :]) ** 2 + (qc.reshape(-1, 1) - sc[None, :]) ** 2
    k = d.argmin(axis=1)
    return sr[k].reshape(rows, cols), sc[k].reshape(rows, cols)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
