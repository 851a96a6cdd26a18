import numpy as np
import pytest

from echonoise.datasets import write_idx_images

ACCEPTANCE_LINES = []


def synthetic_strokes(n, seed=0, size=28):
    """Grey-level images of a few random thick line segments, roughly digit-like."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.zeros((n, size, size), dtype=np.uint8)
    for i in range(n):
        canvas = np.zeros((size, size))
        for _ in range(rng.integers(1, 4)):
            p0, p1 = rng.uniform(4, size - 4, 2), rng.uniform(4, size - 4, 2)
            d = p1 - p0
            t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / max(d @ d, 1e-9), 0, 1)
            dist = np.hypot(xx - p0[0] - t * d[0], yy - p0[1] - t * d[1])
            canvas = np.maximum(canvas, np.clip(2.0 - dist, 0, 1))
        images[i] = np.round(255 * canvas).astype(np.uint8)
    return images


@pytest.fixture
def idx_file(tmp_path):
    def make(n, seed=0):
        path = tmp_path / f"images_{n}_{seed}.idx"
        write_idx_images(path, synthetic_strokes(n, seed))
        return path
    return make


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
