import numpy as np
import pytest

from qarcnn.store import FeatureSet


def random_features(n, d, seed=0, n_images=None):
    rng = np.random.default_rng(seed)
    n_images = n_images or max(1, n // 10)
    image_ids = np.sort(rng.integers(0, n_images, n)).astype(np.uint64)
    region_ids = np.arange(n, dtype=np.uint32)
    xy = rng.uniform(0, 50, (n, 2))
    wh = rng.uniform(1, 50, (n, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1).astype(np.float32)
    return FeatureSet(image_ids, region_ids, boxes, rng.normal(size=(n, d)).astype(np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
