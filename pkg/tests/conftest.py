import numpy as np
import pytest
import torch

from stgkd.graph import BoundingBox, FrameDetections


def random_frame(rng, t, n_max, k, d=6, grid=10.0):
    """Frame with ``k`` random valid boxes padded to ``n_max``."""
    boxes = []
    for _ in range(k):
        x0, y0 = rng.uniform(0, grid - 1, size=2)
        w, h = rng.uniform(0.5, 4.0, size=2)
        boxes.append(BoundingBox(x0, y0, x0 + w, y0 + h))
    feats = rng.normal(size=(k, d))
    return FrameDetections.from_objects(t, boxes, feats.reshape(k, d), n_max)


def random_video(rng, T, n_max, d=6, counts=None):
    counts = counts if counts is not None else rng.integers(0, n_max + 1, size=T)
    return [random_frame(rng, t, n_max, int(k), d) for t, k in enumerate(counts)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, name, passed, detail=""):
    """Remember one acceptance verdict; all verdicts print in the terminal summary."""
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name}" + (f" ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
