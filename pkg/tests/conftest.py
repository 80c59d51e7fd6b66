from __future__ import annotations

import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# imbalance fixture: foreground pixels per slice, placed inside a region a 64x112 window covers
FIXTURE_CI = (198, 209, 187)
FIXTURE_WINDOW = (96, 72)  # row0, col0


def fixture_label(count: int, frame=(256, 256)) -> np.ndarray:
    """A thin band of ``count`` pixels in rows 120..127, columns 90..179 (row-major fill)."""
    lab = np.zeros(frame, dtype=np.uint8)
    region = np.zeros(8 * 90, dtype=np.uint8)
    region[:count] = 1
    lab[120:128, 90:180] = region.reshape(8, 90)
    return lab


@pytest.fixture
def fixture_labels():
    return [fixture_label(c) for c in FIXTURE_CI]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
