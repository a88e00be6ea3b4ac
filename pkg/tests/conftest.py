import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from topoforge.simp import DesignSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def cantilever_spec(volfrac=0.5, grid=32, fy_val=2, row=None):
    """Full-square design area with one tip load on the right edge."""
    mask = np.ones((grid, grid), dtype=np.uint8)
    fx = np.zeros((grid, grid), dtype=np.int8)
    fy = np.zeros((grid, grid), dtype=np.int8)
    fy[grid // 2 if row is None else row, grid - 1] = fy_val
    return DesignSpec(mask=mask, fx=fx, fy=fy, volfrac=volfrac)


def circle_spec(volfrac=0.4, cx=16.0, cy=16.0, radius=5.0, grid=32):
    """Design area with a circular void and one tip load."""
    yy, xx = np.mgrid[0:grid, 0:grid]
    inside = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 < radius ** 2
    mask = (~inside).astype(np.uint8)
    fx = np.zeros((grid, grid), dtype=np.int8)
    fy = np.zeros((grid, grid), dtype=np.int8)
    fy[grid // 2, grid - 1] = -2
    return DesignSpec(mask=mask, fx=fx, fy=fy, volfrac=volfrac)
