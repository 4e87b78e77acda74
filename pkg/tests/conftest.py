import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lndetect._kernels import warmup
from lndetect.volume import BinaryMask, VoxelGrid


@pytest.fixture(scope="session", autouse=True)
def jit_warmup():
    """Compile the numba kernels once so timed tests measure steady state."""
    warmup()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_mask(rng, shape, density=0.2, spacing=(1.0, 1.0, 2.5)) -> BinaryMask:
    bits = rng.random(shape) < density
    if not bits.any():
        bits[tuple(s // 2 for s in shape)] = True
    return BinaryMask(bits, spacing)


def random_prob_grid(rng, shape, spacing=(1.0, 1.0, 1.0)) -> VoxelGrid:
    return VoxelGrid(rng.random(shape).astype(np.float32), spacing, kind="probability")
