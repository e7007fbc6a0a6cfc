import numpy as np
import pytest

from voxcvae import synth
from voxcvae.model import CVAE, ModelConfig

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_dataset(classes=("chair", "desk"), per_class=2, extent=16, seed0=100) -> synth.Dataset:
    """Objects built straight from instance seeds, no split."""
    rows = []
    for c in classes:
        for j in range(per_class):
            seed = seed0 + 10 * synth.class_id(c) + j
            grid, imgs = synth.make_sample(c, seed, extent, 4 * extent)
            rows.append((synth.class_id(c), seed, grid, imgs))
    return synth.Dataset(
        np.array([r[0] for r in rows], dtype=np.uint32),
        np.array([r[1] for r in rows], dtype=np.uint64),
        np.stack([r[2] for r in rows]),
        np.stack([r[3] for r in rows]),
    )


@pytest.fixture(scope="session")
def tiny_data() -> synth.Dataset:
    return small_dataset()


@pytest.fixture
def tiny_model() -> CVAE:
    return CVAE(ModelConfig.for_profile("tiny"), seed=0)
