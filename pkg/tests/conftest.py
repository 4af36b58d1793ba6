import numpy as np
import pytest

from handid.config import TrainConfig
from handid.dataset import SynthConfig, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """8 identities x 6 images at 64 px: enough for fast training tests."""
    cfg = SynthConfig(n_identities=8, images_per_identity=6, image_size=64, train_per_identity=4,
                      gallery_per_identity=1, finger_roi=(32, 8))
    return synth_generate(cfg, seed=3)


@pytest.fixture
def tiny_config():
    return TrainConfig(
        ln_input_size=32, align_input_size=64, ln_channels=(4, 8, 8), backbone_channels=(4, 4, 8),
        em_filters=4, p1_epochs=2, p1_batch=8, p2_epochs=4, unfreeze_epoch=2,
        classes_per_batch=4, samples_per_class=2,
    )


# criterion lines printed by the acceptance module, repeated in the summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
