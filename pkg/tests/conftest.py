import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sffc import synth, dataio, trainer


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    """Small synthetic digit set written through the real IDX files."""
    path = tmp_path_factory.mktemp("digits")
    synth.write_digit_dataset(str(path), 800, 240, seed=11)
    return str(path)


@pytest.fixture(scope="session")
def digits_data(digits_dir):
    return dataio.load_mnist(digits_dir)


def tiny_config(data_dir, **kw):
    """A seconds-scale training config used across trainer/cli tests."""
    cfg = trainer.RunConfig(
        dataset="mnist",
        channel_scale=1 / 6,
        phase1_epochs=kw.pop("phase1_epochs", 1),
        phase2_epochs=kw.pop("phase2_epochs", 2),
        batch_size=kw.pop("batch_size", 64),
        data=trainer.DataConfig(dir=data_dir,
                                train_subset=kw.pop("train_subset", 512),
                                val_subset=kw.pop("val_subset", 128)),
    )
    cfg.goodness.n_copies = kw.pop("n_copies", 4)
    for key, value in kw.items():
        setattr(cfg, key, value)
    return cfg.validate()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
