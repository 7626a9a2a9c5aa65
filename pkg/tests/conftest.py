"""Shared fixtures: bundled grids, a small dataset, and a quickly trained
model that the sampler and metrics tests reuse.  The quick model is not
meant to be a good fit, just a working one."""

import numpy as np
import pytest

from gridsynth.datagen import ScenarioConfig, generate
from gridsynth.diffusion import NoiseSchedule, TrainConfig, train
from gridsynth.grid import load_bundled_case


@pytest.fixture(scope="session")
def case6():
    return load_bundled_case("case6")


@pytest.fixture(scope="session")
def case24():
    return load_bundled_case("case24")


@pytest.fixture(scope="session")
def small_ds(case6):
    return generate(case6, ScenarioConfig(n_samples=250, seed=101))


@pytest.fixture(scope="session")
def quick_model(case6, small_ds):
    """A small denoiser trained for a handful of epochs on small_ds."""
    sched = NoiseSchedule.linear()
    cfg = TrainConfig(epochs=40, batch_size=64, hidden=96, depth=2, seed=7)
    model, log = train(
        small_ds.norm.normalize(small_ds.states),
        sched,
        cfg,
        norm_digest=small_ds.norm.digest(),
    )
    return model, sched, log
