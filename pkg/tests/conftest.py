import numpy as np
import pytest
import torch

from cortexcomp.config import RunConfig
from cortexcomp.synthworld import gen_world

torch.set_num_threads(1)


def small_config(**overrides):
    """A world and models small enough for unit tests."""
    base = {
        "world.n_stimuli": 24, "world.n_test_stimuli": 8, "world.n_subjects": 5, "world.d_true": 4,
        "world.n_modes": 12, "world.target_tokens": 2, "world.target_dim": 8,
        "surface.height": 16, "surface.width": 16, "surface.coverage": 0.7,
        "univae.cls_tokens": 2, "univae.width": 16, "univae.enc_depth": 1, "univae.dec_depth": 1,
        "univae.heads": 2, "univae.steps": 3, "univae.batch_size": 8, "univae.warmup": 2,
        "univae.n_heldout": 16,
        "lfcm.depth": 1, "lfcm.heads": 2, "lfcm.ff_mult": 1,
        "training.steps": 3, "training.batch_size": 6, "training.warmup": 2,
    }
    base.update(overrides)
    return RunConfig().replace(**base)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def world(cfg):
    return gen_world(cfg.world, cfg.surface)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# Filled by test_acceptance.py: criterion number -> (passed, detail).
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
