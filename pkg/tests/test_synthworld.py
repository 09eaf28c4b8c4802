import json

import numpy as np
import pytest

from cortexcomp.config import SurfaceConfig, WorldConfig
from cortexcomp.errors import IndexOutOfRange, InvalidConfig
from cortexcomp.synthworld import (
    gen_world, ground_truth_factors, ground_truth_target, pretraining_batch, render_response,
    split_manifest, targets_for,
)


@pytest.fixture(scope="module")
def desk_world():
    return gen_world(WorldConfig(n_stimuli=200, n_subjects=10, n_datasets=2, d_true=16, seed=7,
                                 unseen_subjects=[0], n_test_stimuli=100))


def pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))


def test_stimulus_rows_unit_norm(desk_world):
    assert desk_world.stimulus_bank.shape == (200, 16)
    np.testing.assert_allclose(np.linalg.norm(desk_world.stimulus_bank, axis=1), 1.0, atol=1e-12)


def test_generation_is_bitwise_reproducible(desk_world):
    again = gen_world(desk_world.config)
    for name in ("stimulus_bank", "modes", "mixer_coeffs", "bias_coeffs", "offset_coeffs", "target_expansion"):
        assert np.array_equal(getattr(again, name), getattr(desk_world, name)), name
    assert again.mask == desk_world.mask
    assert again.noise_std == desk_world.noise_std


def test_adding_subjects_keeps_existing_ones(desk_world):
    bigger = gen_world(WorldConfig(**{**desk_world.config.__dict__, "n_subjects": 12}))
    assert np.array_equal(bigger.mixer_coeffs[:10], desk_world.mixer_coeffs)
    assert np.array_equal(bigger.stimulus_bank, desk_world.stimulus_bank)


def test_too_few_pixels_rejected():
    # 8x8 grid with a 4-pixel patch at low coverage leaves fewer active pixels than d_true.
    with pytest.raises(InvalidConfig):
        gen_world(WorldConfig(d_true=16, n_modes=16), SurfaceConfig(height=4, width=4, patch_size=2, coverage=0.5))


@pytest.mark.parametrize("field,value", [("n_stimuli", 0), ("n_subjects", 0), ("n_datasets", 0), ("d_true", 1)])
def test_bad_counts_rejected(field, value):
    with pytest.raises(InvalidConfig):
        gen_world(WorldConfig(**{field: value}))


def test_subject_mixers_full_column_rank(desk_world):
    for s in range(desk_world.n_subjects):
        w = desk_world.subject_mixer(s)
        assert np.linalg.matrix_rank(w) == desk_world.d_true


def test_noiseless_render_ignores_trial_seed(desk_world):
    a = render_response(desk_world, 3, 2, 0, trial_seed=1, noise_std=0.0)
    b = render_response(desk_world, 3, 2, 0, trial_seed=2, noise_std=0.0)
    assert np.array_equal(a, b)


def test_masked_pixels_are_zero(desk_world):
    s = render_response(desk_world, 5, 1, 1, trial_seed=0)
    assert not s[~desk_world.mask.active].any()


def test_distinct_subjects_distinct_maps(desk_world):
    act = desk_world.mask.active
    for k in range(5):
        a = render_response(desk_world, k, 1, 1, 0, noise_std=0.0)[act]
        b = render_response(desk_world, k, 3, 1, 0, noise_std=0.0)[act]
        assert pearson(a, b) < 0.99


def test_render_is_deterministic(desk_world):
    a = render_response(desk_world, 4, 2, 0, trial_seed=(1, 2, 3))
    b = render_response(desk_world, 4, 2, 0, trial_seed=(1, 2, 3))
    assert np.array_equal(a, b)


def test_noise_difference_matches_analytic_expectation():
    sigma = 0.5
    world = gen_world(WorldConfig(noise_std=sigma, noise_relative=False, seed=7))
    act = world.mask.active
    n_trials = 1000
    a = world.render_batch([0] * n_trials, [1] * n_trials, [1] * n_trials, [(0, i) for i in range(n_trials)])
    b = world.render_batch([0] * n_trials, [1] * n_trials, [1] * n_trials, [(1, i) for i in range(n_trials)])
    diff = a - b

    # The difference is exactly the smoothed noise difference.
    eps_a = world.noise([(0, i) for i in range(5)])
    eps_b = world.noise([(1, i) for i in range(5)])
    np.testing.assert_allclose(diff[:5], world.smooth(world.embed(eps_a - eps_b)), atol=1e-12)

    # Independent oracle: pixel p of the difference is Gaussian with variance
    # 2 sigma^2 sum_q K_pq^2, where K is the smoothing operator restricted to
    # active pixels, so E|diff_p| = sqrt(2/pi) * sqrt(var_p).
    impulses = world.smooth(world.embed(np.eye(world.n_pixels)))[:, act]      # (q, p)
    var = 2 * sigma**2 * (impulses**2).sum(axis=0)
    expected = float(np.mean(np.sqrt(2 / np.pi) * np.sqrt(var)))
    per_trial = np.abs(diff[:, act]).mean(axis=1)
    observed = per_trial.mean()
    bound = 3 * per_trial.std(ddof=1) / np.sqrt(n_trials)
    assert abs(observed - expected) < bound


def test_targets_deterministic_and_subject_free(desk_world):
    a = ground_truth_target(desk_world, 7)
    b = ground_truth_target(desk_world, 7)
    assert np.array_equal(a, b)
    assert a.shape == desk_world.target_shape
    f = ground_truth_factors(desk_world, 7, 3, 1, trial_seed=9)
    assert np.array_equal(f.true_target, desk_world.stimulus_bank[7])


def test_distinct_stimuli_have_distinct_targets(desk_world):
    t = targets_for(desk_world, np.arange(200)).reshape(200, -1)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    cos = t @ t.T
    off = cos[~np.eye(200, dtype=bool)]
    assert off.max() < 1 - 1e-9


def test_targets_have_unit_rms(desk_world):
    t = targets_for(desk_world, np.arange(200))
    np.testing.assert_allclose(np.sqrt((t**2).mean(axis=(1, 2))), 1.0, atol=1e-12)


@pytest.mark.parametrize("args", [(200, 0, 0), (0, 10, 0), (0, 0, 2), (-1, 0, 0)])
def test_index_checks(desk_world, args):
    with pytest.raises(IndexOutOfRange):
        render_response(desk_world, *args, trial_seed=0)


def test_target_index_check(desk_world):
    with pytest.raises(IndexOutOfRange):
        ground_truth_target(desk_world, 200)


def test_raw_maps_cluster_by_subject(desk_world):
    from cortexcomp.evalkit import disentanglement_report

    stim = np.tile(np.arange(40), 10)
    subj = np.repeat(np.arange(10), 40)
    maps = desk_world.render_batch(stim, subj, desk_world.subject_dataset[subj], [(0, k, s) for k, s in zip(stim, subj)])
    cross_subject, cross_stimulus = disentanglement_report(maps, stim, subj)
    assert cross_subject > cross_stimulus


def test_split_manifest(desk_world):
    m = split_manifest(desk_world)
    assert len(m["test_stimuli"]) == 100 and len(m["train_stimuli"]) == 100
    assert not set(m["test_stimuli"]) & set(m["train_stimuli"])
    assert m["unseen_subjects"] == [0]
    assert not set(m["seen_subjects"]) & set(m["unseen_subjects"])
    assert m == split_manifest(gen_world(desk_world.config))


def test_summary_is_json(desk_world):
    summary = json.loads(desk_world.summary_json())
    assert summary["n_active_pixels"] == desk_world.n_pixels
    assert summary["subject_dataset"] == desk_world.subject_dataset.tolist()


def test_pretraining_batch_shapes(desk_world):
    batch = pretraining_batch(desk_world, 16, np.random.default_rng(0))
    assert batch.shape == (16,) + desk_world.mask.shape
    assert not batch[:, ~desk_world.mask.active].any()
