"""Synthetic cortical-response world with known ground-truth factors.

A response is rendered as::

    S = mask * smooth(embed(gain_d * (W_s t_k + b_s) + o_d + eps))

where ``W_s = modes @ M_s`` and ``b_s = modes @ beta_s`` live in a shared
K-dimensional bank of cortical modes, ``M_s`` is an orthonormalized
perturbation of a population mixer, and ``eps`` is i.i.d. pixel noise drawn
from the trial seed. Subject biases and dataset offsets are orthogonal to the
population stimulus subspace, so raw maps cluster by subject while the
stimulus remains decodable across individuals.

Every random quantity comes from its own seeded stream, so adding subjects or
stimuli never changes the ones already generated.
"""
import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import SurfaceConfig, WorldConfig
from .errors import IndexOutOfRange, InvalidConfig
from .surface import CortexMask, make_mask

# Stream identifiers for np.random.SeedSequence entropy.
_MASK, _MODES, _STIM, _SUBJ, _DATA, _TARGET, _NOISE, _PRETRAIN, _SPLIT, _POP = range(10)


def _rng(seed, *keys):
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def _orthonormal(mat):
    q, r = np.linalg.qr(mat)
    signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    signs[signs == 0] = 1.0
    return q * signs[..., None, :]


@dataclass(frozen=True)
class GroundTruthFactors:
    stimulus_id: int
    subject_id: int
    dataset_id: int
    trial_seed: object
    true_target: np.ndarray


@dataclass(frozen=True, eq=False)
class SynthWorld:
    config: WorldConfig
    surface: SurfaceConfig
    mask: CortexMask
    modes: np.ndarray              # P x K, columns with per-pixel RMS 1
    population_mixer: np.ndarray   # K x d_true
    stimulus_bank: np.ndarray      # n_stimuli x d_true, unit rows
    mixer_coeffs: np.ndarray       # n_subjects x K x d_true
    bias_coeffs: np.ndarray        # n_subjects x K
    subject_dataset: np.ndarray    # n_subjects
    dataset_gains: np.ndarray      # n_datasets
    offset_coeffs: np.ndarray      # n_datasets x K
    target_expansion: np.ndarray   # (L_c * d_c) x d_true, orthonormal columns
    signal_std: float
    noise_std: float

    # sizes ---------------------------------------------------------------
    @property
    def n_stimuli(self):
        return self.config.n_stimuli

    @property
    def n_subjects(self):
        return self.config.n_subjects

    @property
    def n_datasets(self):
        return self.config.n_datasets

    @property
    def d_true(self):
        return self.config.d_true

    @property
    def n_pixels(self):
        return self.mask.n_active

    @property
    def seed(self):
        return self.config.seed

    @property
    def target_shape(self):
        return self.config.target_tokens, self.config.target_dim

    # derived operators ---------------------------------------------------
    def subject_mixer(self, subject_id):
        self._check_subject(subject_id)
        return self.modes @ self.mixer_coeffs[subject_id]

    def subject_bias(self, subject_id):
        self._check_subject(subject_id)
        return self.modes @ self.bias_coeffs[subject_id]

    def dataset_offset(self, dataset_id):
        self._check_dataset(dataset_id)
        return self.modes @ self.offset_coeffs[dataset_id]

    def subjects_of_dataset(self, dataset_id):
        return [int(s) for s in np.flatnonzero(self.subject_dataset == dataset_id)]

    def _check_stimulus(self, k):
        if not 0 <= int(k) < self.n_stimuli:
            raise IndexOutOfRange(f"stimulus_id {k} not in [0, {self.n_stimuli})")

    def _check_subject(self, s):
        if not 0 <= int(s) < self.n_subjects:
            raise IndexOutOfRange(f"subject_id {s} not in [0, {self.n_subjects})")

    def _check_dataset(self, d):
        if not 0 <= int(d) < self.n_datasets:
            raise IndexOutOfRange(f"dataset_id {d} not in [0, {self.n_datasets})")

    # rendering -----------------------------------------------------------
    def clean_signal(self, stimulus_ids, subject_ids, dataset_ids):
        """Noiseless pre-smoothing signal on active pixels, shape (B, P)."""
        stim = np.atleast_1d(np.asarray(stimulus_ids, dtype=np.int64))
        subj = np.atleast_1d(np.asarray(subject_ids, dtype=np.int64))
        data = np.atleast_1d(np.asarray(dataset_ids, dtype=np.int64))
        for k in stim:
            self._check_stimulus(k)
        for s in subj:
            self._check_subject(s)
        for d in data:
            self._check_dataset(d)
        t = self.stimulus_bank[stim]
        coeff = np.einsum("bkd,bd->bk", self.mixer_coeffs[subj], t) + self.bias_coeffs[subj]
        coeff = self.dataset_gains[data][:, None] * coeff + self.offset_coeffs[data]
        return coeff @ self.modes.T

    def embed(self, pixels):
        """(B, P) active-pixel vectors -> (B, H, W) grids."""
        out = np.zeros((pixels.shape[0],) + self.mask.shape)
        out[:, self.mask.active] = pixels
        return out

    def smooth(self, grids):
        r = self.config.smoothing_radius
        if r > 0:
            grids = gaussian_filter(grids, sigma=(0, r, r), mode="constant")
        return grids * self.mask.active

    def noise(self, trial_seeds, std=None):
        std = self.noise_std if std is None else std
        out = np.zeros((len(trial_seeds), self.n_pixels))
        if std > 0:
            for i, ts in enumerate(trial_seeds):
                keys = ts if isinstance(ts, (tuple, list)) else (ts,)
                out[i] = _rng(self.seed, _NOISE, *keys).normal(0.0, std, self.n_pixels)
        return out

    def render_batch(self, stimulus_ids, subject_ids, dataset_ids, trial_seeds, noise_std=None):
        pixels = self.clean_signal(stimulus_ids, subject_ids, dataset_ids)
        pixels = pixels + self.noise(list(trial_seeds), noise_std)
        return self.smooth(self.embed(pixels))

    def summary(self):
        return {
            "config": self.config.__dict__,
            "surface": self.surface.__dict__,
            "n_active_pixels": self.n_pixels,
            "n_kept_patches": self.mask.n_tokens,
            "mask_ref": self.mask.ref(),
            "signal_std": self.signal_std,
            "noise_std": self.noise_std,
            "subject_dataset": self.subject_dataset.tolist(),
            "dataset_gains": self.dataset_gains.tolist(),
            "stimulus_norm_max_dev": float(np.abs(np.linalg.norm(self.stimulus_bank, axis=1) - 1).max()),
        }

    def summary_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _random_subject(rng, population, spread):
    k, d = population.shape
    return _orthonormal(population + spread * rng.standard_normal((k, d)) / np.sqrt(k))


def _orthogonal_draw(rng, population, scale, size=None):
    k, d = population.shape
    shape = (k,) if size is None else (size, k)
    g = rng.standard_normal(shape)
    g = g - (g @ population) @ population.T
    return scale * g / np.sqrt(k - d) if k > d else np.zeros(shape)


def gen_world(config=None, surface=None, seed=None):
    """Build a SynthWorld; equal (config, surface, seed) give identical worlds."""
    config = config or WorldConfig()
    surface = surface or SurfaceConfig()
    if seed is not None:
        config = WorldConfig(**{**config.__dict__, "seed": int(seed)})
    c = config
    for name in ("n_stimuli", "n_subjects", "n_datasets"):
        if getattr(c, name) < 1:
            raise InvalidConfig(f"{name} must be >= 1")
    if c.d_true < 2:
        raise InvalidConfig("d_true must be >= 2")
    if c.noise_std < 0:
        raise InvalidConfig("noise_std must be >= 0")
    mask = make_mask(surface.height, surface.width, surface.coverage, surface.patch_size,
                     _rng(c.seed, _MASK).integers(2**31), surface.keep_threshold)
    n_pix = mask.n_active
    if n_pix < c.d_true or n_pix < c.n_modes:
        raise InvalidConfig(f"active pixel count {n_pix} is smaller than d_true/n_modes")
    if c.n_modes < c.d_true:
        raise InvalidConfig("n_modes must be >= d_true")

    modes = _orthonormal(_rng(c.seed, _MODES).standard_normal((n_pix, c.n_modes))) * np.sqrt(n_pix)
    population = _orthonormal(_rng(c.seed, _POP).standard_normal((c.n_modes, c.d_true)))

    bank = _rng(c.seed, _STIM).standard_normal((c.n_stimuli, c.d_true))
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)

    mixers, biases = [], []
    for s in range(c.n_subjects):
        rng = _rng(c.seed, _SUBJ, s)
        mixers.append(_random_subject(rng, population, c.subject_spread))
        biases.append(_orthogonal_draw(rng, population, c.subject_bias))
    mixers = np.stack(mixers)
    biases = np.stack(biases)
    for s, m in enumerate(mixers):
        sv = np.linalg.svd(modes @ m, compute_uv=False)
        if sv.min() < 1e-8 * sv.max():
            raise InvalidConfig(f"subject {s} mixer is rank deficient")

    gains, offsets = [], []
    for d in range(c.n_datasets):
        rng = _rng(c.seed, _DATA, d)
        gains.append(1.0 + c.dataset_gain_spread * rng.uniform(-1.0, 1.0))
        offsets.append(_orthogonal_draw(rng, population, c.dataset_offset))
    subject_dataset = np.arange(c.n_subjects) % c.n_datasets

    n_target = c.target_tokens * c.target_dim
    if n_target < c.d_true:
        raise InvalidConfig("target size must be >= d_true")
    expansion = _orthonormal(_rng(c.seed, _TARGET).standard_normal((n_target, c.d_true)))

    world = SynthWorld(
        config=c, surface=surface, mask=mask, modes=modes, population_mixer=population,
        stimulus_bank=bank, mixer_coeffs=mixers, bias_coeffs=biases,
        subject_dataset=subject_dataset, dataset_gains=np.asarray(gains),
        offset_coeffs=np.stack(offsets), target_expansion=expansion,
        signal_std=0.0, noise_std=0.0,
    )
    stim = np.repeat(np.arange(c.n_stimuli), c.n_subjects)
    subj = np.tile(np.arange(c.n_subjects), c.n_stimuli)
    signal_std = float(world.clean_signal(stim, subj, subject_dataset[subj]).std())
    noise_std = c.noise_std * signal_std if c.noise_relative else c.noise_std
    object.__setattr__(world, "signal_std", signal_std)
    object.__setattr__(world, "noise_std", float(noise_std))
    return world


def render_response(world, stimulus_id, subject_id, dataset_id, trial_seed, noise_std=None):
    """Single (H, W) map; masked pixels are exactly zero."""
    return world.render_batch([stimulus_id], [subject_id], [dataset_id], [trial_seed], noise_std)[0]


def ground_truth_target(world, stimulus_id):
    """Subject-independent (L_c, d_c) supervision target for a stimulus."""
    world._check_stimulus(stimulus_id)
    return targets_for(world, [stimulus_id])[0]


def targets_for(world, stimulus_ids):
    ids = np.asarray(stimulus_ids, dtype=np.int64)
    lc, dc = world.target_shape
    # Scaled so the target has unit RMS per element.
    flat = world.stimulus_bank[ids] @ world.target_expansion.T * np.sqrt(lc * dc)
    return flat.reshape(len(ids), lc, dc)


def ground_truth_factors(world, stimulus_id, subject_id, dataset_id, trial_seed):
    world._check_stimulus(stimulus_id)
    world._check_subject(subject_id)
    world._check_dataset(dataset_id)
    return GroundTruthFactors(int(stimulus_id), int(subject_id), int(dataset_id), trial_seed,
                              world.stimulus_bank[stimulus_id].copy())


def split_manifest(world):
    """Train/test stimulus split and seen/unseen subject split."""
    c = world.config
    perm = _rng(c.seed, _SPLIT).permutation(c.n_stimuli)
    test = np.sort(perm[: c.n_test_stimuli])
    train = np.sort(perm[c.n_test_stimuli:])
    unseen = sorted(int(s) for s in c.unseen_subjects)
    seen = [s for s in range(c.n_subjects) if s not in unseen]
    return {
        "train_stimuli": train.tolist(),
        "test_stimuli": test.tolist(),
        "seen_subjects": seen,
        "unseen_subjects": unseen,
        "subject_dataset": world.subject_dataset.tolist(),
    }


def pretraining_batch(world, batch_size, rng, noise_max=0.3):
    """Population-level maps for autoencoder pretraining.

    Half the batch is isotropic activity over the cortical modes; the other
    half renders random stimuli through freshly drawn individuals who are not
    part of the world. Each sample gets its own noise level in
    [0, noise_max * signal_std].
    """
    c = world.config
    k = c.n_modes
    n_task = batch_size // 2
    n_rest = batch_size - n_task

    rest_scale = np.sqrt((1.0 + c.subject_bias ** 2 + c.dataset_offset ** 2) / k)
    rest = rng.standard_normal((n_rest, k)) * rest_scale * rng.uniform(0.5, 1.5, (n_rest, 1))

    pop = world.population_mixer
    g = pop[None] + c.subject_spread * rng.standard_normal((n_task, k, c.d_true)) / np.sqrt(k)
    mixers = _orthonormal(g)
    t = rng.standard_normal((n_task, c.d_true))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    bias = _orthogonal_draw(rng, pop, c.subject_bias, size=n_task)
    offset = _orthogonal_draw(rng, pop, c.dataset_offset, size=n_task)
    gain = 1.0 + c.dataset_gain_spread * rng.uniform(-1.0, 1.0, (n_task, 1))
    task = gain * (np.einsum("bkd,bd->bk", mixers, t) + bias) + offset

    coeff = np.concatenate([rest, task])[rng.permutation(batch_size)]
    pixels = coeff @ world.modes.T
    levels = rng.uniform(0.0, noise_max, (batch_size, 1)) * world.signal_std
    pixels = pixels + levels * rng.standard_normal(pixels.shape)
    return world.smooth(world.embed(pixels))
