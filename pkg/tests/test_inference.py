import json
from itertools import permutations

import numpy as np
import pytest
import torch

from cortexcomp.errors import EmptyBank, EmptyInput, EmptySubjectSet, MissingStats, ShapeMismatch
from cortexcomp.inference import (
    DecodeResult, aggregate, decode_codes, decode_sample, initial_factorize, readout, rescale,
    surrogate_sweep, sweep_subjects,
)
from cortexcomp.lfcm import DEFAULT, LFCM
from cortexcomp.surface import make_mask
from cortexcomp.training import RescaleStats
from cortexcomp.univae import UniversalAutoencoder, freeze


@pytest.fixture
def lfcm():
    torch.manual_seed(0)
    return freeze(LFCM(n_subjects=4, n_datasets=2, latent_shape=(2, 8), code_shape=(3, 8), depth=1, heads=2))


@pytest.fixture
def stats():
    rng = np.random.default_rng(0)
    return RescaleStats(rng.standard_normal((2, 3, 8)), rng.uniform(0.5, 2.0, (2, 3, 8)))


def test_initial_factorize_is_default_factorize(lfcm):
    z = torch.randn(3, 2, 8)
    c, n = initial_factorize(z, 1, lfcm)
    c2, n2 = lfcm.factorize(z, DEFAULT, 1)
    assert torch.equal(c, c2) and torch.equal(n, n2)
    assert c.shape == (3, 3, 8) and n.shape == (3, 1, 8)
    c1, n1 = initial_factorize(z[0], 1, lfcm)
    assert c1.shape == (3, 8) and n1.shape == (1, 8)
    again = initial_factorize(z, 1, lfcm)
    assert torch.equal(again[0], c)


def test_sweep_count_order_and_definition(lfcm):
    z = torch.randn(2, 2, 8)
    c, n = initial_factorize(z, 0, lfcm)
    out = surrogate_sweep(c, n, 0, [2, DEFAULT, 0], lfcm)
    assert [s for s, _ in out] == [2, DEFAULT, 0]
    for s, code in out:
        expected, _ = lfcm.factorize(lfcm.compose(c, n, s, 0), s, 0)
        torch.testing.assert_close(code, expected, rtol=0, atol=1e-5)


def test_sweep_default_only_reduces_to_self_composition(lfcm):
    z = torch.randn(1, 2, 8)
    c, n = initial_factorize(z, 1, lfcm)
    [(s, code)] = surrogate_sweep(c, n, 1, [DEFAULT], lfcm)
    expected, _ = lfcm.factorize(lfcm.compose(c, n, DEFAULT, 1), DEFAULT, 1)
    torch.testing.assert_close(code, expected, rtol=0, atol=1e-5)


def test_sweep_permutation_invariant(lfcm):
    z = torch.randn(2, 2, 8)
    c, n = initial_factorize(z, 0, lfcm)
    ref = dict((s, code) for s, code in surrogate_sweep(c, n, 0, [0, 1, 2], lfcm))
    for perm in permutations([0, 1, 2]):
        for s, code in surrogate_sweep(c, n, 0, list(perm), lfcm):
            torch.testing.assert_close(code, ref[s], rtol=0, atol=1e-5)


def test_empty_sweep_rejected(lfcm):
    c, n = initial_factorize(torch.randn(1, 2, 8), 0, lfcm)
    with pytest.raises(EmptySubjectSet):
        surrogate_sweep(c, n, 0, [], lfcm)


def test_sweep_subjects_default_set(world):
    subs = sweep_subjects(world, 1, [1, 2, 3, 4])
    assert subs == [s for s in [1, 2, 3, 4] if world.subject_dataset[s] == 1] + [DEFAULT]


@pytest.mark.parametrize("axis,dims", [("tokens", (0,)), ("features", (1,)), ("all", (0, 1))])
def test_rescale_matches_direct_recomputation(stats, axis, dims):
    c = np.random.default_rng(1).standard_normal((3, 8)) * 3 + 2
    out = rescale(c, stats, 1, axis)
    standardized = (out - stats.mean[1]) / stats.std[1]
    np.testing.assert_allclose(standardized.mean(axis=dims), 0.0, atol=1e-6)
    np.testing.assert_allclose(standardized.std(axis=dims), 1.0, atol=1e-6)


def test_rescale_fixed_point():
    rng = np.random.default_rng(2)
    # per-feature token statistics are zero-mean/unit-std -> identity under unit training stats
    c = rng.standard_normal((3, 8))
    c = (c - c.mean(0)) / c.std(0)
    unit = RescaleStats(np.zeros((1, 3, 8)), np.ones((1, 3, 8)))
    np.testing.assert_allclose(rescale(c, unit, 0), c, atol=1e-12)


def test_rescale_constant_code_is_finite(stats):
    out = rescale(np.full((3, 8), 4.0), stats, 0)
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, stats.mean[0])


def test_rescale_errors(stats):
    with pytest.raises(MissingStats):
        rescale(np.zeros((3, 8)), stats, 2)
    with pytest.raises(MissingStats):
        rescale(np.zeros((3, 8)), None, 0)
    with pytest.raises(ShapeMismatch):
        rescale(np.zeros((2, 3, 8)), stats, np.zeros((2, 1), dtype=int))


def test_rescale_torch_and_batched(stats):
    c = torch.randn(4, 3, 8)
    out = rescale(c, stats, np.array([0, 1, 1, 0]))
    assert isinstance(out, torch.Tensor) and out.shape == (4, 3, 8)
    np.testing.assert_allclose(out[1].numpy(), rescale(c[1].numpy(), stats, 1), atol=1e-5)


def test_rescale_std_floor():
    s = RescaleStats(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))
    assert (s.std == 1e-6).all()


def test_aggregate_properties():
    c = np.random.default_rng(0).standard_normal((3, 8))
    assert np.array_equal(aggregate([c]), c)
    np.testing.assert_allclose(aggregate([c, -c]), 0.0)
    codes = [np.random.default_rng(i).standard_normal((3, 8)) for i in range(4)]
    np.testing.assert_allclose(aggregate(codes), aggregate(codes[::-1]), atol=1e-15)
    np.testing.assert_allclose(aggregate([c, c, c]), c)
    with pytest.raises(EmptyInput):
        aggregate([])
    with pytest.raises(ShapeMismatch):
        aggregate([c, c[:2]])


def test_readout_ranking():
    bank = np.random.default_rng(0).standard_normal((5, 3, 8))
    ranked = readout(bank[3], bank, stimulus_ids=[10, 11, 12, 13, 14])
    assert ranked[0][0] == 13 and ranked[0][1] == pytest.approx(1.0)
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)
    assert readout(bank[0], bank[:1]) == [(0, pytest.approx(1.0))]
    with pytest.raises(EmptyBank):
        readout(bank[0], bank[:0])


def test_readout_ties_by_ascending_id():
    bank = np.ones((3, 2, 2))
    assert [k for k, _ in readout(np.ones((2, 2)), bank, [7, 3, 5])] == [3, 5, 7]


def test_decode_codes_mean_of_per_subject(lfcm, stats):
    z = torch.randn(4, 2, 8)
    sets = {0: [0, 2, DEFAULT], 1: [1, 3, DEFAULT]}
    c_final, per = decode_codes(z, np.array([0, 1, 0, 1]), lfcm, stats, sets)
    rows0 = [0, 2]
    stacked = np.stack([codes[rows0] for s, codes in per if s in sets[0]])
    np.testing.assert_allclose(c_final[rows0], stacked.mean(0), atol=1e-12)


def test_decode_codes_without_sweep_uses_initial_code(lfcm, stats):
    z = torch.randn(2, 2, 8)
    c_final, per = decode_codes(z, np.array([0, 0]), lfcm, stats, {0: [0]}, sweep=False, rescale_codes=False)
    c_te, _ = initial_factorize(z, 0, lfcm)
    np.testing.assert_allclose(c_final, c_te.double().numpy())
    assert [s for s, _ in per] == [DEFAULT]


def test_decode_sample_end_to_end(lfcm, stats):
    torch.manual_seed(0)
    mask = make_mask(8, 8, 1.0, 4, seed=0)
    ae = freeze(UniversalAutoencoder(mask, cls_tokens=2, width=8, enc_depth=1, dec_depth=1, heads=2))
    bank = np.random.default_rng(0).standard_normal((6, 3, 8))
    s = np.random.default_rng(1).standard_normal((8, 8))
    a = decode_sample(s, 1, ae, lfcm, stats, [1, 3, DEFAULT], bank)
    b = decode_sample(s, 1, ae, lfcm, stats, [1, 3, DEFAULT], bank)
    assert isinstance(a, DecodeResult)
    np.testing.assert_array_equal(a.c_final, b.c_final)
    assert a.ranked_stimuli == b.ranked_stimuli
    np.testing.assert_allclose(a.c_final, np.mean([c for _, c in a.per_subject], axis=0), atol=1e-12)
    payload = json.loads(json.dumps(a.to_json()))
    assert "c_final" not in payload and payload["subject_set"] == [1, 3, DEFAULT]
    assert len(a.to_json(include_code=True)["c_final"]) == 3
