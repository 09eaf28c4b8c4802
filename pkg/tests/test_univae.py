import numpy as np
import pytest
import torch

from cortexcomp.errors import FingerprintMismatch, ShapeMismatch
from cortexcomp.surface import make_mask
from cortexcomp.univae import (
    UniversalAutoencoder, ae_loss, build_autoencoder, heldout_maps, load_autoencoder,
    reconstruction_r2, save_autoencoder, train_autoencoder,
)


@pytest.fixture
def desk_ae():
    torch.manual_seed(0)
    return UniversalAutoencoder(make_mask(32, 32, 0.6, 4, seed=3), cls_tokens=4, width=64)


def test_latent_and_map_shapes(desk_ae):
    maps = torch.randn(2, 32, 32) * desk_ae.mask.torch_active()
    z = desk_ae.encode(maps)
    assert z.shape == (2, 4, 64)
    assert desk_ae.decode(z).shape == (2, 32, 32)
    assert desk_ae.encode(maps[0]).shape == (4, 64)


def test_encode_decode_deterministic(desk_ae):
    desk_ae.eval()
    maps = torch.randn(3, 32, 32)
    assert torch.equal(desk_ae.encode(maps), desk_ae.encode(maps))
    z = torch.randn(3, 4, 64)
    assert torch.equal(desk_ae.decode(z), desk_ae.decode(z))


def test_decoded_masked_pixels_are_zero(desk_ae):
    out = desk_ae.decode(torch.randn(2, 4, 64))
    assert not out[:, ~torch.from_numpy(desk_ae.mask.active)].any()


def test_wrong_latent_shape_rejected(desk_ae):
    with pytest.raises(ShapeMismatch):
        desk_ae.decode(torch.randn(2, 3, 64))


def test_latent_nonzero_with_zero_output_projection(desk_ae):
    with torch.no_grad():
        desk_ae.to_pixels.weight.zero_()
        desk_ae.to_pixels.bias.zero_()
    z = desk_ae.encode(torch.randn(2, 32, 32))
    assert z.norm() > 0
    # the CLS states must depend on the input, i.e. information flows through attention
    z2 = desk_ae.encode(torch.randn(2, 32, 32))
    assert not torch.allclose(z, z2)


def test_ae_loss_analytic_values(desk_ae):
    mask = desk_ae.mask
    act = mask.torch_active(torch.float64)
    s = torch.randn(2, 32, 32, dtype=torch.float64) * act
    assert ae_loss(s, s, mask).item() == 0.0
    assert ae_loss(s, s + act, mask).item() == pytest.approx(1.0, abs=1e-12)
    # differences on masked-out pixels do not count
    assert ae_loss(s, s + (1 - act) * 5, mask).item() == 0.0
    with pytest.raises(ShapeMismatch):
        ae_loss(s, s[0], mask)


def test_ae_loss_gradient_matches_finite_differences():
    from cortexcomp.evalkit import grad_check

    mask = make_mask(8, 8, 0.7, 4, seed=1)
    gen = torch.Generator().manual_seed(0)
    s = torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
    rec = torch.randn(2, 8, 8, generator=gen, dtype=torch.float64, requires_grad=True)
    report = grad_check(lambda: ae_loss(s, rec, mask), {"S_rec": rec})
    assert report.passed, report.per_param


def test_one_step_training_logs_one_row(cfg, world):
    model, log, status = train_autoencoder(world, cfg.univae, steps=1)
    assert len(log) == 1
    assert {"step", "loss", "lr", "wall_time", "heldout_loss"} <= set(log[0])
    assert status == "max_steps_reached"
    assert not any(p.requires_grad for p in model.parameters())


def test_training_is_bitwise_reproducible(cfg, world):
    _, log_a, _ = train_autoencoder(world, cfg.univae, steps=3)
    _, log_b, _ = train_autoencoder(world, cfg.univae, steps=3)
    assert [r["loss"] for r in log_a] == [r["loss"] for r in log_b]


def test_target_loss_stops_early(cfg, world):
    loose = cfg.replace(**{"univae.target_loss": 1e9})
    _, log, status = train_autoencoder(world, loose.univae, steps=10)
    assert status == "target_reached" and len(log) == 1


def test_warmup_schedule_ramps_lr(cfg, world):
    _, log, _ = train_autoencoder(world, cfg.univae, steps=3)
    lrs = [r["lr"] for r in log]
    assert lrs[0] < lrs[1] <= cfg.univae.lr


def test_checkpoint_round_trip_bitwise(tmp_path, cfg, world):
    model, _, _ = train_autoencoder(world, cfg.univae, steps=2)
    path = save_autoencoder(tmp_path / "ae.npz", model, cfg)
    loaded = load_autoencoder(path, cfg)
    maps = torch.as_tensor(heldout_maps(world, 4), dtype=torch.float32)
    assert torch.equal(model(maps), loaded(maps))
    assert loaded.mask == model.mask


def test_checkpoint_fingerprint_mismatch(tmp_path, cfg, world):
    model = build_autoencoder(world.mask, cfg.univae)
    path = save_autoencoder(tmp_path / "ae.npz", model, cfg)
    with pytest.raises(FingerprintMismatch):
        load_autoencoder(path, cfg.replace(**{"univae.lr": 0.5}))


def test_r2_of_perfect_model_is_one(world):
    class Identity(torch.nn.Module):
        mask = world.mask

        def forward(self, x):
            return x

    assert reconstruction_r2(Identity(), heldout_maps(world, 8)) == pytest.approx(1.0)
