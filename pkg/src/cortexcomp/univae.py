"""Universal surface autoencoder (Stage I).

Kept patches plus learnable CLS tokens go through a transformer encoder; the
final CLS states are the universal latent ``z`` with shape (L_r, d_r). The
decoder sees ``z`` followed by one learnable guide token per kept patch and
maps the patch positions back to pixels.
"""
import math
import time

import numpy as np
import torch
from torch import nn

from .config import UnivaeConfig, ae_fingerprint
from .errors import DivergenceDetected, ShapeMismatch
from .layers import SelfBlock
from .surface import patchify, unpatchify
from .synthworld import pretraining_batch
from .tensorio import load_tensors, mask_from_tensors, mask_tensors, save_tensors


class UniversalAutoencoder(nn.Module):
    def __init__(self, mask, cls_tokens=4, width=64, enc_depth=2, dec_depth=2, heads=4, ff_mult=2):
        super().__init__()
        self.mask = mask
        self.cls_tokens = cls_tokens
        self.width = width
        n_tok, tok_dim = mask.n_tokens, mask.token_dim

        self.patch_embed = nn.Linear(tok_dim, width)
        self.enc_pos = nn.Parameter(torch.randn(n_tok, width) * 0.02)
        self.cls = nn.Parameter(torch.randn(cls_tokens, width) * 0.02)
        self.encoder = nn.ModuleList([SelfBlock(width, heads, ff_mult) for _ in range(enc_depth)])
        self.enc_norm = nn.LayerNorm(width)

        self.dec_cls_pos = nn.Parameter(torch.randn(cls_tokens, width) * 0.02)
        self.guide = nn.Parameter(torch.randn(1, width) * 0.02)
        self.dec_pos = nn.Parameter(torch.randn(n_tok, width) * 0.02)
        self.decoder = nn.ModuleList([SelfBlock(width, heads, ff_mult) for _ in range(dec_depth)])
        self.dec_norm = nn.LayerNorm(width)
        self.to_pixels = nn.Linear(width, tok_dim)

    @property
    def latent_shape(self):
        return self.cls_tokens, self.width

    def encode(self, maps):
        if maps.dim() == 2:
            return self.encode(maps[None])[0]
        tokens = self.patch_embed(patchify(maps, self.mask)) + self.enc_pos
        cls = self.cls.expand(maps.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1)
        for block in self.encoder:
            x = block(x)
        return self.enc_norm(x[:, : self.cls_tokens])

    def decode(self, z):
        if z.dim() == 2:
            return self.decode(z[None])[0]
        if tuple(z.shape[-2:]) != self.latent_shape:
            raise ShapeMismatch(f"latent shape {tuple(z.shape[-2:])} != {self.latent_shape}")
        guide = (self.guide + self.dec_pos).expand(z.shape[0], -1, -1)
        x = torch.cat([z + self.dec_cls_pos, guide], dim=1)
        for block in self.decoder:
            x = block(x)
        patches = self.to_pixels(self.dec_norm(x[:, self.cls_tokens:]))
        return unpatchify(patches, self.mask)

    def forward(self, maps):
        return self.decode(self.encode(maps))


def build_autoencoder(mask, cfg: UnivaeConfig):
    torch.manual_seed(cfg.seed)
    return UniversalAutoencoder(mask, cfg.cls_tokens, cfg.width, cfg.enc_depth,
                                cfg.dec_depth, cfg.heads, cfg.ff_mult)


def ae_loss(maps, recon, mask):
    """Mean squared error over active pixels, averaged over the batch."""
    if maps.shape != recon.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(maps.shape)} vs {tuple(recon.shape)}")
    active = mask.torch_active(maps.dtype).to(maps.device)
    sq = ((maps - recon) * active) ** 2
    return sq.sum(dim=(-2, -1)).mean() / active.sum()


def freeze(module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def warmup_schedule(warmup):
    return lambda step: min(1.0, (step + 1) / max(1, warmup))


@torch.no_grad()
def encode_maps(model, maps, batch_size=512):
    out = []
    for i in range(0, len(maps), batch_size):
        chunk = torch.as_tensor(np.asarray(maps[i:i + batch_size]), dtype=torch.float32)
        out.append(model.encode(chunk))
    return torch.cat(out)


@torch.no_grad()
def reconstruction_r2(model, maps):
    """1 - SSE/SST over active pixels, SST taken around the per-pixel mean."""
    x = torch.as_tensor(np.asarray(maps), dtype=torch.float32)
    rec = model(x)
    active = model.mask.torch_active()
    sse = (((x - rec) * active) ** 2).sum()
    sst = (((x - x.mean(0, keepdim=True)) * active) ** 2).sum()
    return float(1.0 - sse / sst)


def heldout_maps(world, n, seed=12345):
    """Noiseless renders of random (stimulus, subject) combinations."""
    rng = np.random.default_rng(seed)
    stim = rng.integers(0, world.n_stimuli, n)
    subj = rng.integers(0, world.n_subjects, n)
    return world.render_batch(stim, subj, world.subject_dataset[subj], range(n), noise_std=0.0)


def train_autoencoder(world, cfg: UnivaeConfig, steps=None, log_fn=None):
    """Pretrain on population maps; returns (model, log rows, status)."""
    steps = cfg.steps if steps is None else steps
    model = build_autoencoder(world.mask, cfg)
    rng = np.random.default_rng([cfg.seed, 101])
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_schedule(cfg.warmup))
    held = torch.as_tensor(heldout_maps(world, cfg.n_heldout), dtype=torch.float32)
    log, status = [], "max_steps_reached"
    start = time.perf_counter()
    for step in range(steps):
        model.train()
        batch = torch.as_tensor(pretraining_batch(world, cfg.batch_size, rng, cfg.pretrain_noise),
                                dtype=torch.float32)
        loss = ae_loss(batch, model(batch), world.mask)
        if not math.isfinite(loss.item()):
            raise DivergenceDetected(f"autoencoder loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"step": step, "loss": loss.item(), "lr": sched.get_last_lr()[0],
               "wall_time": time.perf_counter() - start}
        sched.step()
        last = step == steps - 1
        if cfg.target_loss is not None or last or (log_fn and step % 100 == 0):
            with torch.no_grad():
                model.eval()
                row["heldout_loss"] = ae_loss(held, model(held), world.mask).item()
        log.append(row)
        if log_fn:
            log_fn(row)
        if cfg.target_loss is not None and row["heldout_loss"] < cfg.target_loss:
            status = "target_reached"
            break
    return freeze(model), log, status


def save_autoencoder(path, model, cfg):
    state = {"param." + k: v for k, v in model.state_dict().items()}
    return save_tensors(path, {**state, **mask_tensors(model.mask)}, kind="univae",
                        fingerprint=ae_fingerprint(cfg), univae=cfg.univae.__dict__)


def load_autoencoder(path, cfg):
    arrays, meta = load_tensors(path, kind="univae", fingerprint=ae_fingerprint(cfg))
    mask = mask_from_tensors(arrays)
    model = build_autoencoder(mask, cfg.univae)
    state = {k[len("param."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param.")}
    model.load_state_dict(state)
    return freeze(model)
