"""Latent factorization-composition module.

The Factorizer maps a universal latent to a stimulus code ``c`` (L_c tokens)
and a nuisance code ``n`` (one token) under additive subject and dataset
conditioning; the Compositor maps ``(c, n)`` back to a universal latent.
Subject id ``DEFAULT`` (-1) selects the shared default-subject embedding.
"""
import torch
from torch import nn

from .config import LfcmConfig, ae_fingerprint, lfcm_fingerprint
from .errors import IndexOutOfRange, InvalidConfig, ShapeMismatch
from .layers import CrossBlock
from .tensorio import load_tensors, save_tensors

DEFAULT = -1


class LFCM(nn.Module):
    def __init__(self, n_subjects, n_datasets, latent_shape, code_shape, depth=2, heads=4,
                 ff_mult=2, use_nuisance=True, use_subject=True, use_dataset=True,
                 use_compositor=True, slot_embeddings=True):
        super().__init__()
        self.latent_tokens, self.latent_dim = latent_shape
        self.code_tokens, self.code_dim = code_shape
        self.n_subjects, self.n_datasets = n_subjects, n_datasets
        self.use_nuisance = use_nuisance
        self.use_subject = use_subject
        self.use_dataset = use_dataset
        self.use_compositor = use_compositor
        self.slot_embeddings = slot_embeddings
        dc = self.code_dim

        # Fixed latent standardization, set from the training corpus before Stage II.
        self.register_buffer("z_mean", torch.zeros(self.latent_tokens, self.latent_dim))
        self.register_buffer("z_std", torch.ones(self.latent_tokens, self.latent_dim))
        self.proj = nn.Linear(self.latent_dim, dc)
        self.subject_emb = nn.Parameter(torch.randn(n_subjects, dc) * 0.02)
        self.default_subject = nn.Parameter(torch.randn(1, dc) * 0.02)
        self.dataset_emb = nn.Parameter(torch.randn(n_datasets, dc) * 0.02)

        n_queries = self.code_tokens + (1 if use_nuisance else 0)
        self.f_queries = nn.Parameter(torch.randn(n_queries, dc) * 0.02)
        # Cross-attention is blind to context order, so each context slot gets a learned tag.
        if slot_embeddings:
            self.f_slots = nn.Parameter(torch.randn(self.latent_tokens, dc) * 0.02)
        self.f_blocks = nn.ModuleList([CrossBlock(dc, heads, ff_mult) for _ in range(depth)])
        self.f_norm = nn.LayerNorm(dc)
        self.f_out = nn.Linear(dc, dc)

        if use_compositor:
            self.c_queries = nn.Parameter(torch.randn(self.latent_tokens, dc) * 0.02)
            if slot_embeddings:
                self.c_slots = nn.Parameter(torch.randn(n_queries, dc) * 0.02)
            self.c_blocks = nn.ModuleList([CrossBlock(dc, heads, ff_mult) for _ in range(depth)])
            self.c_norm = nn.LayerNorm(dc)
            self.c_out = nn.Linear(dc, self.latent_dim)

    # conditioning ----------------------------------------------------------
    def _ids(self, ids, batch, limit, allow_default, what):
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 0:
            ids = ids.expand(batch)
        if ids.shape != (batch,):
            raise ShapeMismatch(f"{what} ids shape {tuple(ids.shape)} != ({batch},)")
        low = DEFAULT if allow_default else 0
        if ((ids < low) | (ids >= limit)).any():
            raise IndexOutOfRange(f"{what} id out of range [{low}, {limit})")
        return ids

    def subject_embedding(self, subject_ids, batch):
        ids = self._ids(subject_ids, batch, self.n_subjects, True, "subject")
        if not self.use_subject:
            return self.subject_emb.new_zeros(batch, self.code_dim)
        table = torch.cat([self.subject_emb, self.default_subject])
        # DEFAULT (-1) indexes the appended last row.
        return table[torch.where(ids == DEFAULT, self.n_subjects, ids)]

    def dataset_embedding(self, dataset_ids, batch):
        ids = self._ids(dataset_ids, batch, self.n_datasets, False, "dataset")
        if not self.use_dataset:
            return self.dataset_emb.new_zeros(batch, self.code_dim)
        return self.dataset_emb[ids]

    def conditioning(self, subject_ids, dataset_ids, batch):
        return (self.subject_embedding(subject_ids, batch)
                + self.dataset_embedding(dataset_ids, batch))[:, None, :]

    def condition(self, z, subject_ids, dataset_ids):
        """h = Linear(z) + e_sub + e_data, broadcast over latent tokens."""
        if tuple(z.shape[-2:]) != (self.latent_tokens, self.latent_dim):
            raise ShapeMismatch(f"latent shape {tuple(z.shape[-2:])} != {(self.latent_tokens, self.latent_dim)}")
        z = (z - self.z_mean) / self.z_std
        return self.proj(z) + self.conditioning(subject_ids, dataset_ids, z.shape[0])

    @torch.no_grad()
    def set_latent_stats(self, z, eps=1e-6):
        z = torch.as_tensor(z, dtype=self.z_mean.dtype)
        self.z_mean.copy_(z.mean(0))
        self.z_std.copy_(z.std(0).clamp_min(eps))

    # factorize / compose -------------------------------------------------------
    def factorize(self, z, subject_ids, dataset_ids):
        """(B, L_r, d_r) -> c (B, L_c, d_c), n (B, 1, d_c) or None without nuisance."""
        if z.dim() == 2:
            c, n = self.factorize(z[None], subject_ids, dataset_ids)
            return c[0], None if n is None else n[0]
        h = self.condition(z, subject_ids, dataset_ids)
        if self.slot_embeddings:
            h = h + self.f_slots
        x = self.f_queries.expand(z.shape[0], -1, -1)
        for block in self.f_blocks:
            x = block(x, h)
        out = self.f_out(self.f_norm(x))
        if self.use_nuisance:
            return out[:, : self.code_tokens], out[:, self.code_tokens:]
        return out, None

    def compose(self, c, n, subject_ids, dataset_ids):
        """(c, n) -> surrogate universal latent (B, L_r, d_r)."""
        if not self.use_compositor:
            raise InvalidConfig("this LFCM was built without a Compositor")
        if c.dim() == 2:
            return self.compose(c[None], None if n is None else n[None], subject_ids, dataset_ids)[0]
        if tuple(c.shape[-2:]) != (self.code_tokens, self.code_dim):
            raise ShapeMismatch(f"stimulus code shape {tuple(c.shape[-2:])} != {(self.code_tokens, self.code_dim)}")
        parts = [c]
        if self.use_nuisance:
            if n is None or tuple(n.shape[-2:]) != (1, self.code_dim):
                raise ShapeMismatch("nuisance code must have shape (1, d_c)")
            parts.append(n)
        u = torch.cat(parts, dim=1) + self.conditioning(subject_ids, dataset_ids, c.shape[0])
        if self.slot_embeddings:
            u = u + self.c_slots
        x = self.c_queries.expand(c.shape[0], -1, -1)
        for block in self.c_blocks:
            x = block(x, u)
        return self.c_out(self.c_norm(x)) * self.z_std + self.z_mean


def build_lfcm(cfg, n_subjects=None, n_datasets=None):
    w, l = cfg.world, cfg.lfcm
    torch.manual_seed(cfg.training.seed)
    return LFCM(
        n_subjects=n_subjects or w.n_subjects,
        n_datasets=n_datasets or w.n_datasets,
        latent_shape=(cfg.univae.cls_tokens, cfg.univae.width),
        code_shape=(w.target_tokens, w.target_dim),
        depth=l.depth, heads=l.heads, ff_mult=l.ff_mult,
        use_nuisance=l.use_nuisance, use_subject=l.use_subject,
        use_dataset=l.use_dataset, use_compositor=l.use_compositor,
        slot_embeddings=l.slot_embeddings,
    )


def check_latent_tie(lfcm, ae):
    if (lfcm.latent_tokens, lfcm.latent_dim) != tuple(ae.latent_shape):
        raise InvalidConfig(
            f"LFCM latent shape {(lfcm.latent_tokens, lfcm.latent_dim)} does not match autoencoder {ae.latent_shape}"
        )


def default_rate_mask(batch_size, rate=0.05, seed=0):
    """Per-sample Bernoulli(rate) flags selecting the default subject."""
    if not 0.0 <= rate <= 1.0:
        raise InvalidConfig(f"rate must be in [0, 1], got {rate}")
    import numpy as np

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.random(batch_size) < rate


def registry(cfg):
    return {
        "subjects": {f"sub-{s:02d}": s for s in range(cfg.world.n_subjects)},
        "datasets": {f"data-{d:02d}": d for d in range(cfg.world.n_datasets)},
        "default_subject": DEFAULT,
    }


def save_lfcm(path, lfcm, cfg):
    state = {"param." + k: v for k, v in lfcm.state_dict().items()}
    return save_tensors(path, state, kind="lfcm", fingerprint=lfcm_fingerprint(cfg),
                        ae_fingerprint=ae_fingerprint(cfg), registry=registry(cfg),
                        lfcm=cfg.lfcm.__dict__)


def load_lfcm(path, cfg):
    arrays, meta = load_tensors(path, kind="lfcm", fingerprint=lfcm_fingerprint(cfg))
    lfcm = build_lfcm(cfg)
    lfcm.load_state_dict({k[len("param."):]: torch.from_numpy(v) for k, v in arrays.items()})
    lfcm.eval()
    return lfcm
