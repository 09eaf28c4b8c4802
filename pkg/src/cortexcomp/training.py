"""Stage-II objectives and the LFCM training loop.

All squared-norm losses are per-element means. Surrogate latents entering the
re-factorizing consistency term are detached (configurable), and so is the
nuisance code they were built from.
"""
import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DivergenceDetected, InvalidPolicy, NoPairAvailable, ShapeMismatch
from .lfcm import DEFAULT, build_lfcm, check_latent_tie, default_rate_mask
from .surface import apply_mask
from .synthworld import split_manifest, targets_for
from .univae import ae_loss, encode_maps, warmup_schedule

REPEAT, CROSS, PSEUDO = 0, 1, 2
LOSS_TERMS = ("rec", "align", "refcr", "total")


@dataclass
class PairedSample:
    S_i: np.ndarray
    S_j: np.ndarray
    subject_i: int
    subject_j: int
    dataset_i: int
    dataset_j: int
    stimulus_id: int
    is_pseudo: bool
    kind: int = REPEAT


@dataclass
class PairFactorization:
    c_i: torch.Tensor
    n_i: torch.Tensor
    c_j: torch.Tensor
    n_j: torch.Tensor
    subject_i: torch.Tensor
    subject_j: torch.Tensor
    dataset_i: torch.Tensor
    dataset_j: torch.Tensor


@dataclass
class SurrogateRecord:
    z_surrogate: torch.Tensor
    source_c: torch.Tensor
    source_n: torch.Tensor
    subject_id: torch.Tensor
    dataset_id: torch.Tensor
    swapped: bool


@dataclass
class RescaleStats:
    """Per-dataset elementwise mean/std of training targets, (n_datasets, L_c, d_c)."""

    mean: np.ndarray
    std: np.ndarray
    eps: float = 1e-6

    def __post_init__(self):
        self.std = np.maximum(self.std, self.eps)


# ---------------------------------------------------------------------------
# corpus and pair sampling


class Corpus:
    """Rendered repeats of (stimulus, subject) with cached universal latents."""

    def __init__(self, world, stimuli, subjects, n_repeats, ae=None, noise_std=None, seed_base=0):
        self.world = world
        self.mask = world.mask
        rows = [(k, s, r) for s in subjects for k in stimuli for r in range(n_repeats)]
        if not rows:
            raise NoPairAvailable("corpus is empty")
        self.stim = np.array([r[0] for r in rows])
        self.subj = np.array([r[1] for r in rows])
        self.repeat = np.array([r[2] for r in rows])
        self.data = world.subject_dataset[self.subj]
        self.n_repeats = n_repeats
        seeds = [(seed_base, k, s, r) for k, s, r in rows]
        self.maps = world.render_batch(self.stim, self.subj, self.data, seeds, noise_std).astype(np.float32)
        self.targets = targets_for(world, self.stim).astype(np.float32)
        self.pixel_std = float(self.maps[:, self.mask.active].std())
        self.index = {}
        for i, key in enumerate(zip(self.stim, self.subj)):
            self.index.setdefault((int(key[0]), int(key[1])), []).append(i)
        self.partners = {}
        for s in set(self.subj.tolist()):
            d = world.subject_dataset[s]
            self.partners[s] = sorted(t for t in set(self.subj.tolist()) if t != s and world.subject_dataset[t] == d)
        self.z = encode_maps(ae, self.maps) if ae is not None else None

    def __len__(self):
        return len(self.stim)

    def subset(self, subjects):
        """Rows of ``subjects`` only; renders are seeded per row, so this equals a fresh build."""
        subjects = sorted(set(int(s) for s in subjects))
        if subjects == sorted(set(self.subj.tolist())):
            return self
        keep = np.flatnonzero(np.isin(self.subj, subjects))
        if not len(keep):
            raise NoPairAvailable("subset is empty")
        sub = object.__new__(Corpus)
        sub.world, sub.mask, sub.n_repeats = self.world, self.mask, self.n_repeats
        for name in ("stim", "subj", "repeat", "data", "maps", "targets"):
            setattr(sub, name, getattr(self, name)[keep])
        sub.z = None if self.z is None else self.z[torch.from_numpy(keep)]
        sub.pixel_std = float(sub.maps[:, self.mask.active].std())
        sub.index = {}
        for i, key in enumerate(zip(sub.stim, sub.subj)):
            sub.index.setdefault((int(key[0]), int(key[1])), []).append(i)
        sub.partners = {s: [t for t in self.partners[s] if t in subjects] for s in subjects}
        return sub


def _check_policy(policy):
    p = np.asarray(policy, dtype=float)
    if p.shape != (3,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidPolicy(f"pair policy must be 3 probabilities summing to 1, got {policy}")
    return p


def sample_pair_indices(corpus, batch_size, policy, rng):
    """Vectorizable pair draw: (row_i, row_j, kind); row_j == row_i for pseudo-pairs."""
    p = _check_policy(policy)
    can_repeat = corpus.n_repeats >= 2
    rows_i = rng.integers(0, len(corpus), batch_size)
    kinds = rng.choice(3, size=batch_size, p=p)
    rows_j = np.empty(batch_size, dtype=np.int64)
    for b, (i, kind) in enumerate(zip(rows_i, kinds)):
        k, s = int(corpus.stim[i]), int(corpus.subj[i])
        feasible = {REPEAT: can_repeat, CROSS: bool(corpus.partners[s]), PSEUDO: p[PSEUDO] > 0}
        if not feasible[kind]:
            options = [kk for kk in (REPEAT, CROSS, PSEUDO) if feasible[kk] and p[kk] > 0]
            if not options:
                options = [kk for kk in (REPEAT, CROSS) if feasible[kk]]
            if not options:
                raise NoPairAvailable("no repeats, no same-dataset partners and pseudo-pairs disabled")
            kind = options[0]
            kinds[b] = kind
        if kind == REPEAT:
            same = [r for r in corpus.index[(k, s)] if r != i]
            rows_j[b] = same[rng.integers(len(same))]
        elif kind == CROSS:
            other = corpus.partners[s][rng.integers(len(corpus.partners[s]))]
            cand = corpus.index[(k, other)]
            rows_j[b] = cand[rng.integers(len(cand))]
        else:
            rows_j[b] = i
    return rows_i, rows_j, kinds


def pseudo_noise(corpus, n, sigma_rel, rng):
    return (sigma_rel * corpus.pixel_std * rng.standard_normal((n,) + corpus.mask.shape)).astype(np.float32)


def sample_pairs(corpus, batch_size, policy, seed, pseudo_sigma=0.1):
    """Draw PairedSample records; pseudo-pairs add Gaussian noise to S_i."""
    rng = np.random.default_rng(seed)
    ri, rj, kinds = sample_pair_indices(corpus, batch_size, policy, rng)
    noise = pseudo_noise(corpus, batch_size, pseudo_sigma, rng)
    out = []
    for b, (i, j, kind) in enumerate(zip(ri, rj, kinds)):
        s_j = corpus.maps[j]
        if kind == PSEUDO:
            s_j = corpus.maps[i] + noise[b] * corpus.mask.active
        out.append(PairedSample(
            S_i=corpus.maps[i], S_j=s_j,
            subject_i=int(corpus.subj[i]), subject_j=int(corpus.subj[j]),
            dataset_i=int(corpus.data[i]), dataset_j=int(corpus.data[j]),
            stimulus_id=int(corpus.stim[i]), is_pseudo=kind == PSEUDO, kind=int(kind),
        ))
    return out


# ---------------------------------------------------------------------------
# losses


def _mse(a, b, per_sample=False):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = (a - b) ** 2
    if per_sample:
        return sq.flatten(1).mean(1)
    return sq.mean()


def loss_align(c_i, c_j, c_gt):
    return _mse(c_i, c_gt) + _mse(c_j, c_gt)


def loss_rec(z, z_rec, maps, ae):
    """Latent-space plus surface-space reconstruction through the frozen decoder."""
    return _mse(z, z_rec) + ae_loss(maps, ae.decode(z_rec), ae.mask)


def loss_rec_total(rec_i, rec_j, rec_swap):
    return rec_i + rec_j + rec_swap


def swap_reconstruct(pf: PairFactorization, lfcm):
    """Compose each side's conditions and nuisance with the partner's stimulus code."""
    z_i = lfcm.compose(pf.c_j, pf.n_i, pf.subject_i, pf.dataset_i)
    z_j = lfcm.compose(pf.c_i, pf.n_j, pf.subject_j, pf.dataset_j)
    return (SurrogateRecord(z_i, pf.c_j, pf.n_i, pf.subject_i, pf.dataset_i, True),
            SurrogateRecord(z_j, pf.c_i, pf.n_j, pf.subject_j, pf.dataset_j, True))


def loss_refcr(surrogates, c_gt_per_surrogate, lfcm, stop_gradient=True):
    """Sum over surrogates of ||c' - c_gt||^2 + ||n' - n_sg||^2 after re-factorizing."""
    total = 0.0
    for rec, c_gt in zip(surrogates, c_gt_per_surrogate):
        z = rec.z_surrogate.detach() if stop_gradient else rec.z_surrogate
        c2, n2 = lfcm.factorize(z, rec.subject_id, rec.dataset_id)
        total = total + _mse(c2, c_gt)
        if n2 is not None and rec.source_n is not None:
            total = total + _mse(n2, rec.source_n.detach())
    return total


def total_loss(terms, weights=(1.0, 1.0, 1.0)):
    w_rec, w_align, w_refcr = weights
    return w_rec * terms["rec"] + w_align * terms["align"] + w_refcr * terms["refcr"]


def pair_objectives(lfcm, ae, z_i, z_j, maps_i, maps_j, sub_i, sub_j, data_i, data_j, c_gt,
                    factor_sub_i=None, factor_sub_j=None, use_swap=True, stop_gradient=True,
                    weights=(1.0, 1.0, 1.0)):
    """All Stage-II loss terms for a batch of pairs.

    ``factor_sub_*`` are the subject ids used for the initial factorization
    (DEFAULT where the default-subject replacement fired); composition and
    re-factorization always use the true subject ids.
    """
    b = z_i.shape[0]
    fs_i = sub_i if factor_sub_i is None else factor_sub_i
    fs_j = sub_j if factor_sub_j is None else factor_sub_j
    c, n = lfcm.factorize(torch.cat([z_i, z_j]), torch.cat([fs_i, fs_j]), torch.cat([data_i, data_j]))
    c_i, c_j = c[:b], c[b:]
    n_i, n_j = (None, None) if n is None else (n[:b], n[b:])
    terms = {"align": loss_align(c_i, c_j, c_gt)}
    zero = c.new_zeros(())
    if not lfcm.use_compositor:
        terms.update(rec_i=zero, rec_j=zero, rec_swap=zero, rec=zero, refcr=zero)
        terms["total"] = total_loss(terms, weights)
        return terms

    # One batched compose call: [i, j] plus swapped [i_swap, j_swap].
    cc = [c_i, c_j] + ([c_j, c_i] if use_swap else [])
    nn_ = [n_i, n_j] + ([n_i, n_j] if use_swap else [])
    ss = [sub_i, sub_j] * (2 if use_swap else 1)
    dd = [data_i, data_j] * (2 if use_swap else 1)
    zz = [z_i, z_j] * (2 if use_swap else 1)
    mm = [maps_i, maps_j] * (2 if use_swap else 1)
    n_cat = None if n is None else torch.cat(nn_)
    z_tilde = lfcm.compose(torch.cat(cc), n_cat, torch.cat(ss), torch.cat(dd))
    recon = ae.decode(z_tilde)
    z_err = _mse(z_tilde, torch.cat(zz), per_sample=True)
    active = ae.mask.torch_active(recon.dtype)
    s_err = (((recon - torch.cat(mm)) * active) ** 2).flatten(1).sum(1) / active.sum()
    per = (z_err + s_err).view(len(cc), b).mean(1)
    terms["rec_i"], terms["rec_j"] = per[0], per[1]
    terms["rec_swap"] = per[2] + per[3] if use_swap else zero
    terms["rec"] = loss_rec_total(terms["rec_i"], terms["rec_j"], terms["rec_swap"])

    # Re-factorize every surrogate under its own (true) conditions.
    z_in = z_tilde.detach() if stop_gradient else z_tilde
    c2, n2 = lfcm.factorize(z_in, torch.cat(ss), torch.cat(dd))
    k = len(cc)
    refcr = ((c2 - c_gt.repeat(k, 1, 1)) ** 2).flatten(1).mean(1).view(k, b).mean(1).sum()
    if n2 is not None:
        refcr = refcr + ((n2 - n_cat.detach()) ** 2).flatten(1).mean(1).view(k, b).mean(1).sum()
    terms["refcr"] = refcr
    terms["total"] = total_loss(terms, weights)
    return terms


# ---------------------------------------------------------------------------
# training loop


def rescale_stats(world, stimuli, subjects):
    """Per-dataset mean/std of targets over the training stimuli each dataset saw."""
    lc, dc = world.target_shape
    mean = np.zeros((world.n_datasets, lc, dc))
    std = np.ones((world.n_datasets, lc, dc))
    all_targets = targets_for(world, stimuli)
    for d in range(world.n_datasets):
        if any(world.subject_dataset[s] == d for s in subjects):
            mean[d] = all_targets.mean(0)
            std[d] = all_targets.std(0)
    return RescaleStats(mean, std)


def save_stats(path, stats, cfg):
    from .config import lfcm_fingerprint
    from .tensorio import save_tensors

    return save_tensors(path, {"mean": stats.mean, "std": stats.std}, kind="stats",
                        fingerprint=lfcm_fingerprint(cfg), eps=stats.eps)


def load_stats(path, cfg):
    from .config import lfcm_fingerprint
    from .tensorio import load_tensors

    arrays, meta = load_tensors(path, kind="stats", fingerprint=lfcm_fingerprint(cfg))
    return RescaleStats(arrays["mean"], arrays["std"], meta.get("eps", 1e-6))


def training_subjects(cfg, world):
    manifest = split_manifest(world)
    if cfg.training.train_subjects is not None:
        subjects = sorted(int(s) for s in cfg.training.train_subjects)
        bad = [s for s in subjects if s in manifest["unseen_subjects"]]
        if bad:
            raise InvalidPolicy(f"unseen subjects {bad} cannot be used for training")
        return subjects, manifest
    return manifest["seen_subjects"], manifest


def train_lfcm(world, ae, cfg, steps=None, log_fn=None, corpus=None):
    """Train the LFCM with the autoencoder frozen; returns (lfcm, log, stats)."""
    t = cfg.training
    steps = t.steps if steps is None else steps
    subjects, manifest = training_subjects(cfg, world)
    if corpus is None:
        corpus = Corpus(world, manifest["train_stimuli"], subjects, cfg.world.n_repeats, ae)
    lfcm = build_lfcm(cfg)
    check_latent_tie(lfcm, ae)
    lfcm.set_latent_stats(corpus.z)
    for p in ae.parameters():
        p.requires_grad_(False)
    ae.eval()

    rng = np.random.default_rng([t.seed, 202])
    opt = torch.optim.AdamW(lfcm.parameters(), lr=t.lr, weight_decay=t.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_schedule(t.warmup))
    weights = (t.w_rec, t.w_align, t.w_refcr)
    maps_all = torch.from_numpy(corpus.maps)
    targets_all = torch.from_numpy(corpus.targets)
    log = []
    start = time.perf_counter()
    for step in range(steps):
        lfcm.train()
        ri, rj, kinds = sample_pair_indices(corpus, t.batch_size, t.pair_policy, rng)
        z_i, z_j = corpus.z[ri], corpus.z[rj].clone()
        maps_i, maps_j = maps_all[ri], maps_all[rj].clone()
        pseudo = np.flatnonzero(kinds == PSEUDO)
        if len(pseudo):
            noisy = apply_mask(maps_all[ri[pseudo]] + torch.from_numpy(
                pseudo_noise(corpus, len(pseudo), t.pseudo_noise, rng)), corpus.mask)
            maps_j[pseudo] = noisy
            with torch.no_grad():
                z_j[pseudo] = ae.encode(noisy)
        sub_i = torch.from_numpy(corpus.subj[ri])
        sub_j = torch.from_numpy(corpus.subj[rj])
        data_i = torch.from_numpy(corpus.data[ri])
        data_j = torch.from_numpy(corpus.data[rj])
        def_i = torch.from_numpy(default_rate_mask(t.batch_size, t.default_rate, rng))
        def_j = torch.from_numpy(default_rate_mask(t.batch_size, t.default_rate, rng))
        terms = pair_objectives(
            lfcm, ae, z_i, z_j, maps_i, maps_j, sub_i, sub_j, data_i, data_j, targets_all[ri],
            factor_sub_i=torch.where(def_i, DEFAULT, sub_i), factor_sub_j=torch.where(def_j, DEFAULT, sub_j),
            use_swap=t.use_swap, stop_gradient=t.stop_gradient, weights=weights,
        )
        loss = terms["total"]
        if not math.isfinite(loss.item()):
            raise DivergenceDetected(f"LFCM loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"step": step, **{k: float(terms[k].detach()) for k in LOSS_TERMS},
               "rec_swap": float(terms["rec_swap"].detach()), "swap_active": bool(t.use_swap and lfcm.use_compositor),
               "lr": sched.get_last_lr()[0], "wall_time": time.perf_counter() - start}
        sched.step()
        log.append(row)
        if log_fn:
            log_fn(row)
    lfcm.eval()
    for p in lfcm.parameters():
        p.requires_grad_(False)
    stats = rescale_stats(world, manifest["train_stimuli"], subjects)
    return lfcm, log, stats
