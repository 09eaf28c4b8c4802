"""End-to-end runs: evaluation, ablation sweeps and subject-scale trends."""
import logging

import numpy as np
import torch

from .config import lfcm_fingerprint
from .errors import InvalidCounts, TooFewSamples, UnknownAblation
from .evalkit import MetricsReport, disentanglement_report, mean_pixcorr, top1_accuracy, two_way_identification
from .inference import decode_codes, rescale, sweep_subjects
from .lfcm import DEFAULT
from .synthworld import gen_world, split_manifest, targets_for
from .training import Corpus, train_lfcm, training_subjects
from .univae import build_autoencoder, encode_maps, freeze, train_autoencoder

log = logging.getLogger(__name__)

# name -> (config overrides, trains its own LFCM?)
ABLATIONS = {
    "no_compositor": ({"lfcm.use_compositor": False}, True),
    "no_refcr": ({"training.w_refcr": 0.0}, True),
    "no_swap": ({"training.use_swap": False}, True),
    "no_nuisance": ({"lfcm.use_nuisance": False}, True),
    "no_dataset": ({"lfcm.use_dataset": False}, True),
    "no_subject": ({"lfcm.use_subject": False}, True),
    "no_univae": ({"univae.steps": 0}, True),
    "no_rescale": ({"inference.rescale": False}, False),
    "no_sweep": ({"inference.sweep": False}, False),
}
ALIASES = {
    "w/o comp.": "no_compositor", "w/o refcr": "no_refcr", "w/o swap": "no_swap",
    "w/o nuis.": "no_nuisance", "w/o datas.": "no_dataset", "w/o subj.": "no_subject",
    "w/o univae": "no_univae", "w/o rescale": "no_rescale", "w/o c'_te": "no_sweep",
}


def resolve_ablation(name):
    key = ALIASES.get(name.lower(), name)
    if key not in ABLATIONS:
        raise UnknownAblation(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return key


def set_determinism(enabled=True):
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def get_autoencoder(cfg, world, cache=None):
    """Train (or fetch from ``cache``, keyed by the autoencoder fingerprint) the Stage-I model."""
    from .config import ae_fingerprint

    key = ae_fingerprint(cfg)
    if cache is not None and key in cache:
        return cache[key]
    if cfg.univae.steps == 0:
        ae = freeze(build_autoencoder(world.mask, cfg.univae))
    else:
        ae, _, _ = train_autoencoder(world, cfg.univae)
    if cache is not None:
        cache[key] = ae
    return ae


def evaluation_subject_sets(cfg, world, train_subjects=None):
    """Dataset id -> ordered sweep subjects.

    Default: the dataset's training subjects then DEFAULT. An explicit
    ``inference.subjects`` list is used as given for every dataset (it may
    contain -1 for the default subject).
    """
    inf = cfg.inference
    if inf.subjects is not None:
        if not inf.subjects:
            from .errors import EmptySubjectSet

            raise EmptySubjectSet("inference.subjects is empty")
        return {d: [int(s) for s in inf.subjects] for d in range(world.n_datasets)}
    if train_subjects is None:
        train_subjects, _ = training_subjects(cfg, world)
    sets = {}
    for d in range(world.n_datasets):
        subs = sweep_subjects(world, d, train_subjects, False)
        sets[d] = subs + ([DEFAULT] if inf.include_default or not subs else [])
    return sets


@torch.no_grad()
def evaluate(cfg, world, ae, lfcm, stats, train_subjects=None):
    """Unseen-subject zero-shot metrics plus seen-subject reference metrics."""
    manifest = split_manifest(world)
    if train_subjects is None:
        train_subjects, _ = training_subjects(cfg, world)
    test = np.asarray(manifest["test_stimuli"])
    if len(test) < 2:
        raise TooFewSamples("evaluation needs at least two test stimuli")
    bank = targets_for(world, test)
    inf, ev = cfg.inference, cfg.eval
    rows = []

    def render(subject, noise_std=None):
        d = world.subject_dataset[subject]
        seeds = [(ev.trial_seed, int(k), int(subject), 0) for k in test]
        return world.render_batch(test, [subject] * len(test), [d] * len(test), seeds, noise_std).astype(np.float32)

    subject_sets = evaluation_subject_sets(cfg, world, train_subjects)

    unseen_scores, pix = [], []
    for u in manifest["unseen_subjects"]:
        d = int(world.subject_dataset[u])
        maps = render(u)
        z = encode_maps(ae, maps)
        c_final, _ = decode_codes(z, np.full(len(test), d), lfcm, stats, subject_sets,
                                  sweep=inf.sweep, rescale_codes=inf.rescale, axis=inf.rescale_axis)
        tw = two_way_identification(c_final, bank, ev.two_way_mode, seed=ev.trial_seed)
        t1 = top1_accuracy(c_final, bank, np.arange(len(test)))
        pc = float("nan")
        if lfcm.use_compositor:
            c_te, n_te = lfcm.factorize(z, torch.full((len(test),), DEFAULT), torch.full((len(test),), d))
            recon = ae.decode(lfcm.compose(c_te, n_te, torch.full((len(test),), DEFAULT),
                                           torch.full((len(test),), d))).numpy()
            pc = mean_pixcorr(render(u, noise_std=0.0), recon, world.mask.active)
        pix.append(pc)
        unseen_scores.append((tw, t1))
        rows.append({"group": "unseen", "subject": int(u), "dataset": d, "n": len(test),
                     "two_way": tw, "top1": t1, "pixcorr": pc})

    seen_codes, seen_stim, seen_subj, raw = [], [], [], []
    if ev.include_seen:
        for s in train_subjects:
            d = int(world.subject_dataset[s])
            maps = render(s)
            z = encode_maps(ae, maps)
            c, _ = lfcm.factorize(z, torch.full((len(test),), s), torch.full((len(test),), d))
            code = c.double().numpy()
            if inf.rescale:
                code = rescale(code, stats, d, inf.rescale_axis)
            rows.append({"group": "seen", "subject": int(s), "dataset": d, "n": len(test),
                         "two_way": two_way_identification(code, bank, ev.two_way_mode, seed=ev.trial_seed),
                         "top1": top1_accuracy(code, bank, np.arange(len(test))), "pixcorr": float("nan")})
            seen_codes.append(c.double().numpy())
            raw.append(maps)
            seen_stim.append(test)
            seen_subj.append(np.full(len(test), s))

    raw_d = code_d = (float("nan"), float("nan"))
    if len(seen_codes) >= 2:
        stim_ids, subj_ids = np.concatenate(seen_stim), np.concatenate(seen_subj)
        raw_d = disentanglement_report(np.concatenate(raw), stim_ids, subj_ids)
        code_d = disentanglement_report(np.concatenate(seen_codes), stim_ids, subj_ids)

    per_dataset = _group_rows(rows)
    seen_rows = [r for r in rows if r["group"] == "seen"]
    report = MetricsReport(
        pixcorr=float(np.nanmean(pix)) if pix and not np.all(np.isnan(pix)) else float("nan"),
        two_way=float(np.mean([s[0] for s in unseen_scores])) if unseen_scores else float("nan"),
        top1=float(np.mean([s[1] for s in unseen_scores])) if unseen_scores else float("nan"),
        within_stim_cross_subj_dist=code_d[0],
        within_subj_cross_stim_dist=code_d[1],
        per_dataset=per_dataset,
        extra={
            "per_subject": rows,
            "seen_two_way": float(np.mean([r["two_way"] for r in seen_rows])) if seen_rows else float("nan"),
            "seen_top1": float(np.mean([r["top1"] for r in seen_rows])) if seen_rows else float("nan"),
            "raw_within_stim_cross_subj_dist": raw_d[0],
            "raw_within_subj_cross_stim_dist": raw_d[1],
            "chance_top1": 1.0 / len(test),
            "train_subjects": [int(s) for s in train_subjects],
            "subject_sets": {str(k): v for k, v in subject_sets.items()},
        },
    )
    return report


def _group_rows(rows):
    out = []
    keys = sorted({(r["group"], r["dataset"]) for r in rows}, key=lambda k: (k[0] != "unseen", k[1]))
    for group, d in keys:
        sel = [r for r in rows if r["group"] == group and r["dataset"] == d]
        pcs = [r["pixcorr"] for r in sel if not np.isnan(r["pixcorr"])]
        out.append({
            "group": group, "dataset": int(d), "n": int(sum(r["n"] for r in sel)),
            "two_way": float(np.mean([r["two_way"] for r in sel])),
            "top1": float(np.mean([r["top1"] for r in sel])),
            "pixcorr": float(np.mean(pcs)) if pcs else float("nan"),
        })
    return out


class Session:
    """Shared world, autoencoders and corpora across many runs of one base config."""

    def __init__(self, cfg):
        self.cfg = cfg
        set_determinism(cfg.deterministic)
        self.world = gen_world(cfg.world, cfg.surface)
        self.manifest = split_manifest(self.world)
        self.ae_cache = {}
        self._corpora = {}
        self._models = {}

    def autoencoder(self, cfg=None):
        return get_autoencoder(cfg or self.cfg, self.world, self.ae_cache)

    def corpus(self, cfg, ae):
        from .config import ae_fingerprint

        key = ae_fingerprint(cfg)
        if key not in self._corpora:
            self._corpora[key] = Corpus(self.world, self.manifest["train_stimuli"],
                                        self.manifest["seen_subjects"], cfg.world.n_repeats, ae)
        return self._corpora[key]

    def run(self, cfg, log_fn=None):
        """Train an LFCM for ``cfg`` and evaluate it; returns (report, lfcm, stats, log)."""
        ae = self.autoencoder(cfg)
        full = self.corpus(cfg, ae)
        subjects, _ = training_subjects(cfg, self.world)
        # An explicit list naming every seen subject trains the same model as the default.
        key = lfcm_fingerprint(cfg.replace(**{"training.train_subjects": sorted(int(s) for s in subjects)}))
        if key not in self._models:
            self._models[key] = train_lfcm(self.world, ae, cfg, corpus=full.subset(subjects), log_fn=log_fn)
        lfcm, train_log, stats = self._models[key]
        report = evaluate(cfg, self.world, ae, lfcm, stats, subjects)
        return report, lfcm, stats, train_log


def ablate(cfg, ablations=None, seeds=None, session=None, log_fn=None):
    """Train/evaluate the full model and each ablation for every seed.

    Returns (rows, summary): one row per (variant, seed) and per-variant
    seed means with deltas against the full model.
    """
    ablations = [resolve_ablation(a) for a in (cfg.experiment.ablations if ablations is None else ablations)]
    seeds = list(cfg.experiment.seeds if seeds is None else seeds)
    session = session or Session(cfg)
    rows = []
    for seed in seeds:
        base = cfg.replace(**{"training.seed": int(seed)})
        report, lfcm, stats, _ = session.run(base)
        rows.append(_ablation_row("full", seed, report, swap_active=True))
        ae = session.autoencoder(base)
        for name in ablations:
            overrides, retrain = ABLATIONS[name]
            variant = base.replace(**overrides)
            if retrain:
                rep = session.run(variant)[0]
            else:
                rep = evaluate(variant, session.world, ae, lfcm, stats)
            rows.append(_ablation_row(name, seed, rep, swap_active=variant.training.use_swap))
            if log_fn:
                log_fn(rows[-1])
    return rows, summarize_ablation(rows)


def _ablation_row(variant, seed, report, swap_active):
    return {"variant": variant, "seed": int(seed), "two_way": report.two_way, "top1": report.top1,
            "pixcorr": report.pixcorr, "seen_two_way": report.extra["seen_two_way"],
            "swap_term": "present" if swap_active else "absent"}


def summarize_ablation(rows):
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    full = [r for r in rows if r["variant"] == "full"]
    full_mean = {m: float(np.mean([r[m] for r in full])) for m in ("two_way", "top1")}
    out = []
    for v in variants:
        sel = [r for r in rows if r["variant"] == v]
        entry = {"variant": v, "n_seeds": len(sel)}
        for m in ("two_way", "top1"):
            entry[m] = float(np.mean([r[m] for r in sel]))
            entry[m + "_std"] = float(np.std([r[m] for r in sel]))
            entry["delta_" + m] = entry[m] - full_mean[m]
        out.append(entry)
    return out


def stratified_subjects(world, seen, count, rng):
    """At least one subject per dataset, remainder proportional to dataset sizes."""
    by_ds = {d: [s for s in seen if world.subject_dataset[s] == d] for d in range(world.n_datasets)}
    by_ds = {d: v for d, v in by_ds.items() if v}
    if count < len(by_ds) or count > len(seen):
        raise InvalidCounts(f"subject count {count} must be in [{len(by_ds)}, {len(seen)}]")
    alloc = {d: 1 for d in by_ds}
    remaining = count - len(by_ds)
    sizes = np.array([len(by_ds[d]) - 1 for d in by_ds], dtype=float)
    if remaining:
        quota = remaining * sizes / sizes.sum()
        extra = np.floor(quota).astype(int)
        order = np.argsort(-(quota - extra), kind="stable")
        for i in order[: remaining - extra.sum()]:
            extra[i] += 1
        for d, e in zip(by_ds, extra):
            alloc[d] += int(e)
    chosen = []
    for d, k in alloc.items():
        chosen.extend(rng.choice(by_ds[d], size=k, replace=False).tolist())
    return sorted(int(s) for s in chosen)


def subject_scale(cfg, counts=None, repeats=None, session=None, log_fn=None):
    """Unseen-subject metrics as a function of the number of training subjects."""
    counts = list(cfg.experiment.subject_counts if counts is None else counts)
    repeats = cfg.experiment.repeats if repeats is None else repeats
    if not counts or repeats < 1:
        raise InvalidCounts("need at least one subject count and one repeat")
    session = session or Session(cfg)
    seen = session.manifest["seen_subjects"]
    rows = []
    for count in counts:
        for r in range(repeats):
            rng = np.random.default_rng([cfg.training.seed, int(count), r])
            subs = stratified_subjects(session.world, seen, int(count), rng)
            variant = cfg.replace(**{"training.train_subjects": subs,
                                     "training.seed": int(cfg.training.seed + r)})
            rep = session.run(variant)[0]
            rows.append({"count": int(count), "repeat": r, "subjects": subs,
                         "two_way": rep.two_way, "top1": rep.top1, "pixcorr": rep.pixcorr})
            if log_fn:
                log_fn(rows[-1])
    table = []
    for count in counts:
        sel = [x for x in rows if x["count"] == count]
        entry = {"count": int(count), "n": len(sel)}
        for m in ("two_way", "top1", "pixcorr"):
            vals = [x[m] for x in sel]
            entry[m + "_mean"] = float(np.mean(vals))
            entry[m + "_std"] = float(np.std(vals))
        table.append(entry)
    return rows, table


def gradient_suite(seed=0, step=1e-5, tol=1e-3, batch=3):
    """Finite-difference checks of every loss on tiny float64 instances.

    Returns name -> GradCheckReport. Each instance has well under 1k
    parameters so the element-by-element sweep stays fast.
    """
    from .evalkit import grad_check
    from .lfcm import LFCM
    from .surface import make_mask
    from .training import (PairFactorization, loss_align, loss_rec, loss_rec_total, loss_refcr,
                           swap_reconstruct, total_loss)
    from .univae import UniversalAutoencoder, ae_loss

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    mask = make_mask(8, 8, 1.0, 4, seed)
    ae = UniversalAutoencoder(mask, cls_tokens=2, width=4, enc_depth=1, dec_depth=1, heads=2, ff_mult=1).double()
    lfcm = LFCM(n_subjects=3, n_datasets=2, latent_shape=(2, 4), code_shape=(2, 4), depth=1, heads=2,
                ff_mult=1).double()
    act = mask.torch_active(torch.float64)
    maps = torch.randn(2, batch, *mask.shape, generator=gen, dtype=torch.float64) * act
    c_gt = torch.randn(batch, 2, 4, generator=gen, dtype=torch.float64)
    sub = torch.tensor([0, 1, 2][:batch]).repeat(2)[: 2 * batch].view(2, batch)
    data = torch.zeros(2, batch, dtype=torch.long)
    with torch.no_grad():
        z = torch.stack([ae.encode(maps[0]), ae.encode(maps[1])])

    reports = {"ae": grad_check(lambda: ae_loss(maps[0], ae(maps[0]), mask), dict(ae.named_parameters()), step, tol)}

    for p in ae.parameters():
        p.requires_grad_(False)
    params = dict(lfcm.named_parameters())

    def factors():
        c, n = lfcm.factorize(torch.cat([z[0], z[1]]), torch.cat([sub[0], sub[1]]), torch.cat([data[0], data[1]]))
        return PairFactorization(c[:batch], n[:batch], c[batch:], n[batch:], sub[0], sub[1], data[0], data[1])

    def align():
        pf = factors()
        return loss_align(pf.c_i, pf.c_j, c_gt)

    def rec():
        pf = factors()
        z_i = lfcm.compose(pf.c_i, pf.n_i, pf.subject_i, pf.dataset_i)
        return loss_rec(z[0], z_i, maps[0], ae)

    def rec_swap():
        pf = factors()
        sw_i, sw_j = swap_reconstruct(pf, lfcm)
        return loss_rec(z[0], sw_i.z_surrogate, maps[0], ae) + loss_rec(z[1], sw_j.z_surrogate, maps[1], ae)

    # With stop-gradient the surrogates are constants of the loss, so the
    # finite-difference oracle must hold them fixed as well.
    with torch.no_grad():
        frozen = swap_reconstruct(factors(), lfcm)

    def refcr():
        return loss_refcr(frozen, [c_gt, c_gt], lfcm, stop_gradient=True)

    def refcr_full():
        # Surrogate latents stay differentiable; the nuisance targets are
        # stop-gradient by definition and are held at their base values.
        live = swap_reconstruct(factors(), lfcm)
        for rec, fixed in zip(live, frozen):
            rec.source_n = fixed.source_n
        return loss_refcr(live, [c_gt, c_gt], lfcm, stop_gradient=False)

    def total():
        terms = {"rec": loss_rec_total(rec(), rec_j(), rec_swap()), "align": align(), "refcr": refcr()}
        return total_loss(terms)

    def rec_j():
        pf = factors()
        return loss_rec(z[1], lfcm.compose(pf.c_j, pf.n_j, pf.subject_j, pf.dataset_j), maps[1], ae)

    for name, fn in (("align", align), ("rec", rec), ("rec_swap", rec_swap), ("refcr", refcr),
                     ("refcr_full", refcr_full), ("total", total)):
        reports[name] = grad_check(fn, params, step, tol)
    return reports
