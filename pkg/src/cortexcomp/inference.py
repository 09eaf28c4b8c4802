"""Zero-shot decoding for unseen subjects.

encode -> factorize with the default subject -> compose under every sweep
subject -> re-factorize -> rescale each code -> average -> cosine readout
against a bank of visual targets.
"""
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import EmptyBank, EmptyInput, EmptySubjectSet, MissingStats, ShapeMismatch
from .lfcm import DEFAULT


@dataclass
class DecodeResult:
    c_final: np.ndarray
    per_subject: list
    ranked_stimuli: list
    provenance: dict = field(default_factory=dict)

    def to_json(self, include_code=False):
        out = {
            "ranked_stimuli": [[int(k), float(s)] for k, s in self.ranked_stimuli],
            "subject_set": [int(s) for s, _ in self.per_subject],
            "provenance": self.provenance,
        }
        if include_code:
            out["c_final"] = np.asarray(self.c_final).tolist()
        return out


def _as_ids(value, batch):
    ids = torch.as_tensor(value, dtype=torch.long)
    return ids.expand(batch) if ids.dim() == 0 else ids


@torch.no_grad()
def initial_factorize(z_te, dataset_id, lfcm):
    """Factorize with the shared default-subject embedding."""
    batch = 1 if z_te.dim() == 2 else z_te.shape[0]
    return lfcm.factorize(z_te, _as_ids(DEFAULT, batch) if z_te.dim() == 3 else DEFAULT, dataset_id)


def sweep_subjects(world, dataset_id, train_subjects, include_default=True):
    """Training subjects of the dataset, followed by DEFAULT."""
    subs = [s for s in train_subjects if world.subject_dataset[s] == dataset_id]
    return subs + ([DEFAULT] if include_default else [])


@torch.no_grad()
def surrogate_sweep(c_te, n_te, dataset_id, subject_set, lfcm):
    """Re-factorized stimulus codes, one per subject in ``subject_set`` (input order)."""
    subject_set = list(subject_set)
    if not subject_set:
        raise EmptySubjectSet("surrogate sweep needs at least one subject")
    single = c_te.dim() == 2
    c = c_te[None] if single else c_te
    n = None if n_te is None else (n_te[None] if single else n_te)
    b, k = c.shape[0], len(subject_set)
    # Stack (subject, sample) along the batch axis for one pass.
    c_rep = c.repeat(k, 1, 1)
    n_rep = None if n is None else n.repeat(k, 1, 1)
    subs = torch.as_tensor(subject_set, dtype=torch.long).repeat_interleave(b)
    data = _as_ids(dataset_id, b).repeat(k)
    z_sur = lfcm.compose(c_rep, n_rep, subs, data)
    c2, _ = lfcm.factorize(z_sur, subs, data)
    c2 = c2.view(k, b, *c2.shape[1:])
    return [(s, c2[i][0] if single else c2[i]) for i, s in enumerate(subject_set)]


def rescale(c, stats, dataset_id, axis="tokens"):
    """Standardize the code sample-locally, then map onto training statistics.

    ``axis`` picks the normalization axis: ``tokens`` (per feature across the
    L_c tokens), ``features`` (per token across features) or ``all``.
    """
    if stats is None:
        raise MissingStats("rescaling needs training statistics")
    d = np.asarray(dataset_id, dtype=np.int64)
    if d.ndim > 1:
        raise ShapeMismatch("dataset_id must be a scalar or one id per sample")
    if (d < 0).any() or (d >= len(stats.mean)).any():
        raise MissingStats(f"no statistics for dataset {dataset_id}")
    as_torch = isinstance(c, torch.Tensor)
    x = c.detach().double().numpy() if as_torch else np.asarray(c, dtype=np.float64)
    dims = {"tokens": (-2,), "features": (-1,), "all": (-2, -1)}[axis]
    mu = x.mean(axis=dims, keepdims=True)
    sd = np.maximum(x.std(axis=dims, keepdims=True), stats.eps)
    out = (x - mu) / sd * stats.std[d] + stats.mean[d]
    return torch.as_tensor(out, dtype=c.dtype) if as_torch else out


def aggregate(codes):
    """Elementwise arithmetic mean of a non-empty list of equal-shape codes."""
    codes = list(codes)
    if not codes:
        raise EmptyInput("nothing to aggregate")
    shape = tuple(codes[0].shape)
    if any(tuple(c.shape) != shape for c in codes):
        raise ShapeMismatch("codes must share one shape")
    if isinstance(codes[0], torch.Tensor):
        return torch.stack(codes).mean(0)
    return np.mean(np.stack(codes), axis=0)


def cosine_matrix(pred, bank):
    p = np.asarray(pred, dtype=np.float64).reshape(len(pred), -1)
    t = np.asarray(bank, dtype=np.float64).reshape(len(bank), -1)
    p = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
    t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    return p @ t.T


def readout(c_final, target_bank, stimulus_ids=None):
    """Bank entries ranked by cosine similarity; ties by ascending stimulus id."""
    bank = np.asarray(target_bank)
    if len(bank) == 0:
        raise EmptyBank("target bank is empty")
    ids = np.arange(len(bank)) if stimulus_ids is None else np.asarray(stimulus_ids)
    scores = cosine_matrix(np.asarray(c_final)[None], bank)[0]
    order = np.lexsort((ids, -scores))
    return [(int(ids[i]), float(scores[i])) for i in order]


@torch.no_grad()
def decode_codes(z, dataset_ids, lfcm, stats, subject_sets, sweep=True, rescale_codes=True,
                 axis="tokens"):
    """Batched zero-shot pipeline on latents; returns (c_final, per-subject codes).

    ``subject_sets`` maps dataset id -> ordered sweep subjects. Samples are
    grouped by dataset so each group runs one batched sweep.
    """
    z = torch.as_tensor(z)
    dataset_ids = np.asarray(dataset_ids)
    c_te, n_te = initial_factorize(z, torch.as_tensor(dataset_ids), lfcm)
    if not sweep or not lfcm.use_compositor:
        codes = c_te.double().numpy()
        per = [(DEFAULT, codes)]
        if rescale_codes:
            codes = rescale(codes, stats, dataset_ids, axis)
            per = [(DEFAULT, codes)]
        return codes, per
    c_final = np.zeros(tuple(c_te.shape), dtype=np.float64)
    per_subject = {}
    for d in np.unique(dataset_ids):
        rows = np.flatnonzero(dataset_ids == d)
        subs = subject_sets[int(d)]
        swept = surrogate_sweep(c_te[rows], None if n_te is None else n_te[rows], int(d), subs, lfcm)
        codes = []
        for s, code in swept:
            code = code.double().numpy()
            if rescale_codes:
                code = rescale(code, stats, int(d), axis)
            codes.append(code)
            per_subject.setdefault(s, np.full(c_final.shape, np.nan))[rows] = code
        c_final[rows] = aggregate(codes)
    return c_final, list(per_subject.items())


@torch.no_grad()
def decode_sample(S_te, dataset_id, ae, lfcm, stats, subject_set, target_bank, stimulus_ids=None,
                  sweep=True, rescale_codes=True, axis="tokens", provenance=None):
    """Full pipeline for one surface map."""
    maps = torch.as_tensor(np.asarray(S_te), dtype=torch.float32)[None]
    z = ae.encode(maps)
    c_final, per = decode_codes(z, [dataset_id], lfcm, stats, {int(dataset_id): list(subject_set)},
                                sweep=sweep, rescale_codes=rescale_codes, axis=axis)
    per_subject = [(s, codes[0]) for s, codes in per]
    result = DecodeResult(
        c_final=c_final[0],
        per_subject=per_subject,
        ranked_stimuli=readout(c_final[0], target_bank, stimulus_ids),
        provenance=dict(provenance or {}, sweep=sweep, rescale=rescale_codes, rescale_axis=axis,
                        subject_set=[int(s) for s in subject_set], dataset_id=int(dataset_id)),
    )
    return result
