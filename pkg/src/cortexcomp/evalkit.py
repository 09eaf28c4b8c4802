"""Metrics, disentanglement geometry and a finite-difference gradient checker."""
import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.spatial.distance import pdist, squareform

from .errors import DegenerateInput, InsufficientLabels, NonFiniteGradient, ShapeMismatch, TooFewSamples
from .inference import cosine_matrix


def pixcorr(S_true, S_pred, active=None):
    """Pearson r between two maps over active pixels (all pixels if no mask)."""
    a = np.asarray(S_true, dtype=np.float64)
    b = np.asarray(S_pred, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    if active is not None:
        sel = np.broadcast_to(np.asarray(active, dtype=bool), a.shape)
        a, b = a[sel], b[sel]
    a, b = a.ravel(), b.ravel()
    if a.size < 2:
        raise DegenerateInput("pixcorr needs at least two active pixels")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInput("pixcorr is undefined for a constant map")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def mean_pixcorr(true_maps, pred_maps, active=None):
    return float(np.mean([pixcorr(t, p, active) for t, p in zip(true_maps, pred_maps)]))


def two_way_identification(pred_codes, true_targets, mode="exhaustive", seed=0):
    """Fraction of (sample, distractor) comparisons won by the true target.

    Success means cos(pred_i, target_i) > cos(pred_i, target_j); ties fail.
    ``exhaustive`` averages over every distractor j != i, ``sampled`` draws
    one distractor per sample.
    """
    n = len(pred_codes)
    if n != len(true_targets):
        raise TooFewSamples(f"{n} predictions for {len(true_targets)} targets")
    if n < 2:
        raise TooFewSamples("two-way identification needs at least two samples")
    sims = cosine_matrix(pred_codes, true_targets)
    diag = np.diag(sims)
    if mode == "exhaustive":
        wins = (diag[:, None] > sims).sum(1)
        return float((wins / (n - 1)).mean())
    if mode == "sampled":
        rng = np.random.default_rng(seed)
        j = rng.integers(0, n - 1, n)
        j = j + (j >= np.arange(n))
        return float((diag > sims[np.arange(n), j]).mean())
    raise ValueError(f"unknown two-way mode {mode!r}")


def top1_accuracy(pred_codes, bank, true_index):
    """Fraction of predictions whose best cosine match is the true bank row (ties to lowest index)."""
    sims = cosine_matrix(pred_codes, bank)
    return float((np.argmax(sims, axis=1) == np.asarray(true_index)).mean())


def disentanglement_report(codes, stimulus_ids, subject_ids):
    """Mean Euclidean distance within-stimulus/cross-subject and within-subject/cross-stimulus."""
    x = np.asarray(codes, dtype=np.float64).reshape(len(codes), -1)
    stim = np.asarray(stimulus_ids)
    subj = np.asarray(subject_ids)
    dist = squareform(pdist(x))
    same_stim = stim[:, None] == stim[None, :]
    same_subj = subj[:, None] == subj[None, :]
    a = same_stim & ~same_subj
    b = same_subj & ~same_stim
    if not a.any() or not b.any():
        raise InsufficientLabels("need pairs sharing a stimulus across subjects and a subject across stimuli")
    return float(dist[a].mean()), float(dist[b].mean())


@dataclass
class MetricsReport:
    pixcorr: float
    two_way: float
    top1: float
    within_stim_cross_subj_dist: float
    within_subj_cross_stim_dist: float
    per_dataset: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("two_way", "top1"):
            v = getattr(self, name)
            if not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be a fraction, got {v}")
        for name in ("within_stim_cross_subj_dist", "within_subj_cross_stim_dist"):
            v = getattr(self, name)
            if not (np.isnan(v) or v >= 0):
                raise ValueError(f"{name} must be non-negative, got {v}")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    CSV_COLUMNS = ("group", "dataset", "n", "PixCorr", "TwoWay", "Top1", "LPIPS", "AlexNet(2)",
                   "AlexNet(5)", "Inception", "CLIP", "EffNet-B", "SwAV")

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_COLUMNS)
        writer.writeheader()
        for row in self.per_dataset:
            out = {k: "N/A" for k in self.CSV_COLUMNS}
            out.update(group=row["group"], dataset=row["dataset"], n=row["n"],
                       PixCorr=_fmt(row.get("pixcorr")), TwoWay=_fmt(row.get("two_way")),
                       Top1=_fmt(row.get("top1")))
            writer.writerow(out)
        return buf.getvalue()


def _fmt(v):
    return "N/A" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj))


METRICS_SCHEMA = {
    "type": "object",
    "required": ["pixcorr", "two_way", "top1", "within_stim_cross_subj_dist",
                 "within_subj_cross_stim_dist", "per_dataset"],
    "properties": {
        "two_way": {"type": "number", "minimum": 0, "maximum": 1},
        "top1": {"type": "number", "minimum": 0, "maximum": 1},
        "within_stim_cross_subj_dist": {"type": "number", "minimum": 0},
        "within_subj_cross_stim_dist": {"type": "number", "minimum": 0},
        "per_dataset": {
            "type": "array",
            "items": {"type": "object", "required": ["group", "dataset", "n", "two_way", "top1"]},
        },
    },
}


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict
    tol: float

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def grad_check(loss_fn, params, step=1e-5, tol=1e-3, grad_scale=1.0, floor=1e-6):
    """Central finite differences against autograd, per parameter tensor.

    ``params`` is a dict name -> tensor or a sequence of tensors; ``loss_fn``
    takes no arguments and returns a scalar tensor. ``grad_scale`` multiplies
    the analytic gradient and exists to test the checker's sensitivity.
    Relative errors are taken on tensor norms; ``floor`` keeps tensors with
    an (almost) zero gradient from dividing rounding noise by zero.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    names = list(params)
    tensors = [params[k] for k in names]
    analytic = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    per_param = {}
    for name, p, g in zip(names, tensors, analytic):
        g = torch.zeros_like(p) if g is None else g * grad_scale
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"analytic gradient of {name} is not finite")
        numeric = torch.zeros_like(p)
        flat, num_flat = p.data.view(-1), numeric.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                num_flat[i] = (up - down) / (2 * step)
        if not torch.isfinite(numeric).all():
            raise NonFiniteGradient(f"numeric gradient of {name} is not finite")
        denom = max(g.norm().item(), numeric.norm().item(), floor)
        per_param[name] = (g - numeric).norm().item() / denom
    return GradCheckReport(max(per_param.values()) if per_param else 0.0, per_param, tol)
