"""Run configuration: nested dataclasses, YAML loading and dotted overrides."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Optional

import yaml

from .errors import InvalidConfig


@dataclass
class WorldConfig:
    n_stimuli: int = 400
    n_test_stimuli: int = 200
    n_subjects: int = 11
    n_datasets: int = 2
    unseen_subjects: list = field(default_factory=lambda: [0])
    d_true: int = 16
    n_modes: int = 48
    target_tokens: int = 4
    target_dim: int = 64
    subject_spread: float = 1.5
    subject_bias: float = 1.5
    dataset_offset: float = 0.5
    dataset_gain_spread: float = 0.2
    # Interpreted as a multiple of the world's signal std when noise_relative is set.
    noise_std: float = 0.25
    noise_relative: bool = True
    n_repeats: int = 3
    smoothing_radius: float = 1.0
    seed: int = 7


@dataclass
class SurfaceConfig:
    height: int = 32
    width: int = 32
    patch_size: int = 4
    coverage: float = 0.6
    keep_threshold: float = 0.5


@dataclass
class UnivaeConfig:
    cls_tokens: int = 4
    width: int = 64
    enc_depth: int = 2
    dec_depth: int = 2
    heads: int = 4
    ff_mult: int = 2
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    warmup: int = 200
    weight_decay: float = 0.01
    # Upper bound of the per-sample input noise level during pretraining, relative to signal std.
    pretrain_noise: float = 0.3
    n_heldout: int = 256
    target_loss: Optional[float] = None
    seed: int = 0


@dataclass
class LfcmConfig:
    depth: int = 2
    heads: int = 4
    ff_mult: int = 2
    use_nuisance: bool = True
    use_subject: bool = True
    use_dataset: bool = True
    use_compositor: bool = True
    slot_embeddings: bool = True


@dataclass
class TrainingConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.01
    default_rate: float = 0.05
    pair_policy: list = field(default_factory=lambda: [0.4, 0.4, 0.2])
    pseudo_noise: float = 0.1
    w_rec: float = 1.0
    w_align: float = 1.0
    w_refcr: float = 1.0
    use_swap: bool = True
    stop_gradient: bool = True
    train_subjects: Optional[list] = None
    seed: int = 0


@dataclass
class InferenceConfig:
    sweep: bool = True
    rescale: bool = True
    rescale_axis: str = "tokens"
    subjects: Optional[list] = None
    include_default: bool = True


@dataclass
class EvalConfig:
    two_way_mode: str = "exhaustive"
    include_seen: bool = True
    trial_seed: int = 1000


@dataclass
class ExperimentConfig:
    ablations: list = field(default_factory=lambda: ["no_swap", "no_refcr", "no_nuisance", "no_sweep", "no_rescale"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    subject_counts: list = field(default_factory=lambda: [2, 4, 6, 10])
    repeats: int = 3


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    surface: SurfaceConfig = field(default_factory=SurfaceConfig)
    univae: UnivaeConfig = field(default_factory=UnivaeConfig)
    lfcm: LfcmConfig = field(default_factory=LfcmConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    deterministic: bool = True

    def to_dict(self):
        return asdict(self)

    def replace(self, **overrides):
        """Copy with dotted-key overrides, e.g. ``replace(**{"world.seed": 3})``."""
        data = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(data, key, value)
        return from_dict(data)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise InvalidConfig(f"section {where!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise InvalidConfig(f"unknown keys in {where!r}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = cls().__getattribute__(name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = _coerce(value, default, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def _coerce(value, default, where):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfig(f"{where} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig(f"{where} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(f"{where} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise InvalidConfig(f"{where} expects a list, got {value!r}")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise InvalidConfig(f"{where} expects a string, got {value!r}")
    return value


def from_dict(data):
    cfg = _build(RunConfig, data or {}, "")
    validate(cfg)
    return cfg


def _set_dotted(data, key, value):
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise InvalidConfig(f"unknown config section in override {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise InvalidConfig(f"unknown config key in override {key!r}")
    node[parts[-1]] = value


def parse_override(text):
    if "=" not in text:
        raise InvalidConfig(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides=()):
    data = RunConfig().to_dict()
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise InvalidConfig("config file must contain a mapping")
        for section, values in loaded.items():
            if section not in data:
                raise InvalidConfig(f"unknown config section {section!r}")
            if isinstance(data[section], dict):
                if not isinstance(values, dict):
                    raise InvalidConfig(f"section {section!r} must be a mapping")
                for key, value in values.items():
                    if key not in data[section]:
                        raise InvalidConfig(f"unknown keys in {section!r}: [{key!r}]")
                    data[section][key] = value
            else:
                data[section] = values
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_dotted(data, key, value)
    return from_dict(data)


def save_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def fingerprint(*parts):
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# World keys that only affect Stage II or evaluation; every other world key
# shapes the autoencoder's pretraining distribution (directly or through the
# empirical signal scale) and is part of its fingerprint.
NON_AE_WORLD_KEYS = ("n_test_stimuli", "unseen_subjects", "n_repeats", "noise_std", "noise_relative")


def ae_fingerprint(cfg):
    world = {k: v for k, v in asdict(cfg.world).items() if k not in NON_AE_WORLD_KEYS}
    return fingerprint("univae", world, asdict(cfg.surface), asdict(cfg.univae))


def lfcm_fingerprint(cfg):
    return fingerprint("lfcm", ae_fingerprint(cfg), asdict(cfg.world), asdict(cfg.lfcm), asdict(cfg.training))


def validate(cfg):
    w, s, u, t = cfg.world, cfg.surface, cfg.univae, cfg.training
    for name in ("n_stimuli", "n_subjects", "n_datasets", "n_repeats", "n_modes", "target_tokens", "target_dim"):
        if getattr(w, name) < 1:
            raise InvalidConfig(f"world.{name} must be >= 1")
    if w.d_true < 2:
        raise InvalidConfig("world.d_true must be >= 2")
    if w.n_modes < w.d_true:
        raise InvalidConfig("world.n_modes must be >= world.d_true")
    if not 0 <= w.n_test_stimuli < w.n_stimuli:
        raise InvalidConfig("world.n_test_stimuli must leave at least one training stimulus")
    if w.noise_std < 0 or w.smoothing_radius < 0:
        raise InvalidConfig("noise_std and smoothing_radius must be >= 0")
    if w.target_tokens * w.target_dim < w.d_true:
        raise InvalidConfig("target_tokens * target_dim must be >= d_true")
    if any(not 0 <= i < w.n_subjects for i in w.unseen_subjects):
        raise InvalidConfig("unseen_subjects out of range")
    if len(set(w.unseen_subjects)) >= w.n_subjects:
        raise InvalidConfig("at least one seen subject is required")
    if s.height % s.patch_size or s.width % s.patch_size:
        raise InvalidConfig("grid must be divisible by patch_size")
    if not 0 < s.coverage <= 1:
        raise InvalidConfig("surface.coverage must be in (0, 1]")
    if u.width % u.heads or u.cls_tokens < 1:
        raise InvalidConfig("univae.width must be divisible by heads and cls_tokens >= 1")
    if w.target_dim % cfg.lfcm.heads:
        raise InvalidConfig("world.target_dim must be divisible by lfcm.heads")
    if len(t.pair_policy) != 3 or any(p < 0 for p in t.pair_policy) or abs(sum(t.pair_policy) - 1) > 1e-9:
        raise InvalidConfig("training.pair_policy must be three non-negative probabilities summing to 1")
    if not 0 <= t.default_rate <= 1:
        raise InvalidConfig("training.default_rate must be in [0, 1]")
    if cfg.inference.rescale_axis not in ("tokens", "features", "all"):
        raise InvalidConfig("inference.rescale_axis must be tokens, features or all")
    if cfg.eval.two_way_mode not in ("exhaustive", "sampled"):
        raise InvalidConfig("eval.two_way_mode must be exhaustive or sampled")
