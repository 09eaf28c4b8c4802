import pytest
import yaml

from cortexcomp.config import (
    RunConfig, ae_fingerprint, from_dict, lfcm_fingerprint, load_config, parse_override, save_config,
)
from cortexcomp.errors import InvalidConfig


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    assert load_config(path) == cfg
    assert from_dict(cfg.to_dict()) == cfg


def test_overrides_parse_yaml_scalars():
    assert parse_override("training.lr=0.5") == ("training.lr", 0.5)
    assert parse_override("inference.subjects=[1, -1]") == ("inference.subjects", [1, -1])
    cfg = load_config(None, ["training.steps=7", "inference.sweep=false"])
    assert cfg.training.steps == 7 and cfg.inference.sweep is False


@pytest.mark.parametrize("override", ["training.nope=1", "nope.steps=1", "training.steps=abc",
                                      "training.default_rate=2", "inference.rescale_axis=rows", "novalue"])
def test_invalid_overrides(override):
    with pytest.raises(InvalidConfig):
        load_config(None, [override])


def test_unknown_file_keys(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"training": {"stepz": 3}}))
    with pytest.raises(InvalidConfig):
        load_config(path)
    path.write_text(yaml.safe_dump({"bogus": {}}))
    with pytest.raises(InvalidConfig):
        load_config(path)


def test_fingerprints():
    cfg = RunConfig()
    # evaluation-only world keys leave the autoencoder fingerprint alone
    assert ae_fingerprint(cfg) == ae_fingerprint(cfg.replace(**{"world.noise_std": 0.7, "world.unseen_subjects": [1]}))
    assert ae_fingerprint(cfg) != ae_fingerprint(cfg.replace(**{"world.seed": 9}))
    assert ae_fingerprint(cfg) != ae_fingerprint(cfg.replace(**{"univae.lr": 0.5}))
    assert lfcm_fingerprint(cfg) != lfcm_fingerprint(cfg.replace(**{"training.seed": 1}))
    assert lfcm_fingerprint(cfg) == lfcm_fingerprint(cfg.replace(**{"inference.sweep": False}))
