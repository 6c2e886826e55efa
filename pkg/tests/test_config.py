import json

import pytest

from arbiscale import bundled_config, schema_path
from arbiscale import config as cfgmod


def _doc(**over):
    d = {"task": "train-stage1", "data": {"root": "toy:n=4,size=32,seed=0", "crop_size": 32}}
    d.update(over)
    return d


def test_minimal_config_fills_defaults():
    cfg = cfgmod.from_dict(_doc())
    assert cfg.latent_side == 32 // cfg.autoencoder.factor
    assert cfg.diffusion.T == 1000 and cfg.diffusion.beta_start == 1e-4 and cfg.diffusion.beta_end == 0.02
    assert cfg.align.finetune_lr == 1e-6
    assert cfg.to_dict()["stage1"]["lr"] == 5e-5


@pytest.mark.parametrize(
    "doc,path",
    [
        (_doc(extra=1), "<root>"),
        (_doc(data={"root": "x", "crop": 3}), "data"),
        (_doc(mlp={"hidden_units": 0}), "mlp/hidden_units"),
        (_doc(diffusion={"mode": "sr", "T": "many"}), "diffusion/T"),
        (_doc(data={"root": "x", "scale_range": [2, 4]}), "data/scale_range"),
        (_doc(data={"root": "x", "crop_size": 30}), "data/crop_size"),
        (_doc(diffusion={"beta_start": 0.1, "beta_end": 0.01}), "diffusion/beta_end"),
    ],
)
def test_bad_configs_report_their_path(doc, path):
    with pytest.raises(cfgmod.ConfigError) as info:
        cfgmod.from_dict(doc)
    assert info.value.path == path


def test_load_errors(tmp_path):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load(tmp_path / "list.json")


def test_shipped_schema_matches_code():
    assert json.loads(open(schema_path()).read()) == cfgmod.RUN_CONFIG_SCHEMA


@pytest.mark.parametrize("name", ["toy_sr", "toy_gen"])
def test_bundled_configs_validate_and_round_trip(name):
    cfg = cfgmod.load(bundled_config(name))
    again = cfgmod.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
