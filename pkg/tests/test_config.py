"""Strict config parsing, canonical hashing, and manifests."""

import pytest

from dslam.config import (
    RunManifest,
    config_hash,
    load_json,
    pipeline_from_dict,
    read_manifest,
    scene_from_dict,
    scene_to_dict,
)
from dslam.errors import ConfigError


def test_unknown_keys_rejected_by_name():
    with pytest.raises(ConfigError, match="bogus"):
        scene_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="lambda_zero"):
        pipeline_from_dict({"lambda_zero": 1e-4})


def test_values_round_trip():
    spec = scene_from_dict({"n_frames": 25, "fx": 100, "sigma_depth": 0.1})
    assert spec.n_frames == 25
    assert spec.fx == 100.0 and isinstance(spec.fx, float)
    cfg = pipeline_from_dict({"use_mask": False, "patches_per_frame": 32})
    assert cfg.use_mask is False
    assert cfg.patches_per_frame == 32


def test_non_integer_rejected():
    with pytest.raises(ConfigError):
        scene_from_dict({"n_frames": 12.5})


def test_validation_applies():
    with pytest.raises(ConfigError):
        scene_from_dict({"camera_path": "zigzag"})
    with pytest.raises(ConfigError):
        pipeline_from_dict({"window_frames": 1})


def test_load_json_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_json(p)
    with pytest.raises(ConfigError):
        load_json(tmp_path / "missing.json")
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_json(p)


def test_config_hash_stability():
    a = {"x": 1, "y": [1, 2], "z": {"b": 2, "a": 1}}
    b = {"z": {"a": 1, "b": 2}, "y": [1, 2], "x": 1}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({**a, "x": 2})
    assert len(config_hash(a)) == 64


def test_manifest_round_trip(tmp_path):
    spec = scene_from_dict({"n_frames": 9})
    man = RunManifest(scene=scene_to_dict(spec), pipeline={}, seed=4,
                      artifacts={"sequence": "."})
    path = man.write(tmp_path / "manifest.json")
    back = read_manifest(path)
    assert back.seed == 4
    assert back.scene["n_frames"] == 9
    assert back.hash == man.hash and len(back.hash) == 64
