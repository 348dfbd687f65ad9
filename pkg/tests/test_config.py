import json

import pytest
from pydantic import ValidationError

from evoscene.backends.oracle import OracleDepthEstimator
from evoscene.backends.remote import RemoteDepthEstimator, RemotePerceptualLoss, RemoteSceneCompleter
from evoscene.config import PipelineConfig, RunManifest, load_config, load_preset, resolve_backends
from evoscene.errors import ConfigError, UsageError
from evoscene.occupancy import patch_corners

ORACLE = {"depth": "oracle", "complete": "oracle", "synthesize": "oracle"}


def test_defaults_are_the_published_constants():
    cfg = PipelineConfig()

    assert (cfg.resolution, cfg.patch_size, cfg.overlap) == (128, 64, 48)
    assert (cfg.iterations, cfg.frames) == (3, 121)
    assert cfg.weights == (1.0, 0.0, 1.0)
    assert cfg.azimuth_amplitude == 45.0
    assert len(patch_corners(cfg.resolution, cfg.patch_size, cfg.overlap)) ** 3 == 125


@pytest.mark.parametrize(
    "values",
    [
        {"resolution": 16, "patch_size": 32},
        {"patch_size": 8, "overlap": 8, "resolution": 16},
        {"lambda_lpips": 0.5},
        {"lambda_lpips": 0.5, "loss_backend": "oracle"},
        {"depth_backend": "grpc://gpu"},
        {"depth_backend": "remote:"},
        {"frames": 1},
        {"inventado": 3},
    ],
)
def test_invalid_configurations_are_rejected(values):
    with pytest.raises(ValidationError):
        PipelineConfig(**values)


def test_presets_load_values():
    assert load_preset("full")["resolution"] == 128
    assert load_config(preset="desk").resolution == 32

    with pytest.raises(UsageError) as info:
        load_preset("inexistente")
    assert info.value.exit_code == 2
    assert "desk" in str(info.value)


def test_file_overrides_preset_and_flags_override_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"frames": 5, "iterations": 2}))

    cfg = load_config(preset="desk", config_path=path, overrides={"iterations": 1, "frames": None})

    assert cfg.resolution == 32
    assert cfg.frames == 5
    assert cfg.iterations == 1


def test_bad_config_files_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(config_path=tmp_path / "missing.json")

    broken = tmp_path / "broken.json"
    broken.write_text("{frames: ")
    with pytest.raises(ConfigError):
        load_config(config_path=broken)

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"resolution": 1}))
    with pytest.raises(ConfigError, match="resolution"):
        load_config(config_path=bad)


def test_manifest_requires_exactly_one_input():
    RunManifest(scene="box.json", output="out", bindings=ORACLE)

    with pytest.raises(ValidationError):
        RunManifest(scene="box.json", image="seed.png", output="out", bindings=ORACLE)
    with pytest.raises(ValidationError):
        RunManifest(output="out", bindings=ORACLE)
    with pytest.raises(ValidationError):
        RunManifest(image="seed.png", output="out", bindings=ORACLE)
    with pytest.raises(ValidationError):
        RunManifest(scene="box.json", output="out", bindings={"depth": "oracle"})


# =====================================
# BACKENDS
# =====================================

def test_oracle_bindings_need_a_scene(box_spec):
    with pytest.raises(ConfigError):
        resolve_backends(PipelineConfig())

    backends, perceptual = resolve_backends(PipelineConfig(), box_spec)
    assert isinstance(backends.depth, OracleDepthEstimator)
    assert perceptual is None


def test_remote_bindings_resolve_urls(monkeypatch, box_spec):
    monkeypatch.delenv("EVOSCENE_COMPLETE_URL", raising=False)
    monkeypatch.setenv("EVOSCENE_DEPTH_URL", "http://depth:9000/")
    cfg = PipelineConfig(depth_backend="remote", complete_backend="remote:http://complete:9001")

    backends, _ = resolve_backends(cfg, box_spec)

    assert isinstance(backends.depth, RemoteDepthEstimator)
    assert backends.depth.client.base_url == "http://depth:9000"
    assert isinstance(backends.completer, RemoteSceneCompleter)
    assert backends.completer.client.base_url == "http://complete:9001"

    with pytest.raises(ConfigError, match="EVOSCENE_COMPLETE_URL"):
        resolve_backends(PipelineConfig(complete_backend="remote"), box_spec)


def test_perceptual_loss_is_bound_only_when_weighted(box_spec):
    cfg = PipelineConfig(lambda_lpips=0.2, loss_backend="remote:http://lpips:9002")

    _, perceptual = resolve_backends(cfg, box_spec)

    assert isinstance(perceptual, RemotePerceptualLoss)
    _, none = resolve_backends(PipelineConfig(loss_backend="remote:http://lpips:9002"), box_spec)
    assert none is None
