import json
from pathlib import Path

import pytest

from config import (ExperimentConfig, RotationConfig, apply_overrides, canonical_json, config_hash, load_config,
                    parse_config, save_config)
from dataio import EventType
from detectors import DetectorKind
from errors import ConfigurationError
from resampling import SamplingStrategy


def test_save_then_load_round_trip(tmp_path, small_config_factory):
    config = small_config_factory(sampling="combine")
    loaded = load_config(save_config(config, tmp_path / "nested" / "experiment.json"))
    assert loaded == config
    assert config_hash(loaded) == config_hash(config)


def test_saved_file_uses_lambda_key(tmp_path):
    data = json.loads(save_config(ExperimentConfig(), tmp_path / "c.json").read_text())
    assert data["transfer"]["lambda"] == 1.0
    assert "lam" not in data["transfer"]


def test_defaults():
    config = ExperimentConfig()
    assert config.data.synth is not None
    assert config.ground_truth_as_evidence
    assert config.sampling is SamplingStrategy.UNDERSAMPLE
    assert config.detector.kind is DetectorKind.KMEANS
    assert config.transfer.lam == 1.0


def test_hash_tracks_every_field(small_config_factory):
    base = small_config_factory()
    assert config_hash(base) == config_hash(small_config_factory())
    changed = [
        small_config_factory(seed=4),
        small_config_factory(sampling="oversample"),
        apply_overrides(base, lam=0.5),
        apply_overrides(base, detector="agglo"),
    ]
    hashes = {config_hash(c) for c in changed}
    assert config_hash(base) not in hashes
    assert len(hashes) == len(changed)


def test_canonical_json_is_key_sorted():
    text = canonical_json(ExperimentConfig())
    data = json.loads(text)
    assert list(data) == sorted(data)
    assert ": " not in text


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "absent.json")


def test_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"seed": 1,\n "name": }')
    with pytest.raises(ConfigurationError, match="line 2"):
        load_config(path)


@pytest.mark.parametrize("data", [
    {"seed": -1},
    {"sampling": "bogus"},
    {"unknown_key": 1},
    {"data": {"features": "x.evtf", "catalog": "c.csv", "synth": {}}},
    {"data": {"features": "x.evtf"}},
    {"data": {}},
    {"ground_truth_as_evidence": False},
    {"transfer": {"lambda": -0.1}},
    {"detector": {"kind": "ocsvm", "nu": 2.0}},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigurationError):
        parse_config(data)


def test_rotation_section():
    config = parse_config({
        "ground_truth_as_evidence": False,
        "rotation": {"ground_truth_type": "windstorm", "evidence_types": ["flood"],
                     "detector_overrides": {"windstorm->flood": "agglo"}},
    })
    assert config.rotation.ground_truth_type is EventType.WINDSTORM
    assert config.rotation.detector_overrides == {"windstorm->flood": DetectorKind.AGGLOMERATIVE}
    assert RotationConfig().nonsevere_sample_target == 500


def test_file_data_source(tmp_path):
    config = parse_config({"data": {"features": str(tmp_path / "x.evtf"), "catalog": str(tmp_path / "c.csv")}})
    assert config.data.synth is None
    assert config.data.features == tmp_path / "x.evtf"


def test_apply_overrides(tmp_path, small_config_factory):
    base = small_config_factory()
    out = apply_overrides(base, seed=9, output_dir=tmp_path / "o", detector="ocsvm", lam=0.0, skip_screening=True)
    assert out.seed == 9
    assert out.output_dir == tmp_path / "o"
    assert out.detector.kind is DetectorKind.OCSVM
    assert out.transfer.lam == 0.0
    assert not out.transfer.screening
    assert base.seed == 3 and base.transfer.screening
    assert apply_overrides(base) == base
    with pytest.raises(ConfigurationError):
        apply_overrides(base, lam=-1.0)


@pytest.mark.parametrize("name", ["experiment-synth.json", "rotation.json"])
def test_reference_configs_validate(name):
    path = Path(__file__).resolve().parent.parent / "references" / name
    config = load_config(path)
    assert config.transfer.lam == 1.0
    if config.rotation is None:
        assert config.data.synth is not None and config.ground_truth_as_evidence
    else:
        assert config.rotation.detector_overrides == {"windstorm->tornado": DetectorKind.AGGLOMERATIVE}
