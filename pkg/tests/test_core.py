import json

import numpy as np
import pytest
import torch
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from dcvae.config import (ConfigError, ExperimentConfig, apply_overrides, dump_config, from_dict, load_config,
                          save_config, validate)
from dcvae.model import init_parameters
from dcvae.rng import derive_rng
from dcvae.store import (CheckpointError, MetricsLog, RunManifest, load_checkpoint, save_checkpoint, write_table)

from conftest import tiny_config


def write_yaml(tmp_path, obj, name="c.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(obj))
    return path


# -- config ------------------------------------------------------------------------

def test_minimal_file_gets_defaults(tmp_path):
    cfg = load_config(write_yaml(tmp_path, {"mode": "dc_vae"}))
    assert cfg.queue_capacity == 8096
    assert cfg.embed_dim == 16
    assert cfg.learning_rate == 0.0002
    assert (cfg.adam_beta1, cfg.adam_beta2) == (0.0, 0.9)
    assert cfg.latent_dim == 128 and cfg.batch_size == 128
    assert cfg.weights == {"kl": 1.0, "instance": 1.0, "gan": 1.0, "pixel": 0.0, "feature": 0.0}


@pytest.mark.parametrize("mode,term", [
    ("vae", "gan"), ("vae", "instance"), ("vae_gan", "instance"), ("vae_contrastive", "gan"),
    ("vae_contrastive", "pixel"), ("dc_vae", "pixel"),
])
def test_forbidden_weight_names_field(tmp_path, mode, term):
    with pytest.raises(ConfigError) as err:
        load_config(write_yaml(tmp_path, {"mode": mode, "loss_weights": {term: 1.0}}))
    assert err.value.field == f"loss_weights.{term}"


def test_vae_requires_positive_pixel_weight():
    with pytest.raises(ConfigError) as err:
        from_dict({"mode": "vae", "loss_weights": {"pixel": 0.0}})
    assert err.value.field == "loss_weights.pixel"


def test_zero_forbidden_weight_is_accepted():
    cfg = from_dict({"mode": "vae", "loss_weights": {"gan": 0.0, "instance": 0}})
    assert cfg.weights["gan"] == 0.0


@pytest.mark.parametrize("raw,field", [
    ({"queue_capacity": 64, "batch_size": 128}, "queue_capacity"),
    ({"mode": "gan"}, "mode"),
    ({"latent_dim": 0}, "latent_dim"),
    ({"learning_rate": -1.0}, "learning_rate"),
    ({"contrast_taps": ["tap_mid"]}, "contrast_taps"),
    ({"bogus": 1}, "bogus"),
    ({"model": {"width": 3}}, "model.width"),
    ({"schema_version": 2}, "schema_version"),
    ({"eval_every": 15, "log_every": 10}, "eval_every"),
    ({"seed": 2**70}, "seed"),
])
def test_invalid_configs_name_their_field(raw, field):
    with pytest.raises(ConfigError) as err:
        from_dict(raw)
    assert err.value.field == field


def test_malformed_file_is_a_config_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("mode: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_round_trip_is_identity(tmp_path):
    cfg = load_config(write_yaml(tmp_path, {"mode": "vae_gan", "latent_dim": 32, "loss_weights": {"kl": 0.5}}))
    save_config(cfg, tmp_path / "out.yaml")
    again = load_config(tmp_path / "out.yaml")
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_overrides_beat_file_and_unknown_keys_fail(tmp_path):
    path = write_yaml(tmp_path, {"mode": "dc_vae", "latent_dim": 64})
    cfg = load_config(path, ["latent_dim=32", "loss_weights.kl=0.25", "eval.seed=7"])
    assert cfg.latent_dim == 32 and cfg.weights["kl"] == 0.25 and cfg.eval.seed == 7
    with pytest.raises(ConfigError) as err:
        load_config(path, ["loss_weights.klx=1"])
    assert err.value.field == "loss_weights.klx"
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_equals_sign"])


def test_mode_override_conflicting_with_file_weight(tmp_path):
    path = write_yaml(tmp_path, {"mode": "dc_vae", "loss_weights": {"gan": 1.0}})
    with pytest.raises(ConfigError) as err:
        load_config(path, ["mode=vae", "loss_weights.pixel=1.0"])
    assert err.value.field == "loss_weights.gan"


@settings(max_examples=60, deadline=None)
@given(mode=st.sampled_from(["vae", "vae_gan", "vae_contrastive", "dc_vae"]),
       weights=st.dictionaries(st.sampled_from(["kl", "instance", "gan", "pixel", "feature"]),
                               st.sampled_from([0.0, 0.5, 1.0]), max_size=5))
def test_validation_is_total(mode, weights):
    # every combination is accepted or rejected with a named field, never coerced
    raw = {"mode": mode, "loss_weights": dict(weights)}
    try:
        cfg = from_dict(raw)
    except ConfigError as err:
        assert err.field.startswith("loss_weights.")
        return
    for term, value in weights.items():
        assert cfg.weights[term] == value


def test_digest_depends_on_content():
    a, b = ExperimentConfig(), ExperimentConfig(seed=1)
    assert a.digest() == ExperimentConfig().digest()
    assert a.digest() != b.digest()


# -- rng ---------------------------------------------------------------------------

def test_rng_streams():
    a = derive_rng(42, "data").random(100)
    assert np.array_equal(a, derive_rng(42, "data").random(100))
    assert not np.array_equal(a, derive_rng(42, "init").random(100))
    assert not np.array_equal(derive_rng(42, "x").random(100), derive_rng(43, "x").random(100))


def test_rng_state_round_trip_and_torch_generator():
    r = derive_rng(5, "s")
    r.random(3)
    state = r.get_state()
    first = r.random(4)
    r.set_state(state)
    assert np.array_equal(first, r.random(4))
    g1, g2 = derive_rng(1, "t").torch_generator(), derive_rng(1, "t").torch_generator()
    assert torch.equal(torch.randn(5, generator=g1), torch.randn(5, generator=g2))


def test_rng_streams_look_independent():
    a = derive_rng(0, "a").random(20000)
    b = derive_rng(0, "b").random(20000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.03


# -- manifest, checkpoints, log ----------------------------------------------------

def test_manifest_written_once(tmp_path):
    m = RunManifest.create({"mode": "vae"}, "abc", 3)
    m.write(tmp_path / "manifest.json")
    with pytest.raises(FileExistsError):
        m.write(tmp_path / "manifest.json")
    assert RunManifest.read(tmp_path / "manifest.json") == m


def test_checkpoint_round_trip_exact(tmp_path):
    model = init_parameters(tiny_config())
    save_checkpoint({"iteration": 3, "model": model.state_dict()}, tmp_path / "c.pt")
    state = load_checkpoint(tmp_path / "c.pt")
    assert state["iteration"] == 3
    for k, v in model.state_dict().items():
        assert torch.equal(v, state["model"][k])


def test_checkpoint_shape_mismatch(tmp_path):
    big = init_parameters(tiny_config(latent_dim=16))
    small = init_parameters(tiny_config(latent_dim=8))
    save_checkpoint({"iteration": 0, "model": big.state_dict()}, tmp_path / "c.pt")
    expected = {k: list(v.shape) for k, v in small.state_dict().items()}
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(tmp_path / "c.pt", expected)


def test_truncated_checkpoint(tmp_path):
    model = init_parameters(tiny_config())
    save_checkpoint({"iteration": 0, "model": model.state_dict()}, tmp_path / "c.pt")
    blob = (tmp_path / "c.pt").read_bytes()
    (tmp_path / "t.pt").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")


def test_metrics_log(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl")
    for i in range(5):
        log.append({"iter": i, "losses": {"kl": torch.tensor(float(i))}, "x": float("nan")})
    assert [r["iter"] for r in log.read()] == list(range(5))
    assert log.read()[2]["losses"]["kl"] == 2.0 and log.read()[0]["x"] is None
    log.truncate_after(3)
    assert [r["iter"] for r in log.read()] == [0, 1, 2]
    json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])


def test_write_table_marks_missing(tmp_path):
    write_table(tmp_path / "t.tsv", ["a", "b"], [["x", None], ["y", 0.5]])
    assert (tmp_path / "t.tsv").read_text() == "a\tb\nx\tNA\ny\t0.5\n"


def test_validate_returns_resolved_weights():
    cfg = validate(ExperimentConfig(mode="vae_gan"))
    assert cfg.weights == {"kl": 1.0, "instance": 0.0, "gan": 1.0, "pixel": 0.0, "feature": 1.0}
