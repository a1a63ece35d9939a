import pytest

from osad.config import RunConfig, load_config, parse_config_text
from osad.errors import ConfigError


def test_desk_profile_defaults():
    cfg = load_config("desk")
    assert cfg.backbone_variant == "tiny-conv"
    assert cfg.image_size == 64 and cfg.mpt_bases == 8 and cfg.mpt_iterations == 3
    assert 2 <= cfg.queries <= 5


def test_full_profile():
    cfg = load_config("full")
    assert cfg.backbone_variant == "deep-residual-50"
    assert cfg.batch_size == 2 and cfg.queries == 5 and cfg.epochs == 35 and cfg.lr_decay_epoch == 15


def test_overrides_and_coercion():
    cfg = load_config("desk", {"mpt.bases": "4", "modules.dce": "false", "lr": "1e-3"})
    assert cfg.mpt_bases == 4 and cfg.modules_dce is False and cfg.lr == 1e-3


def test_text_round_trip(tmp_path):
    cfg = load_config("desk", {"seed": "9", "metrics.beta_squared": "0.3"})
    path = tmp_path / "run.cfg"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("key,value", [
    ("queries", "1"), ("epochs", "0"), ("optimizer", "sgd"), ("dce.similarity", "dot"),
    ("lr", "fast"), ("no.such.key", "1"), ("eval.threshold", "high"),
])
def test_invalid_settings(key, value):
    with pytest.raises(ConfigError):
        load_config("desk", {key: value})


def test_mpt_requires_apl():
    with pytest.raises(ConfigError):
        load_config("desk", {"modules.apl": "false"})
    cfg = load_config("desk", {"modules.apl": "false", "modules.mpt": "false"})
    assert not cfg.model_config().use_mpt


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent.cfg")


def test_parse_rejects_garbage():
    assert parse_config_text("# note\na = 1  # trailing\n\n") == {"a": "1"}
    with pytest.raises(ConfigError):
        parse_config_text("just words")
