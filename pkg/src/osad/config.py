"""Run configuration: a flat ``key = value`` text file with dotted keys.

Every key is overridable from the command line with ``--set key=value``.
Dots in keys map to underscores in :class:`RunConfig` attributes
(``mpt.bases`` -> ``mpt_bases``).
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from osad.backbone import BackboneConfig
from osad.errors import ConfigError
from osad.model import ModelConfig

PROFILES = ("desk", "full")


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "data/synthetic"
    folds: str | None = None  # defaults to <dataset>/folds
    out: str = "runs/default"
    fold: int = 1
    seed: int = 0

    image_size: int = 64
    queries: int = 3
    batch_size: int = 2

    backbone_variant: str = "tiny-conv"
    backbone_frozen_stages: int = 0
    backbone_widths: tuple[int, ...] = (16, 24, 32, 48)
    backbone_pretrained: bool = False
    model_channels: int = 32
    model_decoder_width: int = 16

    optimizer: str = "adam"
    lr: float = 2e-3
    lr_decay_epoch: int = 15
    lr_decay_factor: float = 0.5
    epochs: int = 20
    max_steps: int = 0  # 0: run all epochs
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0: only the last

    augment_flip: bool = True
    augment_crop: bool = True
    augment_crop_scale: float = 1.125  # 360 / 320

    mpt_bases: int = 8
    mpt_iterations: int = 3
    mpt_temperature: float = 1.0
    mpt_backprop_em: bool = False
    dce_similarity: str = "cosine"
    modules_apl: bool = True
    modules_mpt: bool = True
    modules_dce: bool = True

    eval_episodes_per_category: int = 5
    eval_threshold: str = "0.5"  # a float, "adaptive" or "best"
    eval_seed: int = 1234
    metrics_beta: float = 0.3
    metrics_beta_squared: float | None = None

    def __post_init__(self):
        if self.queries < 2:
            raise ConfigError("queries (N) must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.modules_mpt and not self.modules_apl:
            raise ConfigError("modules.mpt requires modules.apl")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.dce_similarity not in ("cosine", "embedded_gaussian"):
            raise ConfigError(f"unknown dce.similarity {self.dce_similarity!r}")
        if self.eval_threshold not in ("adaptive", "best"):
            try:
                float(self.eval_threshold)
            except ValueError:
                raise ConfigError("eval.threshold must be a number, 'adaptive' or 'best'") from None

    @property
    def folds_dir(self) -> Path:
        return Path(self.folds) if self.folds else Path(self.dataset) / "folds"

    @property
    def threshold(self):
        return self.eval_threshold if self.eval_threshold in ("adaptive", "best") else float(self.eval_threshold)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(variant=self.backbone_variant, frozen_stages=self.backbone_frozen_stages,
                              widths=self.backbone_widths, pretrained=self.backbone_pretrained)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=self.backbone_config(),
            channels=self.model_channels,
            decoder_width=self.model_decoder_width,
            bases=self.mpt_bases,
            iterations=self.mpt_iterations,
            temperature=self.mpt_temperature,
            backprop_em=self.mpt_backprop_em,
            similarity=self.dce_similarity,
            use_apl=self.modules_apl,
            use_mpt=self.modules_mpt,
            use_dce=self.modules_dce,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_settings(self, settings: dict[str, str]) -> "RunConfig":
        return self.replace(**{attr_name(k): coerce(attr_name(k), v) for k, v in settings.items()})

    def to_dict(self) -> dict:
        return {key_name(f.name): getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if value is None:
                text = "none"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        return cls().with_settings({k: v if isinstance(v, str) else _to_text(v) for k, v in obj.items()})


def _to_text(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_HINTS = typing.get_type_hints(RunConfig)


def attr_name(key: str) -> str:
    name = key.strip().replace(".", "_").replace("-", "_")
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return name


def key_name(attr: str) -> str:
    for prefix in ("backbone", "model", "augment", "mpt", "dce", "modules", "eval", "metrics"):
        if attr.startswith(prefix + "_"):
            return prefix + "." + attr[len(prefix) + 1:]
    return attr


def coerce(attr: str, text: str):
    hint = _HINTS[attr]
    text = text.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if typing.get_origin(hint) is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key_name(attr)}") from None


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_settings(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def profile_text(name: str) -> str:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")
    return resources.files("osad.resources").joinpath("configs", f"{name}.cfg").read_text()


def load_config(path=None, overrides=None) -> RunConfig:
    """Read ``path`` (a file, or a profile name such as ``desk``) and apply overrides."""
    settings: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if p.is_file():
            text = p.read_text()
        elif str(path) in PROFILES:
            text = profile_text(str(path))
        else:
            raise ConfigError(f"config file not found: {path}")
        settings.update(parse_config_text(text))
    settings.update(overrides or {})
    return RunConfig().with_settings(settings)
