"""Global JSON configuration with profile defaults and dotted overrides.

A config file holds any subset of the sections below; missing keys take
the profile's defaults. ``--set section.key=value`` flags are applied on
top (values parse as JSON, falling back to plain strings).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigError
from .models import ModelConfig
from .objectives import LossParams
from .preprocess import PreprocessConfig, desk_config, paper_config
from .trainer import SplitConfig, TrainConfig

PROFILES = ("desk", "paper")
DESK_MAX_EPOCHS = 120


@dataclass
class SynthConfig:
    n: int = 200
    positive_fraction: float = 0.3
    pretext_n: int = 120

    def validate(self, prefix="synth"):
        if int(self.n) < 2:
            raise ConfigError(f"{prefix}.n", "must be >= 2")
        if not 0 < self.positive_fraction < 1:
            raise ConfigError(f"{prefix}.positive_fraction", "must lie in (0, 1)")
        if int(self.pretext_n) < 2:
            raise ConfigError(f"{prefix}.pretext_n", "must be >= 2")


@dataclass
class PretrainConfig:
    epochs: int = 30

    def validate(self, prefix="pretrain"):
        if not 1 <= int(self.epochs) <= 500:
            raise ConfigError(f"{prefix}.epochs", "must lie in [1, 500]")


@dataclass
class ExplainConfig:
    layer: str = None
    slice_stride: int = 8

    def validate(self, prefix="explain"):
        if int(self.slice_stride) < 1:
            raise ConfigError(f"{prefix}.slice_stride", "must be >= 1")


@dataclass
class PathsConfig:
    data_dir: str = None
    pretext_dir: str = None
    work_dir: str = None
    report_dir: str = None


@dataclass
class GlobalConfig:
    profile: str = "desk"
    preprocess: PreprocessConfig = field(default_factory=desk_config)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        if self.profile not in PROFILES:
            raise ConfigError("profile", f"must be one of {PROFILES}")
        self.preprocess.validate("preprocess")
        self.augment.validate("augment")
        self.model.validate("model")
        self.train.validate("train")
        self.split.validate("split")
        self.synth.validate("synth")
        self.pretrain.validate("pretrain")
        self.explain.validate("explain")
        if tuple(self.model.input_shape) != tuple(self.preprocess.target_shape):
            raise ConfigError(
                "model.input_shape",
                f"{tuple(self.model.input_shape)} must equal preprocess.target_shape "
                f"{tuple(self.preprocess.target_shape)}",
            )
        if not self.train.seeds:
            raise ConfigError("train.seeds", "need at least one seed")
        return self

    def to_dict(self):
        d = {"profile": self.profile}
        d["preprocess"] = self.preprocess.to_dict()
        d["augment"] = self.augment.to_dict()
        d["model"] = self.model.to_dict()
        t = self.train.to_dict()
        t.pop("augment", None)
        d["train"] = t
        for name in ("split", "synth", "pretrain", "explain", "paths"):
            d[name] = asdict(getattr(self, name))
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {
    "split": SplitConfig,
    "synth": SynthConfig,
    "pretrain": PretrainConfig,
    "explain": ExplainConfig,
    "paths": PathsConfig,
}


def _check_keys(section, data, allowed):
    if not isinstance(data, dict):
        raise ConfigError(section, "must be a JSON object")
    for k in data:
        if k not in allowed:
            raise ConfigError(f"{section}.{k}", "unknown field")


def _names(cls):
    return {f.name for f in fields(cls)}


def _build(cls, section, base: dict, data: dict):
    _check_keys(section, data, _names(cls))
    try:
        return cls(**{**base, **data})
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def profile_defaults(profile: str) -> dict:
    if profile not in PROFILES:
        raise ConfigError("profile", f"must be one of {PROFILES}")
    pre = desk_config() if profile == "desk" else paper_config()
    cfg = GlobalConfig(profile=profile, preprocess=pre,
                       model=ModelConfig(input_shape=tuple(pre.target_shape)))
    if profile == "desk":
        # 32³ phantoms converge long before 500 epochs; keeps a run near 20 CPU minutes
        cfg.train.max_epochs = DESK_MAX_EPOCHS
    return cfg.to_dict()


def _merge(base, over, path=""):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def from_dict(data: dict, profile: str = None) -> GlobalConfig:
    """Build and validate a config; ``profile`` (if given) beats the file's."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    _check_keys("<root>", data, _names(GlobalConfig))
    profile = profile or data.get("profile", "desk")
    d = _merge(profile_defaults(profile), {k: v for k, v in data.items() if k != "profile"})
    # the model grid follows the preprocess grid unless set explicitly
    if "input_shape" not in data.get("model", {}):
        d["model"]["input_shape"] = d["preprocess"]["target_shape"]

    _check_keys("preprocess", d["preprocess"], _names(PreprocessConfig))
    pre = _build(PreprocessConfig, "preprocess", {}, d["preprocess"])
    aug = _build(AugmentConfig, "augment", {}, d["augment"])

    m = dict(d["model"])
    _check_keys("model", m, _names(ModelConfig))
    _check_keys("model.dense", m.get("dense", {}), {"growth_rate", "block_layers"})
    _check_keys("model.res", m.get("res", {}), {"block_channels"})
    try:
        model = ModelConfig.from_dict(m)
    except (TypeError, ValueError) as exc:
        raise ConfigError("model", str(exc)) from None

    t = dict(d["train"])
    _check_keys("train", t, _names(TrainConfig) - {"augment"})
    lp = t.pop("loss_params", {})
    _check_keys("train.loss_params", lp, _names(LossParams))
    loss_params = _build(LossParams, "train.loss_params", {}, lp)
    train = _build(TrainConfig, "train", {}, {**t, "loss_params": loss_params, "augment": aug})
    train.seeds = [int(s) for s in train.seeds]
    loss_params.validate("train.loss_params")

    sections = {name: _build(cls, name, {}, d[name]) for name, cls in _SECTIONS.items()}
    cfg = GlobalConfig(profile=profile, preprocess=pre, augment=aug, model=model, train=train, **sections)
    return cfg.validate()


def parse_override(text: str):
    """``a.b.c=value`` -> (["a", "b", "c"], parsed value)."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(text, "empty override key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts, value


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data))
    for text in overrides or ():
        parts, value = parse_override(text)
        node = data
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(".".join(parts), "cannot descend into a non-object")
            node = nxt
        node[parts[-1]] = value
    return data


def load_config(path=None, profile=None, overrides=None) -> GlobalConfig:
    data = {}
    if path is not None:
        p = Path(path)
        text = p.read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return from_dict(apply_overrides(data, overrides), profile)
