"""Layered run configuration: defaults < config file < overrides.

The file format is INI-style, one section per stage::

    [features]
    n_fft = 1024
    [pretrain]
    epochs = 100
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .features import FeatureConfig
from .training import FinetuneConfig, PretrainConfig

CONFIG_ENV = "CLPSCF_CONFIG"


@dataclass(frozen=True)
class ModelSection:
    backbone_variant: str = "stgram_mfn"
    embed_dim: int = 128
    projector_hidden: int = 0  # 0: backbone feature width
    latent_dim: int = 128


@dataclass(frozen=True)
class EvalSection:
    p: float = 0.1
    score_with_margin: bool = False
    tsne_perplexity: float = 30.0


@dataclass(frozen=True)
class DataSection:
    root: str = ""
    clip_seconds: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return apply_overrides(cls(), {(s, k): v for s, sec in data.items() for k, v in sec.items()})

    def resolved(self) -> dict:
        """Config plus derived quantities worth reading at a glance."""
        out = self.to_dict()
        out["derived"] = {"config_hash": self.hash}
        return out

    def with_updates(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **{
            name: dataclasses.replace(getattr(self, name), **kv) for name, kv in sections.items()})


def _coerce(value, current, section, key):
    typ = type(current)
    if isinstance(value, str):
        if typ is bool:
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(f"[{section}] {key}: expected a boolean, got {value!r}")
            return low in ("1", "true", "yes", "on")
        try:
            return typ(value)
        except ValueError:
            raise ValueError(f"[{section}] {key}: cannot parse {value!r} as {typ.__name__}") from None
    if typ is float and isinstance(value, int):
        return float(value)
    return value


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """``overrides`` maps ``(section, key)`` to a value (strings are parsed)."""
    updates: dict[str, dict] = {}
    for (section, key), value in overrides.items():
        if section not in {f.name for f in dataclasses.fields(RunConfig)}:
            raise ValueError(f"unknown config section [{section}]")
        sec = getattr(cfg, section)
        if key not in {f.name for f in dataclasses.fields(sec)}:
            raise ValueError(f"unknown config key [{section}] {key}")
        updates.setdefault(section, {})[key] = _coerce(value, getattr(sec, key), section, key)
    return cfg.with_updates(**updates)


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path) as fh:
        parser.read_file(fh)
    return {(s, k): v for s in parser.sections() for k, v in parser.items(s)}


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (or $CLPSCF_CONFIG), then overrides."""
    cfg = RunConfig()
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        cfg = apply_overrides(cfg, read_config_file(path))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def write_config_file(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    for section, values in cfg.to_dict().items():
        parser[section] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)
