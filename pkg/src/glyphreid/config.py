"""Declarative run configuration: one TOML file with sections per module
(corpus / model / train / eval), plus dotted-key command-line overrides.
"""

from __future__ import annotations

import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .corpus import Corpus, CorpusSpec
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    shortlist_k: int = 128
    split: str = "test"
    use_raw_cls: bool = False


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def echo(self) -> dict:
        from dataclasses import asdict

        return {
            "corpus": asdict(self.corpus),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
        }


_SECTIONS = {
    "corpus": CorpusSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _build_section(cls, values: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
        )
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"bad [{section}] section: {e}") from e


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Read the TOML file (optional) and apply KEY=VALUE overrides, where
    KEY is section.field (e.g. train.p_w=0.2). Values parse as JSON with a
    bare-string fallback."""
    data: dict = {}
    if path is not None:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

    merged = {name: dict(data.get(name, {})) for name in _SECTIONS}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        key, raw = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key must be section.field: {key!r}")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section in override: {section!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        merged[section][name] = value

    cfg = RunConfig(
        **{name: _build_section(cls, merged[name], name) for name, cls in _SECTIONS.items()}
    )
    cfg.corpus.validate()
    cfg.train.validate()
    return cfg


def model_config_for_corpus(model_cfg: ModelConfig, corpus: Corpus) -> ModelConfig:
    """Pin the geometry-and-vocabulary fields to what the corpus dictates."""
    spec = corpus.spec
    return replace(
        model_cfg,
        vocab_size=len(corpus.vocab),
        max_len=spec.max_len,
        image_side=spec.image_side,
        patch_side=spec.patch_side,
    )
