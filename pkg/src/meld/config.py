"""Declarative experiment configuration: TOML sections mapped onto the
module configs, with strict key checking and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .corpus import SynthSpec
from .dsp import MelConfig
from .errors import ConfigError
from .inference import GenerationConfig
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class CorpusConfig:
    n_utterances: int = 32


@dataclass(frozen=True)
class BpeConfig:
    target_vocab: int = 320


@dataclass(frozen=True)
class CodebookConfig:
    max_iters: int = 100
    tau: float = 1.0


@dataclass(frozen=True)
class EvalConfig:
    griffin_lim_iters: int = 32
    max_utterances: int = 0  # 0 = all


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0


# section name -> (dataclass, keys that are derived or come from [run] and may not be set)
SECTIONS = {
    "run": (RunConfig, ()),
    "synth": (SynthSpec, ()),
    "corpus": (CorpusConfig, ()),
    "mel": (MelConfig, ()),
    "bpe": (BpeConfig, ()),
    "codebook": (CodebookConfig, ()),
    "model": (ModelConfig, ("v_text", "d_mel_in")),
    "train": (TrainConfig, ("seed",)),
    "generation": (GenerationConfig, ("seed",)),
    "eval": (EvalConfig, ()),
}


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    bpe: BpeConfig = field(default_factory=BpeConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_config(self, v_text: int) -> ModelConfig:
        return dataclasses.replace(self.model, v_text=v_text, d_mel_in=self.mel.frame_dim).validate()

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def generation_config(self, **over) -> GenerationConfig:
        return dataclasses.replace(self.generation, seed=self.seed, **over)

    def validate(self) -> "ExperimentConfig":
        self.synth.validate()
        self.mel.validate()
        self.train_config().validate()
        self.generation.validate()
        dataclasses.replace(self.model, d_mel_in=self.mel.frame_dim).validate()
        if self.synth.sample_rate_hz != self.mel.sample_rate_hz:
            raise ConfigError("synth.sample_rate_hz must equal mel.sample_rate_hz")
        if self.bpe.target_vocab < 256:
            raise ConfigError("bpe.target_vocab must be >= 256")
        if self.corpus.n_utterances < 1:
            raise ConfigError("corpus.n_utterances must be >= 1")
        if self.codebook.tau <= 0 or self.codebook.max_iters < 1:
            raise ConfigError("codebook.tau must be > 0 and codebook.max_iters >= 1")
        return self


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(section: str, key: str, value, default):
    path = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected an array, got {value!r}")
        return tuple(value)
    return value


def from_dict(raw: dict) -> ExperimentConfig:
    parts = {}
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"{section}: unknown config section")
        if not isinstance(values, dict):
            raise ConfigError(f"{section}: expected a table")
        cls, forbidden = SECTIONS[section]
        defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in defaults:
                raise ConfigError(f"{section}.{key}: unknown key")
            if key in forbidden:
                raise ConfigError(f"{section}.{key}: derived value, set run.seed or the source section instead")
            kwargs[key] = _coerce(section, key, value, defaults[key])
        parts[section] = cls(**kwargs)
    return ExperimentConfig(**parts)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    path = key.strip().split(".")
    if len(path) != 2 or not all(path):
        raise ConfigError(f"override key {key!r} must be section.key")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return path, parsed


def load_config(path=None, overrides=(), env=None) -> ExperimentConfig:
    """Read TOML, apply ``section.key=value`` overrides, then ``MELD_SEED``."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"--config: file {path} not found") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"--config: {e}") from None
    for text in overrides:
        (section, key), value = parse_override(text)
        raw.setdefault(section, {})[key] = value
    env = os.environ if env is None else env
    if env.get("MELD_SEED") not in (None, ""):
        try:
            raw.setdefault("run", {})["seed"] = int(env["MELD_SEED"])
        except ValueError:
            raise ConfigError("MELD_SEED must be an integer") from None
    return from_dict(raw).validate()


def dump_toml(cfg: ExperimentConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        cls, forbidden = SECTIONS[section]
        lines.append(f"[{section}]")
        for k, v in values.items():
            if k not in forbidden:
                lines.append(f"{k} = {json.dumps(v)}")
        lines.append("")
    return "\n".join(lines)
