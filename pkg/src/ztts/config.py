"""Pipeline configuration: one dataclass tree, YAML round-trip, dotted
overrides, and the generic dict-to-dataclass builder the checkpoint
loaders share."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .adversary import DiscriminatorBankConfig
from .errors import VersionError
from .flow_acoustic import FlowConfig, TextEncoderConfig
from .signal_core import DEFAULT_STFT_LOSS_CONFIGS, SpectralConfig
from .trainer import AcousticTrainerConfig, LossWeights, WaveGANTrainerConfig
from .wavegan import DecoderConfig, EncoderConfig, PitchPredictorConfig

CONFIG_SCHEMA_VERSION = 1


def _convert(tp, value):
    if value is None:
        return None
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        for arg in typing.get_args(tp):
            if arg is type(None):
                continue
            return _convert(arg, value)
        return value
    if is_dataclass(tp):
        return dataclass_from_dict(tp, value)
    if origin in (tuple, list):
        args = typing.get_args(tp)
        if origin is tuple and len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v) for v in value)
        if origin is tuple and args:
            return tuple(_convert(a, v) for a, v in zip(args, value))
        if origin is list and args:
            return [_convert(args[0], v) for v in value]
        return origin(value)
    if tp in (int, float, bool, str):
        return tp(value)
    return value


def dataclass_from_dict(cls, data):
    """Recursively build a (possibly nested) dataclass from plain mappings."""
    if data is None:
        return None
    if isinstance(data, cls):
        return data
    hints = typing.get_type_hints(cls)
    kwargs = {}
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    for f in fields(cls):
        if f.name in data:
            kwargs[f.name] = _convert(hints[f.name], data[f.name])
    return cls(**kwargs)


@dataclass(frozen=True)
class TextModelConfig:
    """Text-encoder hyperparameters; vocabulary size is bound at build time."""

    hidden_channels: int = 192
    n_layers: int = 4
    kernel_size: int = 5


@dataclass
class PipelineConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    seed: int = 1234
    sample_rate: int = 24000
    num_threads: int = 1
    peak_level: float = 0.95
    manifest: str = "manifest.txt"
    workdir: str = "runs"
    tokenizer: str = "grapheme"
    vocab_file: str | None = None
    temperature: float = 0.667
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    pitch_predictor: PitchPredictorConfig = field(default_factory=PitchPredictorConfig)
    bank: DiscriminatorBankConfig = field(default_factory=DiscriminatorBankConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    text: TextModelConfig = field(default_factory=TextModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    stft_loss: tuple[SpectralConfig, ...] = DEFAULT_STFT_LOSS_CONFIGS
    wavegan_trainer: WaveGANTrainerConfig = field(default_factory=WaveGANTrainerConfig)
    acoustic_trainer: AcousticTrainerConfig = field(default_factory=AcousticTrainerConfig)

    # derived layout under the working directory
    @property
    def dataset_dir(self) -> Path:
        return Path(self.workdir) / "dataset"

    @property
    def wavegan_dir(self) -> Path:
        return Path(self.workdir) / "wavegan"

    @property
    def latents_dir(self) -> Path:
        return Path(self.workdir) / "latents"

    @property
    def acoustic_dir(self) -> Path:
        return Path(self.workdir) / "acoustic"

    @property
    def synth_dir(self) -> Path:
        return Path(self.workdir) / "synth"

    @property
    def eval_dir(self) -> Path:
        return Path(self.workdir) / "eval"

    def text_encoder_config(self, vocab_size: int) -> TextEncoderConfig:
        return TextEncoderConfig(
            vocab_size=vocab_size,
            latent_dim=self.encoder.latent_dim,
            hidden_channels=self.text.hidden_channels,
            n_layers=self.text.n_layers,
            kernel_size=self.text.kernel_size,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise OSError(f"config file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise VersionError(
            f"config schema_version {version} unsupported (expected {CONFIG_SCHEMA_VERSION})"
        )
    return dataclass_from_dict(PipelineConfig, data)


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def apply_override(cfg, dotted: str, raw_value: str):
    """Set ``a.b.c=value`` on a config tree, returning the updated copy."""
    parts = dotted.split(".")
    value = yaml.safe_load(raw_value)

    def rec(obj, parts):
        name = parts[0]
        hints = typing.get_type_hints(type(obj))
        if name not in hints:
            raise ValueError(f"unknown config field {dotted!r} (no {name!r} on {type(obj).__name__})")
        if len(parts) == 1:
            return dataclasses.replace(obj, **{name: _convert(hints[name], value)})
        child = rec(getattr(obj, name), parts[1:])
        return dataclasses.replace(obj, **{name: child})

    return rec(cfg, parts)
