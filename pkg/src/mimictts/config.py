"""Run configuration: defaults, config-file parsing, flag overrides.

The config file is an INI-style document whose sections mirror module
names (dsp, vad, data, model, train, eval). Values from the file override
defaults; ``--set section.key=value`` flags override the file. Unknown
sections or keys are rejected, and the fully-resolved configuration is
echoed into every output directory.
"""

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import DspConfig, VadConfig
from .errors import ConfigError
from .train import TrainConfig


@dataclass
class DataConfig:
    window_s: float = 6.0
    overlap: float = 0.5
    min_window_fraction: float = 0.5
    held_out_speakers: str = "auto"  # "auto" | "none" | comma-separated ids

    def held_out_list(self):
        value = self.held_out_speakers.strip()
        if value == "auto":
            return None
        if value in ("", "none"):
            return []
        return [s.strip() for s in value.split(",") if s.strip()]


@dataclass
class ModelSettings:
    """Architecture knobs; corpus-derived fields (vocab size, speaker count,
    conditioning mode) are filled in when the model is built."""

    char_embed_dim: int = 128
    prenet_dim: int = 128
    encoder_dim: int = 128
    attention_dim: int = 128
    decoder_dim: int = 128
    embedding_dim: int = 128
    frames_per_step: int = 5
    max_decoder_steps: int = 200
    dropout: float = 0.5
    embedder_channels: int = 128
    embedder_kernel: int = 3
    embedder_strides: str = "1,1,2,2,2"
    embedder_dense_units: int = 128
    embedder_dense_layers: int = 2
    postnet_channels: int = 128
    postnet_kernel: int = 5
    postnet_layers: int = 2
    stop_threshold: float = 0.05
    stop_patience: int = 3
    dtype: str = "float32"

    def strides_tuple(self):
        try:
            return tuple(int(s) for s in self.embedder_strides.split(","))
        except ValueError:
            raise ConfigError(f"bad embedder_strides '{self.embedder_strides}'") from None


@dataclass
class EvalConfig:
    trials: int = 1000
    distance: str = "cosine"
    pca_components: int = 2
    seed: int = 123


@dataclass
class RunConfig:
    dsp: DspConfig = field(default_factory=DspConfig)
    vad: VadConfig = field(default_factory=VadConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sections(self):
        return {name: getattr(self, name) for name in ("dsp", "vad", "data", "model", "train", "eval")}


def _coerce(section, key, raw, current):
    kind = type(current)
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse '{raw}' as {kind.__name__}") from None


def _apply(cfg, section, key, raw):
    sections = cfg.sections()
    if section not in sections:
        raise ConfigError(f"unknown config section '{section}'")
    target = sections[section]
    if not hasattr(target, key):
        raise ConfigError(f"unknown config key '{key}' in section '{section}'")
    setattr(target, key, _coerce(section, key, raw, getattr(target, key)))


def load_config(path=None, overrides=()):
    """Defaults, then the config file, then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got '{item}'")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply(cfg, section.strip(), key.strip(), raw.strip())
    # re-run validation on dataclasses with __post_init__ checks
    cfg.train = TrainConfig(**dataclasses.asdict(cfg.train))
    return cfg


def write_effective_config(cfg, out_dir, name="effective_config.ini"):
    """Echo the fully-resolved configuration into an output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for section, obj in cfg.sections().items():
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
        lines.append("")
    path = out_dir / name
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def model_config_from(cfg, vocab_size, n_speakers, conditioning_mode, n_mels, n_linear_bins):
    """Materialize the full model configuration from settings + corpus facts
    (feature dimensions come from the DSP config the corpus was built with)."""
    from .model import ModelConfig

    s = cfg.model
    return ModelConfig(
        vocab_size=vocab_size,
        n_speakers=n_speakers,
        conditioning_mode=conditioning_mode,
        char_embed_dim=s.char_embed_dim,
        prenet_dim=s.prenet_dim,
        encoder_dim=s.encoder_dim,
        attention_dim=s.attention_dim,
        decoder_dim=s.decoder_dim,
        embedding_dim=s.embedding_dim,
        frames_per_step=s.frames_per_step,
        n_mels=n_mels,
        n_linear_bins=n_linear_bins,
        max_decoder_steps=s.max_decoder_steps,
        dropout=s.dropout,
        embedder_channels=s.embedder_channels,
        embedder_kernel=s.embedder_kernel,
        embedder_strides=s.strides_tuple(),
        embedder_dense_units=s.embedder_dense_units,
        embedder_dense_layers=s.embedder_dense_layers,
        postnet_channels=s.postnet_channels,
        postnet_kernel=s.postnet_kernel,
        postnet_layers=s.postnet_layers,
        stop_threshold=s.stop_threshold,
        stop_patience=s.stop_patience,
        dtype=s.dtype,
    )
