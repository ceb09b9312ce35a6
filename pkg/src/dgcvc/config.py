"""Run configuration: an INI file with one section per subsystem.

Unknown sections or keys are rejected. ``RunConfig.hash`` is a short digest
of the canonical serialisation and is stamped into every artifact.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .features import FeatureConfig
from .speaker_encoder import check_variant


@dataclass(frozen=True)
class ASVConfig:
    hidden: int = 256
    layers: int = 3
    w_init: float = 10.0
    b_init: float = -5.0
    speakers_per_batch: int = 4
    utterances_per_speaker: int = 4
    window: int = 160
    dvector_window: int = 160
    steps: int = 500
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0
    # max sigma (mel bins) of random spectral smoothing during pretraining; 0 disables
    blur_augment: float = 0.0


@dataclass(frozen=True)
class SpeakerEncoderConfig:
    variant: str = "dgc"
    conv_channels: tuple = (32, 64, 128)
    gru_hidden: int = 256
    n_tokens: int = 10
    heads: int = 4
    token_dim: int = 256
    token_std: float = 0.5


@dataclass(frozen=True)
class ConversionConfig:
    dim_neck: int = 32
    freq: int = 32
    segment: int = 160
    enc_channels: int = 512
    dec_pre_lstm: int = 512
    dec_channels: int = 512
    dec_lstm: int = 1024
    dec_lstm_layers: int = 3
    postnet_channels: int = 512


@dataclass(frozen=True)
class TrainingConfig:
    lambda_rec: float = 1.0
    lambda_class: float = 0.5
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 10


@dataclass(frozen=True)
class PathsConfig:
    corpus: str = ""
    # optional larger corpus for speaker-verification pretraining
    asv_corpus: str = ""
    out_dir: str = "runs"
    n_train_speakers: int = 4
    split_seed: int = 0


_SECTIONS = {
    "features": FeatureConfig,
    "asv": ASVConfig,
    "speaker_encoder": SpeakerEncoderConfig,
    "conversion": ConversionConfig,
    "training": TrainingConfig,
    "paths": PathsConfig,
}

# sections whose values decide tensor shapes; a checkpoint must agree on these
ARCHITECTURE_SECTIONS = ("asv", "speaker_encoder", "conversion")
_NON_ARCH_KEYS = {"asv": {"speakers_per_batch", "utterances_per_speaker", "window", "steps",
                          "lr", "seed", "checkpoint_every", "dvector_window", "w_init", "b_init",
                          "blur_augment"},
                  "speaker_encoder": {"token_std"}}


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    asv: ASVConfig = field(default_factory=ASVConfig)
    speaker_encoder: SpeakerEncoderConfig = field(default_factory=SpeakerEncoderConfig)
    conversion: ConversionConfig = field(default_factory=ConversionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        validate(self)

    @property
    def variant(self) -> str:
        return self.speaker_encoder.variant

    @property
    def effective_lambda_class(self) -> float:
        return self.training.lambda_class if self.variant == "dgc" else 0.0

    def replace(self, **sections) -> "RunConfig":
        """``cfg.replace(training={"steps": 10})`` -> new validated config."""
        kw = {}
        for name, values in sections.items():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section {name!r}")
            kw[name] = dataclasses.replace(getattr(self, name), **values)
        return dataclasses.replace(self, **kw)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name in _SECTIONS:
            sec = getattr(self, name)
            parser[name] = {f.name: _format(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def architecture(self) -> dict:
        out = {}
        for name in ARCHITECTURE_SECTIONS:
            skip = _NON_ARCH_KEYS.get(name, set())
            sec = getattr(self, name)
            out[name] = {f.name: getattr(sec, f.name) for f in dataclasses.fields(sec) if f.name not in skip}
        out["features"] = {"n_mels": self.features.n_mels}
        return out

    @classmethod
    def toy(cls) -> "RunConfig":
        """Narrow widths for single-CPU desk runs; every fixed dimension is unchanged."""
        return cls(
            asv=ASVConfig(hidden=96, window=80),
            speaker_encoder=SpeakerEncoderConfig(conv_channels=(8, 16, 32), gru_hidden=128),
            conversion=ConversionConfig(enc_channels=64, dec_pre_lstm=64, dec_channels=64,
                                        dec_lstm=96, postnet_channels=64),
            training=TrainingConfig(lr=1e-3),
        )


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r}: {exc}") from None
    return raw.strip()


def validate(cfg: RunConfig) -> None:
    check_variant(cfg.speaker_encoder.variant)
    t = cfg.training
    if t.lambda_rec < 0 or t.lambda_class < 0:
        raise ConfigError("loss weights must be non-negative")
    if t.batch_size < 1 or t.steps < 0:
        raise ConfigError("batch_size must be >= 1 and steps >= 0")
    c = cfg.conversion
    if c.segment % c.freq:
        raise ConfigError(f"segment length {c.segment} must be a multiple of freq {c.freq}")
    s = cfg.speaker_encoder
    if s.token_dim % s.heads or 256 % s.heads:
        raise ConfigError(f"heads={s.heads} must divide token_dim={s.token_dim} and 256")
    if s.n_tokens < 1 or not s.conv_channels:
        raise ConfigError("need >= 1 token and >= 1 reference conv layer")
    if cfg.features.n_mels != 80:
        raise ConfigError("the model is built for 80 mel channels")
    if cfg.asv.speakers_per_batch < 2 or cfg.asv.utterances_per_speaker < 2:
        raise ConfigError("GE2E batches need >= 2 speakers x >= 2 utterances")
    if cfg.asv.blur_augment < 0:
        raise ConfigError("blur_augment must be non-negative")


def from_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    base = base or RunConfig()
    updates = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        sec = getattr(base, name)
        known = {f.name: getattr(sec, f.name) for f in dataclasses.fields(sec)}
        vals = {}
        for key, raw in parser[name].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{name}]")
            vals[key] = _parse(raw, known[key])
        updates[name] = vals
    return base.replace(**updates) if updates else base


def load_config(path) -> RunConfig:
    """Read an INI file. A ``[preset] name = toy`` header selects the toy base."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser()
    parser.read_string(text)
    base = RunConfig()
    if parser.has_section("preset"):
        name = parser["preset"].get("name", "default")
        extra = set(parser["preset"]) - {"name"}
        if extra:
            raise ConfigError(f"unknown key(s) {sorted(extra)} in section [preset]")
        if name == "toy":
            base = RunConfig.toy()
        elif name != "default":
            raise ConfigError(f"unknown preset {name!r}")
        parser.remove_section("preset")
        buf = io.StringIO()
        parser.write(buf)
        text = buf.getvalue()
    return from_ini(text, base)
