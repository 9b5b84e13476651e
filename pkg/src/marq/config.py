"""Pipeline configuration: TOML loading, defaults and named presets.

A config file is a TOML document with optional sections ``audio``,
``features.<name>``, ``pipeline``, ``quantizer``, ``masking``, ``encoder``,
``train`` and ``probes.<task>``. A top-level ``preset = "<name>"`` starts
from one of :data:`PRESETS` before applying the file's values. Unknown keys
are rejected.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

from .features import CqtConfig, MelConfig, PatchConfig, as_rate
from .pretrain import MaskConfig, TrainConfig, TrainingError
from .quantizers import FsqConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class EncSection:
    """Externally computed features (e.g. codec latents) read from a MARQFC01 cache."""

    cache: str = ""
    dims: int = 128


@dataclass
class PipelineSection:
    input: str = "mel"
    targets: list = field(default_factory=lambda: ["mel"])
    frame_rate: str = "15.625"

    @property
    def rate(self) -> Fraction:
        return as_rate(self.frame_rate)


@dataclass
class QuantizerSection:
    kind: str = "rq"
    codebooks_per_target: int = 1
    num_codewords: int = 8192
    proj_dims: int = 16
    normalize: str = "frame_l2"
    fsq_channels: int = 5
    fsq_levels: int = 6

    def __post_init__(self):
        if self.kind not in ("rq", "fsq"):
            raise ConfigError(f"quantizer kind must be rq or fsq, got {self.kind!r}")
        if self.normalize not in ("frame_l2", "global", "none"):
            raise ConfigError(f"unknown quantizer normalization {self.normalize!r}")

    @property
    def fsq(self) -> FsqConfig | None:
        return FsqConfig(self.fsq_channels, self.fsq_levels) if self.kind == "fsq" else None


@dataclass
class EncoderSection:
    layers: int = 2
    model_dims: int = 64
    heads: int = 4
    conv_kernel: int = 15
    ffn_expansion: float = 4.0
    dropout: float = 0.2
    deepnorm_alpha: float = 2.632
    deepnorm_beta: float = 0.022
    init_std: float = 0.02
    zero_init_heads: bool = False


@dataclass
class ProbeSection:
    kind: str = "track_multiclass"
    label_kind: str = "tags"
    hidden_units: int = 512
    layer_index: int = -1
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    threshold: float = 0.5
    min_gap: float = 0.3
    tolerance: float = 0.07


@dataclass
class AudioSection:
    sample_rate: int = 16000


_FEATURE_TYPES = {"mel": MelConfig, "cqt": CqtConfig, "audio": PatchConfig, "enc": EncSection}


@dataclass
class PipelineConfig:
    preset: str = "base"
    audio: AudioSection = field(default_factory=AudioSection)
    features: dict = field(default_factory=lambda: {k: t() for k, t in _FEATURE_TYPES.items()})
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    quantizer: QuantizerSection = field(default_factory=QuantizerSection)
    masking: MaskConfig = field(default_factory=MaskConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    probes: dict = field(default_factory=dict)

    @property
    def feature_names(self) -> list[str]:
        """Features to extract: the encoder input plus every target, in first-use order."""
        return list(dict.fromkeys([self.pipeline.input, *self.pipeline.targets]))

    @property
    def head_features(self) -> list[str]:
        return [t for t in self.pipeline.targets for _ in range(self.quantizer.codebooks_per_target)]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["features"] = {k: asdict(v) for k, v in self.features.items()}
        out["probes"] = {k: asdict(v) for k, v in self.probes.items()}
        return out


# Tokenizer / masking / rate settings of the five published variants. Encoder
# and training sizes stay at desk defaults.
PRESETS: dict[str, dict] = {
    "base": {
        "pipeline": {"input": "mel", "targets": ["mel"], "frame_rate": "15.625"},
        "quantizer": {"kind": "rq", "codebooks_per_target": 1, "num_codewords": 8192, "proj_dims": 16},
    },
    "multi-codebook": {
        "pipeline": {"input": "mel", "targets": ["mel"], "frame_rate": "15.625"},
        "quantizer": {"kind": "rq", "codebooks_per_target": 4, "num_codewords": 8192, "proj_dims": 16},
    },
    "multi-feature": {
        "pipeline": {"input": "audio", "targets": ["enc", "mel", "cqt", "audio"], "frame_rate": "18.75"},
        "quantizer": {"kind": "rq", "codebooks_per_target": 1, "num_codewords": 8192, "proj_dims": 16},
        "features": {"audio": {"patch_len": 1024, "hop": 640}},
    },
    "high-rate": {
        "pipeline": {"input": "audio", "targets": ["enc", "mel", "cqt", "audio"], "frame_rate": "25"},
        "quantizer": {"kind": "rq", "codebooks_per_target": 1, "num_codewords": 8192, "proj_dims": 16},
        "features": {"audio": {"patch_len": 1024, "hop": 640}},
    },
    "high-rate-fsq": {
        "pipeline": {"input": "audio", "targets": ["enc", "mel", "cqt", "audio"], "frame_rate": "25"},
        "quantizer": {"kind": "fsq", "codebooks_per_target": 1, "fsq_channels": 5, "fsq_levels": 6},
        "features": {"audio": {"patch_len": 1024, "hop": 640}},
    },
}

_SECTION_TYPES = {
    "audio": AudioSection,
    "pipeline": PipelineSection,
    "quantizer": QuantizerSection,
    "masking": MaskConfig,
    "encoder": EncoderSection,
    "train": TrainConfig,
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError, TrainingError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def from_dict(raw: dict, preset: str | None = None) -> PipelineConfig:
    raw = dict(raw)
    name = preset or raw.pop("preset", None) or "base"
    raw.pop("preset", None)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    merged = _merge(PRESETS[name], raw)
    unknown = set(merged) - set(_SECTION_TYPES) - {"features", "probes"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    cfg = PipelineConfig(preset=name)
    for key, cls in _SECTION_TYPES.items():
        if key in merged:
            setattr(cfg, key, _build(cls, merged[key], key))
    for fname, values in merged.get("features", {}).items():
        if fname not in _FEATURE_TYPES:
            raise ConfigError(f"unknown feature section [features.{fname}]")
        cfg.features[fname] = _build(_FEATURE_TYPES[fname], values, f"features.{fname}")
    for task, values in merged.get("probes", {}).items():
        cfg.probes[task] = _build(ProbeSection, values, f"probes.{task}")
    for name_ in cfg.feature_names:
        if name_ not in _FEATURE_TYPES:
            raise ConfigError(f"pipeline refers to unknown feature {name_!r}")
    if "frame_rate" in merged.get("pipeline", {}):
        cfg.pipeline.frame_rate = str(cfg.pipeline.frame_rate)
    return cfg


def load_config(path=None, preset: str | None = None) -> PipelineConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(raw, preset)
