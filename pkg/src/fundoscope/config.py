"""Pipeline configuration: one TOML file, one dataclass per section.

Unknown sections or keys are errors. Every default is documented next to
its field.
"""
from __future__ import annotations

import hashlib
import json
from importlib import resources
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class PreprocessSection:
    alpha: float = 4.0  # weight of the raw image
    beta: float = -4.0  # weight of the Gaussian-blurred image
    gamma: float = 128.0  # offset
    theta: float = 10.0  # Gaussian scale in pixels at the working resolution
    kernel_radius: int = 0  # 0 -> ceil(3 * theta)
    roi_threshold: float = 15 / 255  # ROI: channel mean above this fraction of the maximum


@dataclass
class TilingSection:
    d: int = 800  # working resolution (image side)
    h: int = 64  # patch side
    ov: int = 16  # overlap between adjacent windows


@dataclass
class LocalNetSection:
    width_divisor: int = 1  # 1 = full reference channel widths
    dropout: float = 0.5
    normal_per_lesion: float = 1.0  # normal patches kept per lesion patch of the largest class
    epochs: int = 0  # 0 -> [train].epochs
    learning_rate: float = 0.0  # 0 -> [train].learning_rate
    batch_size: int = 0  # 0 -> [train].batch_size


@dataclass
class GlobalNetSection:
    input_size: int = 256
    width_divisor: int = 1
    dropout: float = 0.5
    referable_mode: str = "derived"  # "derived": P(2)+P(3); "binary": separately trained 2-class net
    epochs: int = 0
    learning_rate: float = 0.0
    batch_size: int = 0


@dataclass
class TrainSection:
    seed: int = 0
    precision: int = 32  # 32 or 64 bit floats
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.95  # per-epoch multiplicative decay
    patience: int = 0  # early-stopping patience in epochs, 0 = off
    class_balance: str = "oversample"


@dataclass
class SynthSection:
    side: int = 800
    n_per_grade: int = 50
    val_fraction: float = 0.15
    test_fraction: float = 0.25
    augment_copies: int = 0  # extra rotated/cropped/scaled copies per training image
    ma_radius: list = field(default_factory=lambda: [1.0, 3.0])
    hem_radius: list = field(default_factory=lambda: [5.0, 20.0])
    exu_radius: list = field(default_factory=lambda: [4.0, 15.0])
    vessel_width: list = field(default_factory=lambda: [2.0, 6.0])
    ma_contrast: list = field(default_factory=lambda: [0.45, 0.65])  # fraction of brightness removed
    hem_contrast: list = field(default_factory=lambda: [0.40, 0.65])
    exu_contrast: list = field(default_factory=lambda: [0.45, 0.80])  # fraction of headroom added
    noise: float = 3.0
    severe_hem_count: int = 15
    severe_hem_box: float = 40.0


@dataclass
class EvalSection:
    ablation: bool = True  # also train/evaluate the all-ones weighting baseline
    dump_examples: int = 4  # images whose L/P/M/I* are written out for inspection
    figures: bool = True
    high_specificity: float = 0.97  # operating-point targets reported on ROC curves
    high_sensitivity: float = 0.95


@dataclass
class PathsSection:
    out: str = "runs/default"


SECTIONS = {
    "preprocess": PreprocessSection,
    "tiling": TilingSection,
    "localnet": LocalNetSection,
    "globalnet": GlobalNetSection,
    "train": TrainSection,
    "synth": SynthSection,
    "eval": EvalSection,
    "paths": PathsSection,
}


@dataclass
class PipelineConfig:
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    tiling: TilingSection = field(default_factory=TilingSection)
    localnet: LocalNetSection = field(default_factory=LocalNetSection)
    globalnet: GlobalNetSection = field(default_factory=GlobalNetSection)
    train: TrainSection = field(default_factory=TrainSection)
    synth: SynthSection = field(default_factory=SynthSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self):
        return asdict(self)

    def section_hash(self, *names) -> str:
        blob = json.dumps({n: asdict(getattr(self, n)) for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def hash(self) -> str:
        return self.section_hash(*SECTIONS)

    def validate(self):
        t = self.tiling
        if not 0 <= t.ov < t.h <= t.d:
            raise ConfigError(f"[tiling] needs 0 <= ov < h <= d, got d={t.d} h={t.h} ov={t.ov}")
        if t.h % 4:
            raise ConfigError("[tiling] h must be divisible by 4")
        if self.train.precision not in (32, 64):
            raise ConfigError("[train] precision must be 32 or 64")
        if self.globalnet.referable_mode not in ("derived", "binary"):
            raise ConfigError("[globalnet] referable_mode must be 'derived' or 'binary'")
        if self.train.class_balance not in ("oversample", "none"):
            raise ConfigError("[train] class_balance must be 'oversample' or 'none'")
        s = self.synth
        if s.n_per_grade < 1 or not 0 < s.val_fraction < 1 or not 0 < s.test_fraction < 1 \
                or s.val_fraction + s.test_fraction >= 1:
            raise ConfigError("[synth] needs n_per_grade >= 1 and val/test fractions summing below 1")
        if self.preprocess.theta <= 0:
            raise ConfigError("[preprocess] theta must be positive")
        return self


def _build_section(name, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    default = cls()
    kwargs = {}
    for key, value in values.items():
        ref = getattr(default, key)
        if isinstance(ref, bool) and not isinstance(value, bool):
            raise ConfigError(f"[{name}] {key} must be true/false")
        if isinstance(ref, (int, float)) and not isinstance(ref, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"[{name}] {key} must be a number")
            value = type(ref)(value) if isinstance(ref, float) or float(value).is_integer() else value
        kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict) -> PipelineConfig:
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    cfg = PipelineConfig(**{name: _build_section(name, cls, data.get(name, {}))
                            for name, cls in SECTIONS.items()})
    return cfg.validate()


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)


BUNDLED = ("default", "desk", "smoke")


def bundled_config(name: str) -> PipelineConfig:
    """One of the configurations shipped with the package: default, desk or smoke."""
    if name not in BUNDLED:
        raise ConfigError(f"unknown bundled config {name!r}; choose from {', '.join(BUNDLED)}")
    text = resources.files("fundoscope").joinpath("configs", f"{name}.toml").read_text()
    return from_dict(tomllib.loads(text))


def dump_toml(cfg: PipelineConfig) -> str:
    """Render a config back to TOML (flat sections, scalars and lists only)."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in asdict(getattr(cfg, name)).items():
            lines.append(f"{key} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)
