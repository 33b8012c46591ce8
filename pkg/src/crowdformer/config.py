"""Run configuration: dataclasses, the flat key=value file format, presets.

Config files are plain text, one ``section.key = value`` pair per line with
``#`` comments. Sections are ``model``, ``loss``, ``optim`` and ``data``;
tuples are comma-separated. Two profiles ship with the package:
``pvt_v2_b5`` (full-scale) and ``tiny`` (test-scale).
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

# Dataset presets: name -> smooth-L1 beta.
BETA_PRESETS = {"sha": 1.0, "shb": 7.0, "qnrf": 1.0, "ucf50": 15.0}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture description for the four-stage pyramid backbone and head."""

    input_size: int = 384
    in_channels: int = 3
    stage_depths: tuple = (3, 6, 40, 3)
    embed_dims: tuple = (64, 128, 320, 512)
    strides: tuple = (4, 2, 2, 2)
    num_heads: tuple = (1, 2, 5, 8)
    sr_ratios: tuple = (8, 4, 2, 1)
    mlp_ratios: tuple = (4.0, 4.0, 4.0, 4.0)
    agg_width: int = 6912
    gelu_tanh: bool = False

    def validate(self):
        for name in ("stage_depths", "embed_dims", "strides", "num_heads", "sr_ratios", "mlp_ratios"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"model.{name} must have 4 entries")
        total = 1
        for s in self.strides:
            total *= s
        if self.input_size % total != 0:
            raise ConfigError(
                f"model.input_size {self.input_size} not divisible by stride product {total}"
            )
        for i, (dim, heads) in enumerate(zip(self.embed_dims, self.num_heads)):
            if dim % heads != 0:
                raise ConfigError(
                    f"model.embed_dims[{i}]={dim} not divisible by num_heads[{i}]={heads}"
                )
        if min(self.stage_depths) < 1 or min(self.embed_dims) < 1 or min(self.sr_ratios) < 1:
            raise ConfigError("model: depths, dims and sr_ratios must be positive")
        if self.agg_width < 1:
            raise ConfigError("model.agg_width must be positive")

    @property
    def stage_sides(self) -> tuple:
        """Spatial side of each pyramid level: input_size / 2^(i+1), stages i = 1..4."""
        return tuple(self.input_size // (2 ** (i + 1)) for i in range(1, 5))


@dataclass
class LossConfig:
    beta: float = 1.0
    granularity: str = "crop"  # "crop": six per-crop terms averaged; "image": summed prediction vs total

    def validate(self):
        if self.beta <= 0:
            raise ConfigError(f"loss.beta must be positive, got {self.beta}")
        if self.granularity not in ("crop", "image"):
            raise ConfigError(f"loss.granularity must be 'crop' or 'image', got {self.granularity!r}")


@dataclass
class OptimConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1  # images per step; each image contributes its six crops
    epochs: int = 300
    seed: int = 0

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("optim.learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("optim.weight_decay must be nonnegative")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"optim.{name} must lie in (0, 1), got {v}")
        if self.eps <= 0:
            raise ConfigError("optim.eps must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("optim.batch_size must be >= 1 and epochs >= 0")


@dataclass
class DataConfig:
    p_flip: float = 0.5
    p_gray: float = 0.1
    augment: bool = True
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)

    def validate(self):
        for name in ("p_flip", "p_gray"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"data.{name} must lie in [0, 1], got {v}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("data.mean and data.std must have 3 entries")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    preset: str = ""
    out_dir: str = "runs"

    def validate(self):
        self.model.validate()
        self.loss.validate()
        self.optim.validate()
        self.data.validate()
        if self.preset and self.preset not in BETA_PRESETS:
            raise ConfigError(
                f"unknown preset {self.preset!r}; choose one of {sorted(BETA_PRESETS)}"
            )

    def apply_preset(self, preset: str) -> "RunConfig":
        if preset not in BETA_PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose one of {sorted(BETA_PRESETS)}")
        out = dataclasses.replace(self, loss=dataclasses.replace(self.loss, beta=BETA_PRESETS[preset]))
        out.preset = preset
        return out

    def fingerprint(self) -> str:
        """SHA-256 over the semantic sections (model/loss/optim/data).

        The preset label and output directory are run bookkeeping and do not
        affect compatibility, so they are excluded.
        """
        text = serialize_config(self, semantic_only=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


_SECTIONS = ("model", "loss", "optim", "data")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, template):
    text = text.strip()
    if isinstance(template, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {text!r}")
    if isinstance(template, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        elem = template[0] if template else 0
        return tuple(_parse_value(p, elem) for p in parts)
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text


def serialize_config(cfg: RunConfig, semantic_only: bool = False) -> str:
    """Canonical text form: sorted ``section.key = value`` lines."""
    lines = []
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(sub, f.name))}")
    if not semantic_only:
        lines.append(f"run.out_dir = {cfg.out_dir}")
        lines.append(f"run.preset = {cfg.preset}")
    return "\n".join(sorted(lines)) + "\n"


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    known = {
        section: {f.name: f for f in fields(getattr(cfg, section))} for section in _SECTIONS
    }
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section prefix")
        section, _, name = key.partition(".")
        if section == "run":
            if name == "out_dir":
                cfg.out_dir = value.strip()
            elif name == "preset":
                cfg.preset = value.strip()
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            continue
        if section not in known or name not in known[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        sub = getattr(cfg, section)
        template = getattr(sub, name)
        try:
            setattr(sub, name, _parse_value(value, template))
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(name_or_path: str | Path) -> RunConfig:
    """Load a config from a file path or a shipped profile name (e.g. 'tiny')."""
    path = Path(name_or_path)
    if path.is_file():
        return parse_config(path.read_text(encoding="utf-8"))
    ref = resources.files("crowdformer").joinpath("configs", f"{name_or_path}.cfg")
    if ref.is_file():
        return parse_config(ref.read_text(encoding="utf-8"))
    raise ConfigError(f"config not found: {name_or_path!r} (no such file or shipped profile)")


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")
