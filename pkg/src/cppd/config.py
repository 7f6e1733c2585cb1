"""Experiment configuration.

Config files are plain text, one ``section.key = value`` per line, ``#``
starts a comment (full line, or after whitespace). Sections: ``encoder``,
``model``, ``train``. Unknown keys and unparsable values are errors.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path

from .vocab import CharSet, build_charset

VARIANTS = ("ar", "ar-p", "ar-l", "ar-l-p", "pd", "pd-p", "cppd")


class VariantKind(str, enum.Enum):
    AR = "ar"
    AR_P = "ar-p"
    AR_L = "ar-l"
    AR_L_P = "ar-l-p"
    PD = "pd"
    PD_P = "pd-p"
    CPPD = "cppd"

    @property
    def autoregressive(self) -> bool:
        return self in (VariantKind.AR, VariantKind.AR_P, VariantKind.AR_L, VariantKind.AR_L_P)

    @property
    def permuted(self) -> bool:
        return self in (VariantKind.AR_P, VariantKind.AR_L_P)

    @property
    def limited(self) -> bool:
        return self in (VariantKind.AR_L, VariantKind.AR_L_P)


class ConfigError(ValueError):
    pass


@dataclass
class EncoderSection:
    H: int = 32
    W: int = 100
    depth: int = 2
    channels: int = 1


@dataclass
class ModelSection:
    variant: str = "cppd"
    L: int = 12
    D: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    depth: int = 2
    use_cc_module: bool = True
    use_co_module: bool = True
    lambda_cc: float = 1.0
    lambda_co: float = 1.0
    lambda_rec: float = 1.0
    lambda_side: float = 1.0


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 6
    batch_size: int = 64
    base_lr: float = 5e-4
    lr_ref_batch: int = 1024
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    augment: bool = False
    eval_every: int = 1
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("train.warmup_epochs must be in [0, epochs)")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / self.lr_ref_batch


@dataclass
class Config:
    encoder: EncoderSection = field(default_factory=EncoderSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)

    def model_config(self, charset: CharSet) -> "ModelConfig":
        m, e = self.model, self.encoder
        return ModelConfig(
            symbols="".join(charset.symbols), variant=m.variant, L=m.L, H=e.H, W=e.W, channels=e.channels,
            D=m.D, heads=m.heads, mlp_ratio=m.mlp_ratio, enc_depth=e.depth, dec_depth=m.depth,
            use_cc_module=m.use_cc_module, use_co_module=m.use_co_module, lambda_cc=m.lambda_cc,
            lambda_co=m.lambda_co, lambda_rec=m.lambda_rec, lambda_side=m.lambda_side)


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a model: architecture, alphabet and loss weights."""
    symbols: str
    variant: str = "cppd"
    L: int = 12
    H: int = 32
    W: int = 100
    channels: int = 1
    D: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    enc_depth: int = 2
    dec_depth: int = 2
    use_cc_module: bool = True
    use_co_module: bool = True
    lambda_cc: float = 1.0
    lambda_co: float = 1.0
    lambda_rec: float = 1.0
    lambda_side: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.L < 2:
            raise ConfigError("L must be >= 2")
        if self.D % self.heads:
            raise ConfigError(f"D={self.D} not divisible by heads={self.heads}")
        if self.variant == "cppd" and self.dec_depth not in (1, 2, 3):
            raise ConfigError("cppd module depth must be 1, 2 or 3")

    @cached_property
    def charset(self) -> CharSet:
        return build_charset(self.symbols)

    @property
    def S(self) -> int:
        return len(self.symbols)

    @property
    def V(self) -> int:
        return len(self.symbols) + 2

    def encoder_config(self):
        from .encoder import EncoderConfig  # torch-free import path for label/config tooling

        return EncoderConfig(H=self.H, W=self.W, D=self.D, depth=self.enc_depth, heads=self.heads,
                             mlp_ratio=self.mlp_ratio, channels=self.channels)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = _parse_lines(text, "<model config>")
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for k, (v, where) in kv.items():
            if k not in types:
                raise ConfigError(f"{where}: unknown model config key {k!r}")
            values[k] = _coerce(v, _type_of(cls, k), where)
        return cls(**values)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _type_of(cls, name):
    default = next(f for f in fields(cls) if f.name == name)
    if default.default is not dataclasses.MISSING:
        return type(default.default)
    return str


def _coerce(raw: str, typ, where: str):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


def _parse_lines(text: str, source: str) -> dict[str, tuple[str, str]]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        for marker in (" #", "\t#"):
            if marker in stripped:
                stripped = stripped[:stripped.index(marker)].rstrip()
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in stripped.split("=", 1))
        out[key] = (value, f"{source}:{lineno}")
    return out


def _section_classes():
    return {"encoder": EncoderSection, "model": ModelSection, "train": TrainConfig}


def apply_overrides(cfg: Config, items: dict[str, tuple[str, str]]) -> Config:
    """Set dotted ``section.key`` values on a copy of ``cfg``."""
    sections = {name: dataclasses.asdict(getattr(cfg, name)) for name in _section_classes()}
    for key, (raw, where) in items.items():
        if "." not in key:
            raise ConfigError(f"{where}: key {key!r} must be 'section.key'")
        sec, name = key.split(".", 1)
        if sec not in sections:
            raise ConfigError(f"{where}: unknown section {sec!r}")
        if name not in sections[sec]:
            raise ConfigError(f"{where}: unknown key {key!r}")
        sections[sec][name] = _coerce(raw, _type_of(_section_classes()[sec], name), where)
    try:
        return Config(**{sec: _section_classes()[sec](**vals) for sec, vals in sections.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path=None, overrides: list[str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
        cfg = apply_overrides(cfg, _parse_lines(text, str(p)))
    if overrides:
        items = {}
        for i, ov in enumerate(overrides):
            if "=" not in ov:
                raise ConfigError(f"override {ov!r} must look like section.key=value")
            k, v = ov.split("=", 1)
            items[k.strip()] = (v.strip(), f"--set #{i + 1}")
        cfg = apply_overrides(cfg, items)
    return cfg


def config_to_text(cfg: Config) -> str:
    lines = []
    for sec in _section_classes():
        for k, v in dataclasses.asdict(getattr(cfg, sec)).items():
            lines.append(f"{sec}.{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"
