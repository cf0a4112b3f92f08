"""Flat key-value run configuration (INI sections mirroring the module configs)."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .data import N_SUBCARRIERS, SyntheticDomainSpec
from .model import ModelConfig
from .train import DatConfig
from .tta import AdaptationConfig


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # or "file"
    path: str = ""
    train_domains: tuple[int, ...] = ()
    test_domains: tuple[int, ...] = ()
    val_fraction: float = 0.2
    val_tta_fraction: float = 0.1
    split_seed: int = 0


@dataclass(frozen=True)
class SynthConfig:
    n_activities: int = 6
    samples_per_domain: int = 200
    template_length: int = 180
    template_seed: int = 0


@dataclass(frozen=True)
class DomainConfig:
    offset: float = 0.0
    scale: float = 1.0
    tilt: float = 0.0
    ripple: float = 0.0
    phase: float = 0.0
    noise: float = 0.0
    seed: int = 0

    def to_spec(self, domain_id: int, seed_offset: int = 0) -> SyntheticDomainSpec:
        return SyntheticDomainSpec(
            domain_id,
            self.offset,
            self.scale,
            gain_profile(self.tilt, self.ripple, self.phase),
            self.noise,
            self.seed + seed_offset,
        )


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "experiment"
    seeds: tuple[int, ...] = (0,)
    sequences: tuple[str, ...] = ("shuffled",)
    alternating_block: int = 100
    alternating_domains: tuple[int, ...] = ()
    ablation_augment: tuple[bool, ...] = (True,)
    ablation_reset: tuple[bool, ...] = (True, False)
    window: int = 100
    figures: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    domains: dict[int, DomainConfig] = field(default_factory=dict)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: DatConfig = field(default_factory=DatConfig)
    tta: AdaptationConfig = field(default_factory=AdaptationConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = {str(k): asdict(d) for k, d in v.items()} if f.name == "domains" else asdict(v)
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def gain_profile(tilt: float = 0.0, ripple: float = 0.0, phase: float = 0.0) -> np.ndarray:
    """Positive per-subcarrier gains: exponential tilt across the band times a ripple."""
    if abs(ripple) >= 1:
        raise ValueError("|ripple| must be < 1 to keep gains positive")
    f = np.arange(N_SUBCARRIERS)
    return np.exp(tilt * (f / (N_SUBCARRIERS - 1) - 0.5)) * (1 + ripple * np.sin(2 * np.pi * f / 10 + phase))


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _parse_scalar(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        try:
            return _BOOL[text.lower()]
        except KeyError:
            raise ValueError(f"not a boolean: {text!r}") from None
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse(text: str, default, hint: str):
    if isinstance(default, tuple):
        items = [t for t in text.replace(";", ",").split(",") if t.strip()]
        like = default[0] if default else (0 if "int" in hint else "" if "str" in hint else True)
        return tuple(_parse_scalar(t, like) for t in items)
    return _parse_scalar(text, default)


def _section(cls, items: dict[str, str]):
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, text in items.items():
        if key not in known:
            raise ValueError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _parse(text, getattr(defaults, key), str(known[key].type))
    return cls(**kwargs)


SECTIONS = {
    "data": DataConfig,
    "synth": SynthConfig,
    "augment": AugmentConfig,
    "model": ModelConfig,
    "train": DatConfig,
    "tta": AdaptationConfig,
    "experiment": ExperimentSection,
}


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    cfg = RunConfig()
    for name in parser.sections():
        items = dict(parser.items(name))
        if name.startswith("domain."):
            cfg.domains[int(name.split(".", 1)[1])] = _section(DomainConfig, items)
        elif name in SECTIONS:
            setattr(cfg, name, _section(SECTIONS[name], items))
        else:
            raise ValueError(f"unknown config section [{name}]")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    return RunConfig() if path is None else parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` back to INI text; ``parse_config(dump_config(c))`` reproduces ``c``."""
    parser = configparser.ConfigParser(interpolation=None)

    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ", ".join(fmt(x) for x in v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    for name in SECTIONS:
        parser[name] = {k: fmt(v) for k, v in asdict(getattr(cfg, name)).items()}
    for dom, d in sorted(cfg.domains.items()):
        parser[f"domain.{dom}"] = {k: fmt(v) for k, v in asdict(d).items()}
    import io

    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


assert all(is_dataclass(c) for c in SECTIONS.values())
