"""INI configuration with typed sections.

Every section maps onto a frozen dataclass; a key's type is taken from the
dataclass default. Unknown sections or keys are errors, and all problems are
collected before reporting so a broken config is fixed in one pass.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .fusion import FusionConfig
from .synth_data import SynthConfig
from .tracker import TrackerConfig
from .trainer import TrainConfig

ENV_VAR = "MFTRACK_CONFIG"


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class PathsConfig:
    data: str = ""
    test_data: str = ""
    rgb_input: str = ""
    exclude_list: str = ""
    out: str = "runs"
    checkpoint: str = ""
    results: str = ""


@dataclass(frozen=True)
class ToyConfig:
    sequences: int = 20
    frames: int = 60
    height: int = 128
    width: int = 128
    corruption_fraction: float = 0.25
    prefix: str = "toy"


@dataclass(frozen=True)
class ModelSection:
    feat_dim: int = 32
    filter_size: int = 5
    n_iter: int = 5
    lam: float = 0.01
    sigma: float = 1.0
    iou_dim: int = 32
    iou_hidden: int = 64
    search_scale: float = 5.0
    out_size: int = 144


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "ope"
    runs: int = 1
    threshold: float = 0.0
    gap: int = 5
    burn_in: int = 5


@dataclass(frozen=True)
class AblationConfig:
    rows: str = ""  # comma separated; empty means every row
    pretrain_steps: int = 0  # 0: use train.steps
    finetune_steps: int = 0


@dataclass(frozen=True)
class GlobalSection:
    seed: int = 0


SECTIONS = {
    "global": GlobalSection,
    "paths": PathsConfig,
    "synth": SynthConfig,
    "toy": ToyConfig,
    "backbone": BackboneConfig,
    "model": ModelSection,
    "fusion": FusionConfig,
    "train": TrainConfig,
    "tracker": TrackerConfig,
    "eval": EvalConfig,
    "ablate": AblationConfig,
}
# keys that are derived elsewhere and never read from a file
HIDDEN = {("backbone", "input_channels"), ("backbone", "weight_init_seed"), ("synth", "seed"),
          ("train", "seed")}


def section_keys(section: str) -> list[tuple[str, object]]:
    cls = SECTIONS[section]
    out = []
    for f in dataclasses.fields(cls):
        if (section, f.name) in HIDDEN:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out.append((f.name, default))
    return out


def _parse(value: str, default, where: str):
    v = value.strip()
    if isinstance(default, bool):
        low = v.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{where}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    if isinstance(default, tuple):
        items = [s.strip() for s in v.strip("()[]").split(",") if s.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(s) for s in items)
    if default is None:
        return v or None
    return v


@dataclass
class GlobalConfig:
    values: dict = field(default_factory=dict)  # section -> {key: value}
    source: str | None = None

    def get(self, section: str, key: str):
        return self.values.get(section, {}).get(key, dict(section_keys(section))[key])

    def section(self, name: str) -> dict:
        return {k: self.get(name, k) for k, _ in section_keys(name)}

    @property
    def seed(self) -> int:
        return int(self.get("global", "seed"))

    def build(self, name: str, **extra):
        return SECTIONS[name](**{**self.section(name), **extra})


def load_config(path=None, overrides=()) -> GlobalConfig:
    """Read ``path`` (or ``$MFTRACK_CONFIG``) and apply ``section.key=value`` overrides."""
    errors, values = [], {}
    path = path or os.environ.get(ENV_VAR) or None
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError([f"config file {p} does not exist"])
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise ConfigError([f"{p}: {exc}"]) from None
        for sec in parser.sections():
            for key, raw in parser.items(sec):
                _set(values, sec, key, raw, errors, f"{p}[{sec}].{key}")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            errors.append(f"override {item!r} must look like section.key=value")
            continue
        lhs, raw = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        _set(values, sec, key, raw, errors, f"--set {lhs}")
    cfg = GlobalConfig(values, str(path) if path else None)
    errors += validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def _set(values, sec, key, raw, errors, where):
    if sec not in SECTIONS:
        errors.append(f"{where}: unknown section {sec!r}")
        return
    known = dict(section_keys(sec))
    if key not in known:
        errors.append(f"{where}: unknown key {key!r} (known: {', '.join(known)})")
        return
    try:
        values.setdefault(sec, {})[key] = _parse(raw, known[key], where)
    except ValueError as exc:
        errors.append(f"{where}: {exc}")


def validate(cfg: GlobalConfig) -> list[str]:
    """Construct every section to surface invariant violations."""
    errors = []
    for name in SECTIONS:
        try:
            cfg.build(name)
        except (ValueError, TypeError) as exc:
            errors.append(f"[{name}] {exc}")
    if cfg.get("eval", "protocol") not in ("ope", "vot"):
        errors.append(f"[eval] protocol must be 'ope' or 'vot', got {cfg.get('eval', 'protocol')!r}")
    return errors


def check_paths(cfg: GlobalConfig, keys) -> list[str]:
    """Errors for required input paths that are unset or missing.

    A checkpoint may be named by its stem (``final`` for ``final.npz``).
    """
    errors = []
    for key in keys:
        v = cfg.get("paths", key)
        if not v:
            errors.append(f"paths.{key} is not set")
        elif not Path(v).exists() and not (key == "checkpoint" and Path(v).with_suffix(".npz").exists()):
            errors.append(f"paths.{key}: {v} does not exist")
    return errors
