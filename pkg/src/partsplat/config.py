"""Run configuration: defaults, TOML parsing and the resolved-config echo.

Every tunable constant of the pipeline lives here so a run directory's
config.toml fully documents what was executed.  The output directory is
deliberately not part of the config (a run is identified by where it lives).
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ValidationError
from .motion import DEConfig
from .observe import NoiseConfig
from .refine import LossWeights, RefineConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class SceneConfig:
    name: str = "standard3"
    frame_count: int = 20
    primitives_per_part: int = 300
    rng_seed: int = 1234


@dataclass(frozen=True)
class RigConfig:
    count: int = 8
    radius: float = 2.5
    height: float = 0.9
    focal: float = 110.0
    width: int = 96
    height_px: int = 96


@dataclass(frozen=True)
class PartitionConfig:
    theta_depth: float = 0.1  # m
    resolution: float = 1.0
    min_part_size: int = 4  # smaller clusters attach to the nearest part


@dataclass(frozen=True)
class BudgetConfig:
    epsilon: float = 1e5
    min_iters: int = 1500
    max_iters: int = 2000


@dataclass(frozen=True)
class RigidityConfig:
    alpha: float = 0.02
    beta: float = 0.2
    delta: float = 1e-3  # m
    anchor_count: int = 16
    w_init: float = 0.5
    knn_k: int = 20


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = SceneConfig()
    cameras: RigConfig = RigConfig()
    noise: NoiseConfig = NoiseConfig()
    partition: PartitionConfig = PartitionConfig()
    de: DEConfig = DEConfig()
    budget: BudgetConfig = BudgetConfig()
    loss: LossWeights = LossWeights()
    rigidity: RigidityConfig = RigidityConfig()
    refine: RefineConfig = RefineConfig()
    tau_fail: float = 0.05
    seed: int = 0
    variant: str = "full"
    background: tuple = (0.0, 0.0, 0.0)


_SECTIONS = {
    "scene": SceneConfig,
    "cameras": RigConfig,
    "noise": NoiseConfig,
    "partition": PartitionConfig,
    "de": DEConfig,
    "budget": BudgetConfig,
    "loss": LossWeights,
    "rigidity": RigidityConfig,
    "refine": RefineConfig,
}

_SCALARS = ("tau_fail", "seed", "variant", "background")


def config_from_dict(doc: dict) -> RunConfig:
    kwargs = {}
    known = set(_SECTIONS) | set(_SCALARS)
    for key in doc:
        if key not in known:
            raise ValidationError(f"unknown config section or key: {key!r}")
    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ValidationError(f"config section {name!r} must be a table")
        allowed = {f.name for f in fields(cls)}
        unknown = set(section) - allowed
        if unknown:
            raise ValidationError(f"unknown keys in [{name}]: {sorted(unknown)}")
        kwargs[name] = cls(**section)
    for name in _SCALARS:
        if name in doc:
            value = doc[name]
            kwargs[name] = tuple(value) if name == "background" else value
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    doc = {name: asdict(getattr(cfg, name)) for name in _SECTIONS}
    for name in _SCALARS:
        value = getattr(cfg, name)
        doc[name] = list(value) if name == "background" else value
    return doc


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.key=value` (or `key=value` for top-level scalars)
    command-line overrides; values parse as TOML literals."""
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = tomllib.loads(f"x = {raw}")["x"]
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"cannot parse override value {raw!r}: {exc}") from exc
        parts = key.strip().split(".")
        if len(parts) == 1:
            name = parts[0]
            if name not in _SCALARS:
                raise ValidationError(f"unknown top-level config key {name!r}")
            cfg = replace(cfg, **{name: tuple(value) if name == "background" else value})
        elif len(parts) == 2:
            section, attr = parts
            if section not in _SECTIONS:
                raise ValidationError(f"unknown config section {section!r}")
            sub = getattr(cfg, section)
            if attr not in {f.name for f in fields(sub)}:
                raise ValidationError(f"unknown key {attr!r} in [{section}]")
            cfg = replace(cfg, **{section: replace(sub, **{attr: value})})
        else:
            raise ValidationError(f"override key {key!r} has too many dots")
    return cfg


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ValidationError(f"cannot serialize {type(value).__name__} to TOML")


def dump_toml(cfg: RunConfig, path) -> None:
    """Echo the resolved configuration; keys are emitted in a fixed order so
    identical configs serialize byte-identically."""
    doc = config_to_dict(cfg)
    lines = []
    for name in _SCALARS:
        lines.append(f"{name} = {_toml_value(doc[name])}")
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        for key, value in doc[section].items():
            lines.append(f"{key} = {_toml_value(value)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
