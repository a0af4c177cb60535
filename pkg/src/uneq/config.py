"""Flat ``key = value`` run configuration with dotted sections.

Example::

    seed = 3
    batch_size = 8
    arrangement.discriminator_mode = diametric
    arrangement.distance_g2 = cosine
    network.channels = 64, 64
    render.frames_per_segment = 30

``#`` starts a comment. Unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossArrangement
from .networks import NetworkConfig
from .render import Interpolation, RenderPlan, sample_keyframes
from .training import TrainConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RenderSettings:
    keyframes: int = 4
    frames_per_segment: int = 30
    interpolation: str = "slerp"
    loop: bool = False
    keyframe_seed: int = 0
    shared_latents: bool = False

    def __post_init__(self):
        if self.keyframes < 2:
            raise ValueError("render.keyframes must be >= 2")
        if self.frames_per_segment < 1:
            raise ValueError("render.frames_per_segment must be >= 1")
        Interpolation(self.interpolation)

    def plan(self, latent_dim: int) -> RenderPlan:
        kfs = sample_keyframes(self.keyframe_seed, self.keyframes, latent_dim, self.shared_latents)
        return RenderPlan(kfs, self.frames_per_segment, self.interpolation, self.loop)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    render: RenderSettings = field(default_factory=RenderSettings)
    out_dir: str = "runs/default"
    metrics_path: str = ""
    previews: bool = True

    @property
    def metrics_file(self) -> Path:
        return Path(self.metrics_path) if self.metrics_path else Path(self.out_dir) / "metrics.jsonl"


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _converter(f: dataclasses.Field):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if t == "bool":
        return _parse_bool
    if t == "int":
        return int
    if t == "float":
        return float
    if t.startswith("tuple"):
        return _parse_ints
    if isinstance(f.default, enum.Enum):
        return lambda s: s.strip().lower()
    return lambda s: s.strip()


# key -> (section, field name, converter)
_SECTIONS = {
    "": TrainConfig,
    "arrangement.": LossArrangement,
    "network.": NetworkConfig,
    "render.": RenderSettings,
}
KEYS: dict[str, tuple[str, str, object]] = {}
for _prefix, _cls in _SECTIONS.items():
    for _f in dataclasses.fields(_cls):
        if _prefix == "" and _f.name in ("arrangement", "network"):
            continue
        KEYS[_prefix + _f.name] = (_prefix, _f.name, _converter(_f))
KEYS["out_dir"] = ("run.", "out_dir", str)
KEYS["metrics_path"] = ("run.", "metrics_path", str)
KEYS["previews"] = ("run.", "previews", _parse_bool)


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, value = (p.strip() for p in item.split("=", 1))
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r} in --set")
    return key, value


def build(values: dict[str, str]) -> RunConfig:
    """Typed, validated config from raw string values."""
    buckets: dict[str, dict] = {p: {} for p in (*_SECTIONS, "run.")}
    for key, raw in values.items():
        prefix, name, conv = KEYS[key]
        try:
            buckets[prefix][name] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    try:
        arrangement = LossArrangement(**buckets["arrangement."])
        network = NetworkConfig(**buckets["network."])
        train = TrainConfig(arrangement=arrangement, network=network, **buckets[""])
        render = RenderSettings(**buckets["render."])
        return RunConfig(train=train, render=render, **buckets["run."])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from None
        values.update(parse_lines(text.splitlines(), str(p)))
    values.update(overrides or {})
    return build(values)


def dump(cfg: RunConfig) -> str:
    """Render every key back to the text format (round-trips through :func:`load`)."""
    lines = []
    for key, (prefix, name, _) in KEYS.items():
        if prefix == "":
            v = getattr(cfg.train, name)
        elif prefix == "arrangement.":
            v = getattr(cfg.train.arrangement, name)
        elif prefix == "network.":
            v = getattr(cfg.train.network, name)
        elif prefix == "render.":
            v = getattr(cfg.render, name)
        else:
            v = getattr(cfg, name)
        if isinstance(v, enum.Enum):
            v = v.value
        elif isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
