"""Experiment configuration: typed INI sections, strict keys.

Every key has a default; a config file only lists what it changes.  Unknown
sections or keys are rejected.  :func:`render` writes the fully resolved
config back out, which is what each run stores as its manifest.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from gdprune.codec import CodecConfig
from gdprune.distill import DISTILL_MODES
from gdprune.errors import ConfigError
from gdprune.pruning import SCHEDULE_MODES, ScheduleSet


@dataclass(frozen=True)
class PruneSettings:
    L0: float = -6.0
    L1: float = 6.0
    tau: float = 20.0
    s_tar: float = 0.5
    schedule_mode: str = "corrected-cubic"
    approximator: str = "gd"  # gd | ste
    shared_threshold: bool = False
    norm_grad: bool = False
    sparsity_estimate: str = "hard-st"  # soft | hard-st


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 256.0
    lambda2: float = 20.0
    lambda3_init: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3_init) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class DistillSettings:
    mode: str = "adaptive"  # none | full | adaptive
    plan: str = "pred:0.3, res:0.3, all:0.4"
    per_channel: bool = False


@dataclass(frozen=True)
class OptimSettings:
    lr: float = 1e-4
    K_base: int = 5000
    step_scaling: str = "none"  # none | proportional
    dense_steps: int = 5000
    batch: int = 4
    crop: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    threshold_eps: float = 1e-8


@dataclass(frozen=True)
class DataSettings:
    source: str = "synthetic"  # "synthetic" or a path to a TVSF file
    num_sequences: int = 8
    sequence_length: int = 6
    frame_size: int = 64
    max_motion: int = 2
    data_seed: int = 1234
    eval_sequences: int = 4
    eval_length: int = 3
    eval_seed: int = 4321


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    output_dir: str = "runs"
    checkpoint_every: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    prune: PruneSettings = field(default_factory=PruneSettings)
    loss: LossWeights = field(default_factory=LossWeights)
    distill: DistillSettings = field(default_factory=DistillSettings)
    optim: OptimSettings = field(default_factory=OptimSettings)
    data: DataSettings = field(default_factory=DataSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def __post_init__(self):
        validate(self)

    def replace(self, **sections) -> "ExperimentConfig":
        """Return a copy with per-section overrides, e.g. ``replace(prune={"s_tar": 0.75})``."""
        updates = {}
        for name, changes in sections.items():
            current = getattr(self, name)
            unknown = set(changes) - {f.name for f in dataclasses.fields(current)}
            if unknown:
                raise ConfigError(f"[{name}] unknown keys {sorted(unknown)}")
            updates[name] = dataclasses.replace(current, **changes)
        return dataclasses.replace(self, **updates)

    def schedule(self, K: int) -> ScheduleSet:
        p = self.prune
        return ScheduleSet(p.L0, p.L1, p.tau, p.s_tar, K, p.schedule_mode)

    def total_steps(self) -> int:
        from gdprune.train import step_budget

        return step_budget(self.prune.s_tar, self.optim.K_base, self.optim.step_scaling)


SECTIONS = ("codec", "prune", "loss", "distill", "optim", "data", "run")


def validate(cfg: ExperimentConfig) -> None:
    p = cfg.prune
    if p.schedule_mode not in SCHEDULE_MODES:
        raise ConfigError(f"[prune] schedule_mode must be one of {SCHEDULE_MODES}")
    if p.approximator not in ("gd", "ste"):
        raise ConfigError("[prune] approximator must be 'gd' or 'ste'")
    if p.sparsity_estimate not in ("soft", "hard-st"):
        raise ConfigError("[prune] sparsity_estimate must be 'soft' or 'hard-st'")
    if not p.L1 > p.L0:
        raise ConfigError("[prune] L1 must exceed L0")
    if not p.tau > 0:
        raise ConfigError("[prune] tau must be positive")
    if not 0.0 <= p.s_tar < 1.0:
        raise ConfigError("[prune] s_tar must lie in [0, 1)")
    if cfg.distill.mode not in DISTILL_MODES:
        raise ConfigError(f"[distill] mode must be one of {DISTILL_MODES}")
    o = cfg.optim
    if o.step_scaling not in ("none", "proportional"):
        raise ConfigError("[optim] step_scaling must be 'none' or 'proportional'")
    if o.lr <= 0 or o.K_base < 1 or o.dense_steps < 0 or o.batch < 1 or o.crop < 1:
        raise ConfigError("[optim] lr, K_base, batch and crop must be positive")
    factor = 2 ** cfg.codec.num_downsamples
    if o.crop % factor:
        raise ConfigError(f"[optim] crop {o.crop} must be divisible by {factor}")
    d = cfg.data
    if d.source == "synthetic":
        if d.frame_size < o.crop or d.frame_size % factor:
            raise ConfigError(f"[data] frame_size must be >= crop and divisible by {factor}")
        if d.sequence_length < 2 or d.eval_length < 2:
            raise ConfigError("[data] sequences need at least two frames")


def _parse_value(raw: str, typ, where: str):
    raw = raw.strip()
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
        if typ is str:
            return raw
        if typing.get_origin(typ) is tuple:
            return tuple(float(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _section_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (L0, K_base)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown sections {sorted(unknown)}")
    base = ExperimentConfig()
    sections = {}
    for name in SECTIONS:
        current = getattr(base, name)
        if not parser.has_section(name):
            sections[name] = current
            continue
        types = _section_types(type(current))
        values = {}
        for key, raw in parser.items(name):
            if key not in types:
                raise ConfigError(f"{source}: [{name}] unknown key {key!r}")
            values[key] = _parse_value(raw, types[key], f"{source} [{name}] {key}")
        sections[name] = dataclasses.replace(current, **values)
    return ExperimentConfig(**sections)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def render(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
