"""Flat dotted-key experiment configuration.

The on-disk format is structured text, one `key = value` pair per line with
`#` comments, chosen over nested documents so sweep diffs stay one-line.
Validation is fail-fast-all-at-once: every problem in the file is collected
and reported in a single error before any checkpoint or world is touched.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields

from .errors import ConfigError, InvalidParameterError
from .mixtures import resolve_world

ENV_OUT = "GUIDANCELAB_OUT"

GUIDANCE_SWEEP_MODES = ("cfg", "replacement_cfg", "dual_cfg", "dual_replacement_cfg")
METRIC_NAMES = ("sliced_w", "mmd_rbf", "coverage")


def parse_config_text(text: str) -> dict:
    """Dotted-key lines to a string mapping; duplicate keys are an error."""
    out: dict = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {raw!r}")
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            problems.append(f"line {lineno}: empty key")
            continue
        if key in out:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        out[key] = value
    if problems:
        raise ConfigError(problems)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one end-to-end run needs, resolvable up front."""

    world_full: str
    world_narrow: str
    schedule_kind: str
    schedule_T: int
    schedule_beta_min: float
    schedule_beta_max: float
    base_steps: int
    base_batch: int
    base_lr: float
    base_drop_coarse: float
    base_drop_fine: float
    ft_steps: int
    ft_batch: int
    ft_lr: float
    ft_drop_coarse: float
    ft_drop_fine: float
    modes: tuple
    gammas: tuple
    gamma1: float
    gamma2s: tuple
    sampler_steps: int
    n_chains: int
    seeds: tuple
    metrics: tuple = ("sliced_w",)
    include_uncond: bool = False
    out_dir: str = "out"

    def digest(self) -> str:
        payload = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name == "out_dir":
                continue  # output location must not change run identity
            payload.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256("\n".join(payload).encode()).hexdigest()[:12]


# key -> (field, parser); parsers raise ValueError on bad input
def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _bool(v):
    lowered = v.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _str(v):
    if not v:
        raise ValueError("expected a non-empty string")
    return v


def _str_list(v):
    items = tuple(s.strip() for s in v.split(",") if s.strip())
    if not items:
        raise ValueError("expected a comma-separated list")
    return items


def _float_list(v):
    return tuple(float(s) for s in _str_list(v))


def _int_list(v):
    return tuple(int(s) for s in _str_list(v))


KEY_TABLE = {
    "world.full": ("world_full", _str),
    "world.narrow": ("world_narrow", _str),
    "schedule.kind": ("schedule_kind", _str),
    "schedule.T": ("schedule_T", _int),
    "schedule.beta_min": ("schedule_beta_min", _float),
    "schedule.beta_max": ("schedule_beta_max", _float),
    "base.steps": ("base_steps", _int),
    "base.batch": ("base_batch", _int),
    "base.lr": ("base_lr", _float),
    "base.drop_coarse": ("base_drop_coarse", _float),
    "base.drop_fine": ("base_drop_fine", _float),
    "finetune.steps": ("ft_steps", _int),
    "finetune.batch": ("ft_batch", _int),
    "finetune.lr": ("ft_lr", _float),
    "finetune.drop_coarse": ("ft_drop_coarse", _float),
    "finetune.drop_fine": ("ft_drop_fine", _float),
    "sweep.modes": ("modes", _str_list),
    "sweep.gammas": ("gammas", _float_list),
    "sweep.gamma1": ("gamma1", _float),
    "sweep.gamma2s": ("gamma2s", _float_list),
    "sampler.steps": ("sampler_steps", _int),
    "sampler.chains": ("n_chains", _int),
    "seeds": ("seeds", _int_list),
    "metrics": ("metrics", _str_list),
    "include_uncond": ("include_uncond", _bool),
    "out": ("out_dir", _str),
}

OPTIONAL_DEFAULTS = {
    "sweep.gamma1": 1.5,
    "sweep.gamma2s": (3.0, 7.5),
    "metrics": ("sliced_w",),
    "include_uncond": False,
    "out": "out",
}


def config_from_mapping(mapping: dict, base_dir: str = ".") -> ExperimentConfig:
    """Build and fully validate a config; collects every problem at once."""
    problems = []
    values = {}
    for key, raw in mapping.items():
        if key not in KEY_TABLE:
            problems.append(f"unknown key {key!r}")
            continue
        field_name, parser = KEY_TABLE[key]
        try:
            values[field_name] = parser(raw)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    for key, default in OPTIONAL_DEFAULTS.items():
        values.setdefault(KEY_TABLE[key][0], default)
    required = {k for k in KEY_TABLE if k not in OPTIONAL_DEFAULTS}
    for key in sorted(required):
        if KEY_TABLE[key][0] not in values:
            problems.append(f"missing required key {key!r}")
    if problems:
        raise ConfigError(problems)

    # store worlds as preset names or absolute paths so later stages never
    # need to know where the config file lived
    for field_name in ("world_full", "world_narrow"):
        values[field_name] = _resolved_world_path(values[field_name], base_dir)
    cfg = ExperimentConfig(**values)
    _validate(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        mapping = parse_config_text(fh.read())
    return config_from_mapping(mapping, base_dir=os.path.dirname(os.path.abspath(path)))


def _validate(cfg: ExperimentConfig, problems: list) -> None:
    for label, name in (("world.full", cfg.world_full), ("world.narrow", cfg.world_narrow)):
        try:
            resolve_world(name)
        except (InvalidParameterError, OSError, ValueError) as exc:
            problems.append(f"{label}: {exc}")
    if cfg.schedule_kind not in ("linear", "cosine"):
        problems.append(f"schedule.kind: unknown kind {cfg.schedule_kind!r}")
    if cfg.schedule_T < 1:
        problems.append(f"schedule.T: must be >= 1, got {cfg.schedule_T}")
    if not 0 < cfg.schedule_beta_min <= cfg.schedule_beta_max < 1:
        problems.append("schedule.beta_min/beta_max: need 0 < min <= max < 1")
    for label, steps, batch, lr in (
        ("base", cfg.base_steps, cfg.base_batch, cfg.base_lr),
        ("finetune", cfg.ft_steps, cfg.ft_batch, cfg.ft_lr),
    ):
        if steps < 0:
            problems.append(f"{label}.steps: must be >= 0, got {steps}")
        if batch < 1:
            problems.append(f"{label}.batch: must be >= 1, got {batch}")
        if lr <= 0:
            problems.append(f"{label}.lr: must be positive, got {lr}")
    for label, rate in (
        ("base.drop_coarse", cfg.base_drop_coarse),
        ("base.drop_fine", cfg.base_drop_fine),
        ("finetune.drop_coarse", cfg.ft_drop_coarse),
        ("finetune.drop_fine", cfg.ft_drop_fine),
    ):
        if not 0.0 <= rate <= 1.0:
            problems.append(f"{label}: must lie in [0, 1], got {rate}")
    for mode in cfg.modes:
        if mode not in GUIDANCE_SWEEP_MODES:
            problems.append(f"sweep.modes: unknown mode {mode!r}")
    if not cfg.gammas:
        problems.append("sweep.gammas: must be non-empty")
    if not all(g == g and abs(g) != float("inf") for g in cfg.gammas + cfg.gamma2s + (cfg.gamma1,)):
        problems.append("sweep gammas must be finite")
    if not 1 <= cfg.sampler_steps <= cfg.schedule_T:
        problems.append(
            f"sampler.steps: must lie in [1, schedule.T={cfg.schedule_T}], got {cfg.sampler_steps}"
        )
    if cfg.n_chains < 0:
        problems.append(f"sampler.chains: must be >= 0, got {cfg.n_chains}")
    if not cfg.seeds:
        problems.append("seeds: must be non-empty")
    for m in cfg.metrics:
        if m not in METRIC_NAMES:
            problems.append(f"metrics: unknown metric {m!r} (choose from {METRIC_NAMES})")


def _resolved_world_path(name: str, base_dir: str) -> str:
    """Preset names pass through; file paths resolve relative to the config."""
    if name in ("ring8", "narrow2") or os.path.isabs(name):
        return name
    candidate = os.path.join(base_dir, name)
    return candidate if os.path.exists(candidate) else name


def resolve_out_dir(cfg: ExperimentConfig, override: str = None) -> str:
    """CLI flag beats the environment variable beats the config value."""
    if override:
        return override
    return os.environ.get(ENV_OUT, cfg.out_dir)
