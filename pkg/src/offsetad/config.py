"""Run configuration: defaults, YAML files, presets and overrides.

Schema (all keys optional; unknown keys are rejected)::

    seed: 0                  # master seed; every random stream derives from it
    output_dir: runs
    train:   {epochs, batch_size, lr0, replication, beta_range, patches,
              voxel_size, variant, hidden, feature_dim, k}
    bench:   {kind, params, n_points, train_count, test_count,
              anomaly_fraction, test_seed, patches, beta_range, jitter}
    eval:    {pooled_point_auc, sigmas, patch_values, ablate_seeds}

Precedence, lowest first: built-in defaults, preset, config file,
OFFSETAD_OUTPUT_DIR (output_dir only), command-line flags.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .offset_net import TrainConfig
from .scoring import DEFAULT_PATCH_SWEEP, DEFAULT_SIGMAS
from .synth import SynthCategory

OUTPUT_ENV = "OFFSETAD_OUTPUT_DIR"

# full-scale training is far beyond one CPU core; the desk preset keeps
# every other constant and shortens the schedule
PRESETS = {
    "reference": {},
    "desk": {"train": {"epochs": 150, "replication": 4, "batch_size": 4}},
}


class ConfigError(ValueError):
    pass


@dataclass
class EvalOptions:
    pooled_point_auc: bool = True
    sigmas: tuple = DEFAULT_SIGMAS
    patch_values: tuple = DEFAULT_PATCH_SWEEP
    ablate_seeds: tuple = (0,)

    def __post_init__(self):
        self.sigmas = tuple(float(s) for s in self.sigmas)
        self.patch_values = tuple(int(j) for j in self.patch_values)
        self.ablate_seeds = tuple(int(s) for s in self.ablate_seeds)
        if any(s < 0 for s in self.sigmas):
            raise ConfigError("sigmas must be non-negative")
        if not self.ablate_seeds:
            raise ConfigError("ablate_seeds must not be empty")


@dataclass(eq=False)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    train: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def __post_init__(self):
        self.seed = int(self.seed)
        self.output_dir = str(self.output_dir)
        # validate eagerly so bad files fail before any work starts
        self.train_config()
        self.category()
        self.eval_options()

    def train_config(self, **overrides) -> TrainConfig:
        kw = {**self.train, "seed": self.seed, **overrides}
        return _build(TrainConfig, kw, "train")

    def category(self) -> SynthCategory:
        kw = {**self.bench, "seed": self.seed}
        return _build(SynthCategory, kw, "bench")

    def eval_options(self) -> EvalOptions:
        return _build(EvalOptions, dict(self.eval), "eval")

    def __eq__(self, other):
        if not isinstance(other, RunConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        """Fully resolved configuration (every field present)."""
        train = asdict(self.train_config())
        train.pop("seed")
        bench = asdict(self.category())
        bench.pop("seed")
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "train": _plain(train),
            "bench": _plain(bench),
            "eval": _plain(asdict(self.eval_options())),
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, kw, section):
    names = {f.name for f in fields(cls)}
    unknown = set(kw) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from None


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    for section in ("train", "bench", "eval"):
        if data.get(section) is not None and not isinstance(data[section], dict):
            raise ConfigError(f"'{section}' must be a mapping")
    data = {k: (v if v is not None else {}) for k, v in data.items()}
    return RunConfig(**data)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return from_dict(data or {})


def resolve(
    config_path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[dict] = None,
    environ=None,
) -> RunConfig:
    """Layer defaults, preset, file, environment and flag overrides."""
    environ = os.environ if environ is None else environ
    data: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = _merge(data, PRESETS[preset])
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        file_data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(file_data, dict):
            raise ConfigError("configuration must be a mapping")
        data = _merge(data, file_data)
    if environ.get(OUTPUT_ENV):
        data["output_dir"] = environ[OUTPUT_ENV]
    if overrides:
        data = _merge(data, overrides)
    return from_dict(data)
