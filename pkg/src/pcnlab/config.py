"""Experiment configuration: condition presets, scales, file parsing.

The six conditions map to the study protocol:

  c1-det-pc     deterministic discriminative PC, T=13, eta_h=5e-2
  c2-diagnose   inference no-op diagnostic (no training)
  c3-bp-decoder BP encoder then post-hoc decoder, K-way probe on the pair
  c4-bp         BP encoder alone (softmax baseline only)
  c5-langevin   Langevin-trained PC, T=50, eta_h=1e-2, sigma=1e-2,
                eval sigma sweep {0, 1e-3, 1e-2, 1e-1, 1.0}
  c6-mcpc       trajectory-integrated training, M=10, eval sigma {0, 1e-2}

All conditions share AdamW(1e-4, wd 1e-4), batch 128, seed 42, latent
momentum 0.5, evaluation on the leading test records.

Scales trade run length for fidelity (factors documented in SCALES):
`full` is the reference protocol; `desk` fits a CPU half-hour; `ci` is a
smoke-test size. Config files are INI-style flat key-value sections;
CLI flags override file values, which override the preset.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

CONDITIONS = ("c1-det-pc", "c2-diagnose", "c3-bp-decoder", "c4-bp",
              "c5-langevin", "c6-mcpc")
DATA_ROOT_ENV = "PCNLAB_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    condition: str
    epochs: int
    seed: int = 42
    data_source: str = "cifar10"          # "cifar10" | "synthetic"
    data_path: str | None = None           # dataset root (env var fallback)
    subset: int = 50000                    # training records used
    eval_n: int = 1280                     # leading test records evaluated
    batch_size: int = 128
    steps: int = 13                        # settle steps T
    eta_h: float = 5e-2                    # latent learning rate
    latent_momentum: float = 0.5
    eta_w: float = 1e-4                    # AdamW learning rate
    weight_decay: float = 1e-4
    sigma_train: float = 0.0
    eval_sigmas: tuple = (0.0,)
    mcpc_m: int = 10
    epochs_decoder: int = 5                # c3 second phase
    checkpoint_epochs: tuple = ()          # () -> final epoch only
    out_dir: str = "runs/out"
    scale: str = "full"
    deterministic: bool = True
    checkpoint: str | None = None          # c2: model to diagnose

    def resolved_data_path(self) -> str | None:
        return self.data_path or os.environ.get(DATA_ROOT_ENV)

    def flat(self) -> dict:
        d = dataclasses.asdict(self)
        d["eval_sigmas"] = ",".join(repr(s) for s in self.eval_sigmas)
        d["checkpoint_epochs"] = ",".join(str(e) for e in self.checkpoint_epochs)
        return d


# full-scale presets pin the reference protocol values per condition
PRESETS = {
    "c1-det-pc": dict(epochs=25, steps=13, eta_h=5e-2, sigma_train=0.0,
                      eval_sigmas=(0.0,), checkpoint_epochs=(5, 10, 15, 20, 25)),
    "c2-diagnose": dict(epochs=0, steps=13, eta_h=5e-2, sigma_train=0.0,
                        eval_sigmas=(0.0,)),
    "c3-bp-decoder": dict(epochs=5, epochs_decoder=5, steps=13, eta_h=5e-2,
                          sigma_train=0.0, eval_sigmas=(0.0,)),
    "c4-bp": dict(epochs=25, steps=13, eta_h=5e-2, sigma_train=0.0,
                  eval_sigmas=(0.0,), checkpoint_epochs=(5, 10, 15, 20, 25)),
    "c5-langevin": dict(epochs=10, steps=50, eta_h=1e-2, sigma_train=1e-2,
                        eval_sigmas=(0.0, 1e-3, 1e-2, 1e-1, 1.0)),
    "c6-mcpc": dict(epochs=10, steps=50, eta_h=1e-2, sigma_train=1e-2,
                    eval_sigmas=(0.0, 1e-2), mcpc_m=10),
}

# scale -> condition -> overrides; keys absent fall through to the preset.
# desk: 10k-image training subset at full eval width for the deterministic
# conditions; the T=50 sigma-sweep conditions halve subset and eval width
# to stay inside a CPU half-hour. c3 keeps the full protocol (it is already
# desk-sized). ci: smoke-test sizes for fast pipelines.
SCALES = {
    "full": {},
    "desk": {
        "c1-det-pc": dict(subset=10000, epochs=3, checkpoint_epochs=(1, 2, 3)),
        "c2-diagnose": dict(subset=10000),
        "c3-bp-decoder": dict(subset=50000),
        "c4-bp": dict(subset=10000, epochs=5, checkpoint_epochs=(1, 2, 3, 4, 5)),
        "c5-langevin": dict(subset=5000, epochs=2, eval_n=640),
        "c6-mcpc": dict(subset=5000, epochs=2, eval_n=640),
    },
    "ci": {
        "c1-det-pc": dict(subset=1024, epochs=1, eval_n=256, checkpoint_epochs=(1,)),
        "c2-diagnose": dict(subset=1024, eval_n=256),
        "c3-bp-decoder": dict(subset=1024, epochs=1, epochs_decoder=1, eval_n=256),
        "c4-bp": dict(subset=1024, epochs=1, eval_n=256, checkpoint_epochs=(1,)),
        "c5-langevin": dict(subset=1024, epochs=1, eval_n=256, steps=10),
        "c6-mcpc": dict(subset=1024, epochs=1, eval_n=256, steps=10, mcpc_m=3),
    },
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_INT_FIELDS = {"epochs", "seed", "subset", "eval_n", "batch_size", "steps",
               "mcpc_m", "epochs_decoder"}
_FLOAT_FIELDS = {"eta_h", "latent_momentum", "eta_w", "weight_decay", "sigma_train"}
_BOOL_FIELDS = {"deterministic"}


def _coerce(key: str, value):
    if key in _INT_FIELDS:
        return int(value)
    if key in _FLOAT_FIELDS:
        return float(value)
    if key in _BOOL_FIELDS:
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if key == "eval_sigmas":
        if isinstance(value, str):
            return tuple(float(s) for s in value.split(",") if s.strip() != "")
        return tuple(float(s) for s in value)
    if key == "checkpoint_epochs":
        if isinstance(value, str):
            return tuple(int(s) for s in value.split(",") if s.strip() != "")
        return tuple(int(s) for s in value)
    return value


def parse_config_file(path: str) -> dict:
    """INI sections of flat keys; section names are organisational only."""
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    flat = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key '{key}' in [{section}]")
            flat[key] = value
    return flat


def build_config(condition: str, scale: str = "full", file_values: dict | None = None,
                 overrides: dict | None = None) -> ExperimentConfig:
    """Preset < scale < config file < CLI overrides, then validate."""
    if condition not in CONDITIONS:
        raise ConfigError(f"unknown condition '{condition}' (expected one of {CONDITIONS})")
    if scale not in SCALES:
        raise ConfigError(f"unknown scale '{scale}' (expected one of {tuple(SCALES)})")
    values = dict(condition=condition, scale=scale)
    values.update(PRESETS[condition])
    values.update(SCALES[scale].get(condition, {}))
    for source in (file_values or {}), (overrides or {}):
        for key, val in source.items():
            if val is None:
                continue
            if key in ("condition", "scale"):
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key '{key}'")
            values[key] = _coerce(key, val)
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Reject invalid flag combinations before any work starts."""
    if cfg.condition not in CONDITIONS:
        raise ConfigError(f"unknown condition '{cfg.condition}'")
    if cfg.data_source not in ("cifar10", "synthetic"):
        raise ConfigError(f"unknown data source '{cfg.data_source}'")
    if cfg.epochs < 0 or cfg.epochs_decoder < 0:
        raise ConfigError("epochs must be >= 0")
    if cfg.condition != "c2-diagnose" and cfg.epochs == 0:
        raise ConfigError(f"{cfg.condition} requires epochs >= 1")
    if cfg.steps < 0:
        raise ConfigError("settle steps must be >= 0")
    if cfg.eta_h <= 0 or cfg.eta_w <= 0:
        raise ConfigError("learning rates must be positive")
    if cfg.sigma_train < 0 or any(s < 0 for s in cfg.eval_sigmas):
        raise ConfigError("noise levels must be >= 0")
    if not cfg.eval_sigmas:
        raise ConfigError("eval_sigmas must not be empty")
    if cfg.condition == "c4-bp" and any(s > 0 for s in cfg.eval_sigmas):
        raise ConfigError("c4-bp has no inference loop; eval sigmas must be 0")
    if cfg.condition == "c6-mcpc" and not (1 <= cfg.mcpc_m <= max(cfg.steps, 1)):
        raise ConfigError(f"mcpc_m must be in [1, steps={cfg.steps}]")
    if cfg.batch_size < 1 or cfg.subset < 1 or cfg.eval_n < 1:
        raise ConfigError("sizes must be >= 1")
    if cfg.checkpoint is not None and cfg.condition != "c2-diagnose":
        raise ConfigError("--checkpoint is only meaningful for c2-diagnose")
    if cfg.checkpoint_epochs and max(cfg.checkpoint_epochs) > cfg.epochs:
        raise ConfigError("checkpoint epoch beyond the final epoch")
