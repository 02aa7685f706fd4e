"""Run configuration: typed defaults, TOML loading with strict key checking,
named presets and the FIDGP_SEED override."""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TASKS = ("regression1d", "toy_classification")


@dataclass
class DataConfig:
    n_per_cluster: int = 100
    n_grid: int = 200
    n_train: int = 500
    n_test: int = 500
    n_ood: int = 500


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [100, 100, 100])
    bayesian_layers: object = "all"
    inducing: list = field(default_factory=lambda: [64, 64])
    clamp_inducing: bool = True
    whitened_u: bool = True
    lambda_init: float = 0.001
    lambda_max: float = 0.03
    prior_sd: float = 1.0
    max_std_u: float = 0.1
    init_std_u: float = 0.01
    cache_cholesky: bool = True
    lengthscale: float = 1.0
    sqrt_width_scaling: bool = True
    zero_init: bool = False
    noise_std: float = 0.1
    label_smoothing: float = 0.05


@dataclass
class FlowConfig:
    depth: int = 4
    hidden: int = 32
    s_cap: float = 2.0
    power_iters: int = 1
    kl_prior: str = "normal"


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 200
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    kl_warmup_frac: float = 0.1
    train_samples: int = 1
    test_samples: int = 8
    sampling_mode: str = "reparam"


@dataclass
class OodConfig:
    key_layers: list = field(default_factory=lambda: [1, 3])
    lambda_proj: float = 1e-3
    loss_mode: str = "pseudo_label"
    n_probe: int = 1024
    n_E: int = 32


@dataclass
class RunConfig:
    seed: int = 42
    task: str = "regression1d"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ood: OodConfig = field(default_factory=OodConfig)

    def validate(self):
        m, t = self.model, self.train
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 0 < m.lambda_init <= m.lambda_max < 1:
            raise ConfigError("need 0 < model.lambda_init <= model.lambda_max < 1")
        if t.train_samples < 1 or t.test_samples < 1:
            raise ConfigError("train.train_samples and train.test_samples must be at least 1")
        if t.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train.optimizer must be 'adam' or 'sgd', got {t.optimizer!r}")
        if t.sampling_mode not in ("reparam", "matheron", "mean"):
            raise ConfigError(f"unknown train.sampling_mode {t.sampling_mode!r}")
        if self.flow.kl_prior not in ("normal", "flow"):
            raise ConfigError(f"flow.kl_prior must be 'normal' or 'flow', got {self.flow.kl_prior!r}")
        if len(m.inducing) != 2 or min(m.inducing) < 1:
            raise ConfigError("model.inducing must be [M_out, M_in] with positive entries")
        if not 0 <= t.kl_warmup_frac <= 1:
            raise ConfigError("train.kl_warmup_frac must lie in [0, 1]")
        if self.ood.lambda_proj < 0:
            raise ConfigError("ood.lambda_proj must be nonnegative")
        if self.ood.loss_mode not in ("pseudo_label", "uniform", "activation"):
            raise ConfigError(f"unknown ood.loss_mode {self.ood.loss_mode!r}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def flat(self):
        return flatten(self.to_dict())


def flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(default, value, key):
    if key == "model.bayesian_layers":
        ok = value == "all" or (isinstance(value, list) and all(isinstance(i, int) for i in value))
        if not ok:
            raise ConfigError(f"{key}: expected \"all\" or a list of layer indices, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list, got {value!r}")
    return list(value) if isinstance(value, (list, tuple)) else value


def apply_overrides(cfg: RunConfig, flat: dict) -> RunConfig:
    """Set dotted keys on a config; unknown keys are an error."""
    known = cfg.flat()
    for key, value in flat.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        parts = key.split(".")
        target = cfg
        for p in parts[:-1]:
            target = getattr(target, p)
        setattr(target, parts[-1], _coerce(known[key], value, key))
    return cfg


PRESETS = {
    "A": {
        "task": "regression1d",
        "model.inducing": [64, 64],
        "model.lambda_max": 0.08,
        "model.prior_sd": 0.5,
        "model.max_std_u": 0.3,
        "model.init_std_u": 0.03,
        "train.epochs": 2000,
        "train.test_samples": 100,
    },
    "B": {
        "task": "regression1d",
        "model.inducing": [32, 32],
        "model.lambda_max": 0.05,
        "model.prior_sd": 0.3,
        "model.max_std_u": 0.3,
        "model.init_std_u": 0.03,
        "train.epochs": 2000,
        "train.test_samples": 100,
    },
    "ood": {
        "task": "toy_classification",
        "model.inducing": [32, 32],
        "train.epochs": 100,
        "train.batch_size": 100,
        "ood.loss_mode": "activation",
    },
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return apply_overrides(RunConfig(), PRESETS[name]).validate()


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    flat = flatten(raw)
    cfg = base or RunConfig()
    if "preset" in flat:
        cfg = preset(flat.pop("preset"))
    return apply_overrides(cfg, flat).validate()


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def seed_override(cfg: RunConfig, environ=None) -> RunConfig:
    env = os.environ if environ is None else environ
    val = env.get("FIDGP_SEED")
    if val is not None and val != "":
        try:
            cfg.seed = int(val)
        except ValueError:
            raise ConfigError(f"FIDGP_SEED must be an integer, got {val!r}") from None
    return cfg


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r}")


def dumps(cfg: RunConfig) -> str:
    """Render a config as TOML that :func:`loads` reads back unchanged."""
    d = cfg.to_dict()
    lines = []
    for k, v in d.items():
        if not isinstance(v, dict):
            lines.append(f"{k} = {_toml_value(v)}")
    for k, v in d.items():
        if isinstance(v, dict):
            lines.append("")
            lines.append(f"[{k}]")
            lines.extend(f"{kk} = {_toml_value(vv)}" for kk, vv in v.items())
    return "\n".join(lines) + "\n"
