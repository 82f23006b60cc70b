"""Flat ``key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Lists (``variants``) are comma separated. Every key not listed in
``KEYS`` is rejected.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from mspf.errors import ConfigError
from mspf.filtering import VARIANTS

log = logging.getLogger(__name__)

MODELS = ("sde_bimodal", "jump_chemical", "linear_gaussian")


@dataclass
class ExperimentConfig:
    model: str
    seed: int = 1
    out_dir: str = "runs/out"
    variants: tuple[str, ...] = ()
    n_particles: int = 1000
    resample_threshold: float = 1.0
    resampling: str = "multinomial"
    obs_std: float = 0.1
    Delta_s: float = 1.0
    n_obs: int = 20
    observe_at_zero: bool = False
    # SDE
    epsilon: float = 1e-4
    Delta_t: float = 1e-2
    delta_t: float = 1e-6
    M: int = 1000
    M_weight: int | None = None
    L: int | None = None
    burn_in: int | None = None
    warm_start: bool = True
    # jump
    rate_scale: float = 1.0
    T_f: float = 1e-4
    T_weight: float | None = None
    M_s: int = 10_000
    burn_frac: float = 0.1
    cost_budget: float = 5e9
    # reporting and diagnostics
    record_wall_clock: bool = False
    replications: int = 200
    diagnose_particles: int = 100
    obs_path: str | None = None
    truth_path: str | None = None
    source: str | None = field(default=None, compare=False)

    def echo(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("source")
        out["variants"] = list(self.variants)
        return out


# model-specific defaults; anything not listed falls back to the dataclass default
MODEL_DEFAULTS = {
    "sde_bimodal": dict(
        variants=("standard", "multiscale"), n_particles=1000, obs_std=0.1, Delta_s=1.0,
        n_obs=20, epsilon=1e-4, Delta_t=1e-2, delta_t=1e-6, M=1000, M_weight=10_000,
    ),
    "jump_chemical": dict(
        variants=("averaged", "multiscale"), n_particles=1000, obs_std=5.0, Delta_s=1.0,
        n_obs=10, observe_at_zero=True, rate_scale=1.0, T_f=1e-4, M_s=10_000,
    ),
    "linear_gaussian": dict(
        variants=("standard",), n_particles=10_000, obs_std=0.5, Delta_s=0.5, n_obs=10,
        epsilon=0.1, Delta_t=0.01, delta_t=0.01, M=100, replications=20,
    ),
}

_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name != "source"}
KEYS = tuple(_FIELDS)

_INT = {"seed", "n_particles", "n_obs", "M", "M_weight", "L", "burn_in", "M_s", "replications",
        "diagnose_particles"}
_FLOAT = {"resample_threshold", "obs_std", "Delta_s", "epsilon", "Delta_t", "delta_t",
          "rate_scale", "T_f", "T_weight", "burn_frac", "cost_budget"}
_BOOL = {"observe_at_zero", "warm_start", "record_wall_clock"}
_OPTIONAL = {"M_weight", "L", "burn_in", "T_weight", "obs_path", "truth_path"}


def _convert(key: str, raw: str, where: str):
    if key in _OPTIONAL and raw.lower() in ("", "none"):
        return None
    try:
        if key in _INT:
            value = float(raw) if any(c in raw for c in ".eE") else int(raw)
            if isinstance(value, float):
                if not value.is_integer():
                    raise ValueError
                value = int(value)
            return value
        if key in _FLOAT:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: {key} expects a number, got {raw!r}") from None
    if key in _BOOL:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{where}: {key} expects true/false, got {raw!r}")
    if key == "variants":
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    return raw


def parse_text(text: str, source: str = "<string>") -> ExperimentConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _convert(key, raw, where)
    if "model" not in values:
        raise ConfigError(f"{source}: missing required key 'model'")
    return build_config(values, source)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(path.read_text(), str(path))


def build_config(values: dict, source: str | None = None) -> ExperimentConfig:
    model = values.get("model")
    if model not in MODELS:
        raise ConfigError(f"model: unknown model {model!r}; expected one of {', '.join(MODELS)}")
    merged = dict(MODEL_DEFAULTS[model])
    merged.update(values)
    cfg = ExperimentConfig(**merged)
    cfg.source = source
    validate(cfg)
    return cfg


def replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    out = dataclasses.replace(cfg, **changes)
    validate(out)
    return out


def _near_integer(r: float) -> bool:
    return abs(r - round(r)) <= 1e-9 * max(1.0, abs(r))


def validate(cfg: ExperimentConfig) -> None:
    def need(cond, name, msg):
        if not cond:
            raise ConfigError(f"{name}: {msg}")

    need(0 <= cfg.seed < 2**64, "seed", "must be an unsigned 64-bit integer")
    need(cfg.n_particles >= 1, "n_particles", "must be positive")
    need(0.0 <= cfg.resample_threshold <= 1.0, "resample_threshold", "must lie in [0, 1]")
    need(cfg.resampling in ("multinomial", "systematic"), "resampling",
         "must be multinomial or systematic")
    need(cfg.obs_std > 0 and math.isfinite(cfg.obs_std), "obs_std", "must be positive and finite")
    need(cfg.Delta_s > 0, "Delta_s", "must be positive")
    need(cfg.n_obs >= 1, "n_obs", "must be positive")
    need(len(cfg.variants) >= 1, "variants", "at least one variant required")
    for v in cfg.variants:
        need(v in VARIANTS, "variants", f"unknown variant {v!r}")
    need(len(set(cfg.variants)) == len(cfg.variants), "variants", "duplicate variant")
    need(cfg.replications >= 2, "replications", "need at least two")
    need(cfg.diagnose_particles >= 1, "diagnose_particles", "must be positive")
    if cfg.model == "jump_chemical":
        need("rao_blackwell" not in cfg.variants, "variants",
             "rao_blackwell needs an analytic fast measure; not available for jump_chemical")
        need(cfg.rate_scale > 0, "rate_scale", "must be positive")
        need(cfg.T_f > 0, "T_f", "must be positive")
        need(cfg.T_weight is None or cfg.T_weight > 0, "T_weight", "must be positive")
        need(cfg.M_s >= 1, "M_s", "must be positive")
        need(0 <= cfg.burn_frac < 1, "burn_frac", "must lie in [0, 1)")
        need(cfg.cost_budget > 0, "cost_budget", "must be positive")
        return
    need(cfg.epsilon > 0, "epsilon", "must be positive")
    need(cfg.Delta_t > 0, "Delta_t", "must be positive")
    need(cfg.delta_t > 0, "delta_t", "must be positive")
    need(cfg.M >= 1, "M", "must be positive")
    need(cfg.M_weight is None or cfg.M_weight >= 1, "M_weight", "must be positive")
    need(cfg.burn_in is None or cfg.burn_in >= 0, "burn_in", "must be non-negative")
    if cfg.L is None:
        ratio = cfg.Delta_s / cfg.Delta_t
        need(_near_integer(ratio), "Delta_t",
             f"Delta_s = {cfg.Delta_s} is not an integer multiple of Delta_t = {cfg.Delta_t}")
    else:
        need(cfg.L >= 1, "L", "must be positive")
        need(math.isclose(cfg.L * cfg.Delta_t, cfg.Delta_s, rel_tol=1e-9),
             "L, Delta_t, Delta_s",
             f"L * Delta_t = {cfg.L * cfg.Delta_t:g} differs from Delta_s = {cfg.Delta_s:g}")
    need(_near_integer(cfg.Delta_t / cfg.delta_t), "delta_t",
         f"Delta_t = {cfg.Delta_t} is not an integer multiple of delta_t = {cfg.delta_t}")
    if cfg.model == "sde_bimodal" and cfg.delta_t / cfg.epsilon > cfg.Delta_t / 10:
        log.warning("delta_t/epsilon = %g exceeds Delta_t/10 = %g; micro steps are coarse",
                    cfg.delta_t / cfg.epsilon, cfg.Delta_t / 10)


def macro_steps(cfg: ExperimentConfig) -> int:
    return cfg.L if cfg.L is not None else int(round(cfg.Delta_s / cfg.Delta_t))
