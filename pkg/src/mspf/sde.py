"""Slow-fast SDEs: brute-force Euler-Maruyama and the macro/micro multiscale scheme.

State arrays are batched over particles: slow ``x`` is ``(n, d_x)`` and fast
``y`` is ``(n, d_y)``. Coefficient callables must broadcast over leading
axes. Diffusion coefficients are diagonal and returned as ``(..., d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from mspf.errors import ContractViolationError, InvalidParameterError, NumericError
from mspf.rng import RandomStream

# keep each block of pre-drawn noise to roughly 8 MB
_NOISE_BLOCK = 2**20


@dataclass(frozen=True)
class SlowFastSde:
    """dX = a(X,Y)dt + b(X)dU,  dY = alpha(X,Y)/eps dt + beta(X,Y)/sqrt(eps) dV."""

    d_x: int
    d_y: int
    a: Callable[[np.ndarray, np.ndarray], np.ndarray]
    b: Callable[[np.ndarray], np.ndarray]
    alpha: Callable[[np.ndarray, np.ndarray], np.ndarray]
    beta: Callable[[np.ndarray, np.ndarray], np.ndarray]
    epsilon: float
    name: str = "sde"
    # optional closed forms, used by oracles and the quadrature filter
    averaged_drift_exact: Callable[[np.ndarray], np.ndarray] | None = None
    fast_log_density: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    fast_support: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if self.d_x < 1 or self.d_y < 1:
            raise InvalidParameterError("dimensions must be positive")


@dataclass(frozen=True)
class MultiscaleConfig:
    """Macro step ``Delta_t``, micro step ``delta_t``, ``M`` micro steps per macro
    step, ``L`` macro steps per observation interval. ``M_weight`` is the length
    of the trajectory generated at observation times for weight averaging.
    ``burn_in=None`` means 10% of the trajectory on cold starts, 0 on warm starts.
    """

    Delta_t: float
    delta_t: float
    M: int
    L: int
    burn_in: int | None = None
    warm_start: bool = True
    M_weight: int | None = None
    y_guard: float = 1e6

    def __post_init__(self):
        if not (self.Delta_t > 0 and self.delta_t > 0):
            raise InvalidParameterError("Delta_t and delta_t must be > 0")
        if self.M < 1 or (self.M_weight is not None and self.M_weight < 1):
            raise InvalidParameterError("M and M_weight must be >= 1")
        if self.L < 1:
            raise InvalidParameterError("L must be >= 1")
        if self.burn_in is not None and self.burn_in < 0:
            raise InvalidParameterError("burn_in must be >= 0")

    @property
    def delta_s(self) -> float:
        return self.L * self.Delta_t

    @property
    def weight_M(self) -> int:
        return self.M if self.M_weight is None else self.M_weight

    def burn(self, n_samples: int, warm: bool) -> int:
        if self.burn_in is not None:
            return self.burn_in
        return 0 if warm else math.ceil(0.1 * n_samples)

    def time_grid(self, s_k: float) -> np.ndarray:
        """Macro times s_k + l*Delta_t for l = 0..L."""
        return s_k + np.arange(self.L + 1) * self.Delta_t


@dataclass
class FastTrajectory:
    """Retained micro-solver states at frozen slow parameter ``x``."""

    x: np.ndarray  # (n, d_x)
    samples: np.ndarray  # (n, M, d_y)
    terminal: np.ndarray  # (n, d_y)

    @property
    def M(self) -> int:
        return self.samples.shape[1]


def n_steps(horizon: float, dt: float) -> int:
    """Number of ``dt`` steps covering ``horizon``; must be an integer."""
    if horizon < 0:
        raise ContractViolationError(f"negative horizon {horizon}")
    steps = int(round(horizon / dt))
    if abs(steps * dt - horizon) > 1e-9 * max(horizon, dt):
        raise ContractViolationError(f"horizon {horizon} is not an integer multiple of step {dt}")
    return steps


def _as_batch(v, d) -> np.ndarray:
    v = np.array(v, dtype=float)
    if v.ndim == 0:
        v = np.full((1, d), float(v))
    elif v.ndim == 1:
        v = v[:, None] if d == 1 else v[None, :]
    return v


def _check_finite(arr, what, x, guard=np.inf):
    if not np.all(np.isfinite(arr)) or np.any(np.abs(arr) > guard):
        raise NumericError(f"{what} blew up near slow state x={np.asarray(x).ravel()[:4]}")


def _noise_blocks(s: RandomStream, steps: int, shape: tuple[int, ...]):
    per = int(np.prod(shape)) or 1
    block = max(1, _NOISE_BLOCK // per)
    done = 0
    while done < steps:
        k = min(block, steps - done)
        yield s.generator.standard_normal((k,) + shape)
        done += k


def step_direct(m: SlowFastSde, x, y, dt: float, s: RandomStream):
    """One Euler-Maruyama step of the coupled system."""
    if not dt > 0:
        raise InvalidParameterError("dt must be > 0")
    x = _as_batch(x, m.d_x)
    y = _as_batch(y, m.d_y)
    noise = s.generator.standard_normal((2, x.shape[0], max(m.d_x, m.d_y)))
    with np.errstate(over="ignore", invalid="ignore"):
        x_new = x + m.a(x, y) * dt + m.b(x) * math.sqrt(dt) * noise[0, :, : m.d_x]
        y_new = (y + m.alpha(x, y) * (dt / m.epsilon)
                 + m.beta(x, y) * math.sqrt(dt / m.epsilon) * noise[1, :, : m.d_y])
    _check_finite(x_new, "direct step", x)
    _check_finite(y_new, "direct step", x)
    return x_new, y_new


def fine_integrate(m: SlowFastSde, x, y, horizon: float, dt: float, s: RandomStream):
    """Brute-force Euler-Maruyama of the full system over ``horizon``."""
    x = _as_batch(x, m.d_x).copy()
    y = _as_batch(y, m.d_y).copy()
    steps = n_steps(horizon, dt)
    sx, sy = math.sqrt(dt), math.sqrt(dt / m.epsilon)
    ry = dt / m.epsilon
    n = x.shape[0]
    d = m.d_x + m.d_y
    with np.errstate(over="ignore", invalid="ignore"):
        for block in _noise_blocks(s, steps, (n, d)):
            for dw in block:
                ax = m.a(x, y)
                y = y + m.alpha(x, y) * ry + m.beta(x, y) * sy * dw[:, m.d_x:]
                x = x + ax * dt + m.b(x) * sx * dw[:, : m.d_x]
            _check_finite(y, "fine integration", x)
            _check_finite(x, "fine integration", x)
    return x, y


def micro_trajectory(
    m: SlowFastSde, x, y0, cfg: MultiscaleConfig, s: RandomStream,
    M: int | None = None, burn_in: int | None = None,
) -> FastTrajectory:
    """Euler-Maruyama of the fast equation with ``x`` frozen.

    Runs ``burn_in + M`` steps of size ``delta_t`` and keeps the last ``M``.
    """
    x = _as_batch(x, m.d_x)
    n = x.shape[0]
    y = np.zeros((n, m.d_y)) if y0 is None else np.broadcast_to(_as_batch(y0, m.d_y), (n, m.d_y)).copy()
    M = cfg.M if M is None else int(M)
    if M < 1:
        raise ContractViolationError("trajectory length M must be >= 1")
    burn = cfg.burn(M, y0 is not None) if burn_in is None else int(burn_in)
    rate = cfg.delta_t / m.epsilon
    scale = math.sqrt(rate)
    samples = np.empty((n, M, m.d_y))
    i = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for block in _noise_blocks(s, burn + M, (n, m.d_y)):
            for dv in block:
                y = y + m.alpha(x, y) * rate + m.beta(x, y) * scale * dv
                if i >= burn:
                    samples[:, i - burn] = y
                i += 1
            _check_finite(y, "micro-solver", x, cfg.y_guard)
    return FastTrajectory(x, samples, y)


def averaged_drift(m: SlowFastSde, x, traj: FastTrajectory) -> np.ndarray:
    """A(x) = (1/M) sum_m a(x, y_m)."""
    x = _as_batch(x, m.d_x)
    vals = m.a(x[:, None, :], traj.samples)
    return np.mean(vals, axis=1)


def macro_step(
    m: SlowFastSde, x, cfg: MultiscaleConfig, s: RandomStream,
    y_carry=None, drift: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, FastTrajectory]:
    """x' = x + A(x) Delta_t + b(x) dW, with A from a frozen-x micro run.

    ``drift`` overrides the estimated A (e.g. with a closed-form average).
    """
    x = _as_batch(x, m.d_x)
    y0 = y_carry if cfg.warm_start else None
    traj = micro_trajectory(m, x, y0, cfg, s.derive(0))
    A = averaged_drift(m, x, traj) if drift is None else drift(x)
    dw = s.derive(1).generator.standard_normal(x.shape)
    x_new = x + A * cfg.Delta_t + m.b(x) * math.sqrt(cfg.Delta_t) * dw
    _check_finite(x_new, "macro-solver", x)
    return x_new, traj


def multiscale_transition(
    m: SlowFastSde, x, cfg: MultiscaleConfig, s: RandomStream,
    y_carry=None, horizon: float | None = None,
    drift: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, FastTrajectory]:
    """Compose macro steps over one observation interval, then run the
    terminal fast trajectory (length ``M_weight``) used for weight averaging."""
    x = _as_batch(x, m.d_x)
    n_macro = cfg.L if horizon is None else n_steps(horizon, cfg.Delta_t)
    carry = y_carry
    macro_streams = s.derive(0)
    for l in range(n_macro):
        x, traj = macro_step(m, x, cfg, macro_streams.derive(l), carry, drift)
        carry = traj.terminal if cfg.warm_start else None
    y0 = carry if cfg.warm_start else None
    terminal = micro_trajectory(m, x, y0, cfg, s.derive(1), M=cfg.weight_M)
    return x, terminal


def averaged_transition(
    m: SlowFastSde, x, Delta_t: float, horizon: float, s: RandomStream,
    drift: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Euler-Maruyama of the effective slow equation with a closed-form averaged drift."""
    drift = m.averaged_drift_exact if drift is None else drift
    if drift is None:
        raise ContractViolationError("model has no closed-form averaged drift")
    x = _as_batch(x, m.d_x)
    steps = n_steps(horizon, Delta_t)
    if steps:
        dw = s.generator.standard_normal((steps,) + x.shape)
        for l in range(steps):
            x = x + drift(x) * Delta_t + m.b(x) * math.sqrt(Delta_t) * dw[l]
    _check_finite(x, "averaged transition", x)
    return x


def sample_fast_equilibrium(m: SlowFastSde, x, s: RandomStream, grid_points: int = 8193) -> np.ndarray:
    """Exact-in-the-grid-limit draws from mu_x by inverse CDF (1-D fast variable)."""
    if m.fast_log_density is None or m.fast_support is None or m.d_y != 1:
        raise ContractViolationError("model has no closed-form one-dimensional fast density")
    x = _as_batch(x, m.d_x)
    t = np.linspace(0.0, 1.0, grid_points)
    u = s.generator.random(len(x))
    out = np.empty(len(x))
    chunk = max(1, 2**22 // grid_points)
    for start in range(0, len(x), chunk):
        xs = x[start:start + chunk]
        lo, hi = m.fast_support(xs)
        y = lo[:, None] + (hi - lo)[:, None] * t
        lm = m.fast_log_density(xs, y)
        dens = np.exp(lm - lm.max(axis=1, keepdims=True))
        cdf = np.concatenate([np.zeros((len(xs), 1)),
                              np.cumsum(0.5 * (dens[:, 1:] + dens[:, :-1]), axis=1)], axis=1)
        cdf /= cdf[:, -1:]
        for j in range(len(xs)):
            out[start + j] = np.interp(u[start + j], cdf[j], y[j])
    return out[:, None]


# ---------------------------------------------------------------- shipped models


def bimodal_sde(epsilon: float = 1e-4) -> SlowFastSde:
    """dX = (Y - X^3)dt + dU,  dY = (2/eps)(X^2 - Y^2)Y dt + eps^{-1/2} dV.

    The frozen-x fast law is mu_x(y) ~ exp(-(x^2 - y^2)^2), even in y, so the
    averaged slow drift is -x^3.
    """
    return SlowFastSde(
        d_x=1, d_y=1,
        a=lambda x, y: y - x**3,
        b=lambda x: np.ones_like(x),
        alpha=lambda x, y: 2.0 * (x * x - y * y) * y,
        beta=lambda x, y: np.ones_like(y),
        epsilon=epsilon,
        name="sde_bimodal",
        averaged_drift_exact=lambda x: -(x**3),
        fast_log_density=lambda x, y: -((x[..., :1] ** 2 - y**2) ** 2),
        fast_support=lambda x: (-(np.abs(x[:, 0]) + 3.5), np.abs(x[:, 0]) + 3.5),
    )


def linear_sde(epsilon: float = 0.1) -> SlowFastSde:
    """dX = (-X + Y)dt + dU,  dY = -(1/eps)(Y - X)dt + eps^{-1/2} dV.

    Frozen-x fast law is N(x, 1/2); averaged drift is 0.
    """
    return SlowFastSde(
        d_x=1, d_y=1,
        a=lambda x, y: -x + y,
        b=lambda x: np.ones_like(x),
        alpha=lambda x, y: -(y - x),
        beta=lambda x, y: np.ones_like(y),
        epsilon=epsilon,
        name="linear_gaussian",
        averaged_drift_exact=lambda x: np.zeros_like(x),
        fast_log_density=lambda x, y: -((y - x[..., :1]) ** 2),
        fast_support=lambda x: (x[:, 0] - 8.0, x[:, 0] + 8.0),
    )
