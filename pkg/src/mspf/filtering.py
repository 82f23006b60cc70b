"""Particle-filter engine shared by the standard, averaged, Rao-Blackwellized
and multiscale variants.

All weights live in log space. A weight evaluation returns, per particle, the
log of the (possibly averaged) likelihood and for each test function the
likelihood-weighted local mean of ``f`` over that particle's fast samples, so
that ``[S^M fg] = [S^M g] * local_mean`` never has to be formed in linear
space.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.special import logsumexp

from mspf.errors import (
    ContractViolationError,
    FilterCollapseError,
    InvalidParameterError,
    NumericError,
)
from mspf.observations import GaussianObservation, ObservationSequence, fmt
from mspf.rng import RandomStream

VARIANTS = ("standard", "averaged", "rao_blackwell", "multiscale")
# stable stream ids so a variant's output does not depend on which others run
VARIANT_IDS = {name: i for i, name in enumerate(VARIANTS)}
# variants whose resampling uses the marginal over slow states only
MARGINAL_VARIANTS = ("rao_blackwell", "multiscale")

TestFunctions = dict[str, Callable[[np.ndarray], np.ndarray]]


@dataclass
class WeightedEnsemble:
    """Particles of the discrete measure Psi^n_k.

    ``slow`` is ``(n, d_s)``. ``carry`` holds per-particle state that is not
    weighted but must follow the particle through resampling (the fast state
    for the fine integrator, or a warm-start value). ``fast`` is the
    attachment used by the last weight update: ``(n, d_f)`` for a single
    fast sample, ``(n, M, d_f)`` for a trajectory, ``None`` otherwise.
    """

    slow: np.ndarray
    log_weights: np.ndarray
    carry: np.ndarray | None = None
    fast: np.ndarray | None = None
    step_index: int = 0

    def __post_init__(self):
        self.slow = np.asarray(self.slow)
        if self.slow.ndim == 1:
            self.slow = self.slow[:, None]
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.slow.shape[0] < 1 or self.log_weights.shape != (self.slow.shape[0],):
            raise ContractViolationError("need n >= 1 particles with one log-weight each")

    @property
    def n(self) -> int:
        return self.slow.shape[0]

    def normalized_weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights, self.step_index)


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int
    delta_s: float
    variant: str = "standard"
    n_observations: int | None = None
    resample_threshold: float = 1.0
    resampling: str = "multinomial"

    def __post_init__(self):
        if self.n_particles < 1:
            raise InvalidParameterError("n_particles must be >= 1")
        if not self.delta_s > 0:
            raise InvalidParameterError("delta_s must be > 0")
        if self.variant not in VARIANTS:
            raise InvalidParameterError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0 < self.resample_threshold <= 1:
            raise InvalidParameterError("resample_threshold must lie in (0, 1]")
        if self.resampling not in ("multinomial", "systematic"):
            raise InvalidParameterError(f"unknown resampling scheme {self.resampling!r}")


@dataclass
class Prediction:
    slow: np.ndarray
    carry: np.ndarray | None
    fast: np.ndarray | None


@dataclass
class WeightEvaluation:
    log_weight: np.ndarray
    local_means: dict[str, np.ndarray]
    # individual log g evaluations, (n,) or (n, M); None for exact integration
    log_evaluations: np.ndarray | None = None

    def fg(self, name: str) -> np.ndarray:
        """The per-particle numerator, e.g. ``[S^M fg]``, in linear space."""
        return np.exp(self.log_weight) * self.local_means[name]


class TransitionSampler(Protocol):
    def __call__(self, slow, carry, horizon: float, s: RandomStream) -> Prediction: ...


class WeightUpdater(Protocol):
    def __call__(self, pred: Prediction, z: np.ndarray) -> WeightEvaluation: ...


@dataclass
class StepDiagnostics:
    step: int
    time: float
    estimates: dict[str, float]
    ess: float
    ess_pooled: float
    n_particles: int
    n_evaluations: int
    log_mean_weight: float
    resampled: bool
    wall_ms: float


@dataclass
class FilterOutput:
    variant: str
    steps: list[StepDiagnostics] = field(default_factory=list)
    wall_ms: float = 0.0

    @property
    def f_names(self) -> list[str]:
        return list(self.steps[0].estimates) if self.steps else []

    def estimates(self, name: str) -> np.ndarray:
        return np.array([st.estimates[name] for st in self.steps])

    def ess(self) -> np.ndarray:
        return np.array([st.ess for st in self.steps])

    def ess_pooled(self) -> np.ndarray:
        return np.array([st.ess_pooled for st in self.steps])

    def times(self) -> np.ndarray:
        return np.array([st.time for st in self.steps])

    def estimate_rows(self, include_wall: bool = False):
        for st in self.steps:
            for name, value in st.estimates.items():
                wall = fmt(st.wall_ms) if include_wall else ""
                yield [str(st.step), fmt(st.time), self.variant, name, fmt(value),
                       fmt(st.ess), str(st.n_particles), wall]

    def ess_rows(self):
        for st in self.steps:
            yield [str(st.step), fmt(st.time), self.variant, fmt(st.ess), fmt(st.ess_pooled),
                   str(st.n_particles), str(st.n_evaluations), fmt(st.log_mean_weight),
                   str(int(st.resampled))]


ESTIMATE_HEADER = ["step", "time", "variant", "f_name", "estimate", "ess", "n_particles", "wall_ms"]
ESS_HEADER = ["step", "time", "variant", "ess", "ess_pooled", "n_particles", "n_evaluations",
              "log_mean_weight", "resampled"]


def write_outputs_csv(path, outputs, include_wall=False):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ESTIMATE_HEADER)
        for out in outputs:
            writer.writerows(out.estimate_rows(include_wall))


def write_ess_csv(path, outputs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ESS_HEADER)
        for out in outputs:
            writer.writerows(out.ess_rows())


# ---------------------------------------------------------------- weights


def _local_means(full, fs: TestFunctions, log_g=None) -> dict[str, np.ndarray]:
    if log_g is None:
        return {name: np.asarray(f(full), dtype=float) for name, f in fs.items()}
    rel = np.exp(log_g - np.max(log_g, axis=-1, keepdims=True))
    rel /= rel.sum(axis=-1, keepdims=True)
    return {name: np.sum(rel * f(full), axis=-1) for name, f in fs.items()}


def point_weight(full_state, z, obs: GaussianObservation) -> np.ndarray:
    """log g(x', y', z) for particles carrying exactly one fast sample."""
    full_state = np.asarray(full_state)
    if full_state.ndim != 2:
        raise ContractViolationError(
            f"point weights need one fast sample per particle, got state shape {full_state.shape}"
        )
    return obs.log_likelihood(full_state, z)


def point_weight_evaluation(full_state, z, obs, fs: TestFunctions) -> WeightEvaluation:
    lw = point_weight(full_state, z, obs)
    return WeightEvaluation(lw, _local_means(full_state, fs), lw)


def averaged_weight(full_traj, z, obs: GaussianObservation, fs: TestFunctions) -> WeightEvaluation:
    """Trajectory-averaged weight: log (1/M) sum_m g(x', y_m, z) and the
    g-weighted local mean of each test function over the trajectory."""
    full_traj = np.asarray(full_traj)
    if full_traj.ndim != 3 or full_traj.shape[1] < 1:
        raise ContractViolationError(
            f"averaged weights need a non-empty (n, M, d) trajectory, got {full_traj.shape}"
        )
    log_g = obs.log_likelihood(full_traj, z)
    log_avg = logsumexp(log_g, axis=1) - np.log(full_traj.shape[1])
    return WeightEvaluation(log_avg, _local_means(full_traj, fs, log_g), log_g)


def _simpson_log_weights(n_points: int) -> np.ndarray:
    c = np.ones(n_points)
    c[1:-1:2] = 4.0
    c[2:-1:2] = 2.0
    return np.log(c / 3.0)


def quadrature_weight(
    slow,
    z,
    obs: GaussianObservation,
    log_mu: Callable[[np.ndarray, np.ndarray], np.ndarray],
    assemble: Callable[[np.ndarray, np.ndarray], np.ndarray],
    fs: TestFunctions,
    support: tuple[np.ndarray, np.ndarray],
    rtol: float = 1e-9,
    min_level: int = 8,
    max_level: int = 16,
) -> WeightEvaluation:
    """Integrate the likelihood over the fast equilibrium measure.

    ``log_mu(slow (n, d_x), y (n, G))`` is the unnormalized log density of the
    one-dimensional fast variable; it is normalized here. Composite Simpson
    rules on ``[lo, hi]`` are refined by grid doubling until successive
    results agree to ``rtol``.
    """
    slow = np.asarray(slow, dtype=float)
    if slow.ndim == 1:
        slow = slow[:, None]
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (slow.shape[0],)) for b in support)
    if np.any(hi <= lo):
        raise ContractViolationError("quadrature support must have hi > lo")
    prev = None
    achieved = np.inf
    for level in range(min_level, max_level + 1):
        n_pts = 2**level + 1
        t = np.linspace(0.0, 1.0, n_pts)
        y = lo[:, None] + (hi - lo)[:, None] * t
        lm = log_mu(slow, y)
        if not np.all(np.isfinite(lm)):
            raise NumericError("fast equilibrium log-density is not finite on the support")
        lsw = _simpson_log_weights(n_pts)
        log_norm = logsumexp(lm + lsw, axis=1)
        full = assemble(slow, y[..., None])
        lg = obs.log_likelihood(full, z)
        log_joint = lm + lg + lsw
        log_mug = logsumexp(log_joint, axis=1) - log_norm
        means = _local_means(full, fs, log_joint)
        current = np.concatenate([log_mug[:, None]] + [means[k][:, None] for k in fs], axis=1)
        if prev is not None:
            achieved = float(np.max(np.abs(current - prev) / (1.0 + np.abs(current))))
            if achieved <= rtol:
                return WeightEvaluation(log_mug, means, None)
        prev = current
    raise NumericError(
        f"quadrature did not reach rtol={rtol:g} at level {max_level}; achieved {achieved:.3g}"
    )


# ---------------------------------------------------------------- ensemble ops


def normalize_log_weights(log_w, step=None) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    finite = np.isfinite(log_w)
    if np.any(np.isnan(log_w)) or np.any(log_w == np.inf):
        raise NumericError(f"invalid log-weights at step {step}")
    if not finite.any():
        raise FilterCollapseError(step)
    w = np.exp(log_w - np.max(log_w[finite]))
    return w / w.sum()


def effective_sample_size(log_w, step=None) -> float:
    """n / (1 + C^2), C the coefficient of variation of the weights.

    A 2-D array ``(n, M)`` of individual weight evaluations is pooled over
    all ``n*M`` entries while the numerator stays ``n``.
    """
    log_w = np.asarray(log_w, dtype=float)
    n = log_w.shape[0]
    flat = log_w.reshape(-1)
    if np.any(np.isnan(flat)) or np.any(flat == np.inf):
        raise NumericError(f"invalid log-weights at step {step}")
    if not np.isfinite(flat).any():
        raise FilterCollapseError(step)
    w = np.exp(flat - np.max(flat))
    m1 = w.mean()
    c2 = max(np.mean(w * w) / (m1 * m1) - 1.0, 0.0)
    return n / (1.0 + c2)


def estimate(log_weights, local_means: dict[str, np.ndarray], step=None) -> dict[str, float]:
    """W f / W 1 for every test function."""
    w = normalize_log_weights(log_weights, step)
    return {name: float(np.dot(w, vals)) for name, vals in local_means.items()}


def resample_indices(log_w, s: RandomStream, n_out: int, method: str = "multinomial", step=None):
    w = normalize_log_weights(log_w, step)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    if method == "multinomial":
        u = s.generator.random(n_out)
    elif method == "systematic":
        u = (s.generator.random() + np.arange(n_out)) / n_out
    else:
        raise InvalidParameterError(f"unknown resampling scheme {method!r}")
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(w) - 1)


def resample_multinomial(
    e: WeightedEnsemble, s: RandomStream, n_out: int | None = None,
    marginal: bool = False, method: str = "multinomial",
) -> WeightedEnsemble:
    """Draw ``n_out`` particles i.i.d. proportional to their weights.

    With ``marginal=True`` only slow states (and carry) are kept, which is
    the marginal-density resampling of the averaged-weight filters.
    """
    n_out = e.n if n_out is None else int(n_out)
    if n_out < 1:
        raise InvalidParameterError("n_out must be positive")
    idx = resample_indices(e.log_weights, s, n_out, method, e.step_index)
    return WeightedEnsemble(
        slow=e.slow[idx],
        log_weights=np.zeros(n_out),
        carry=None if e.carry is None else e.carry[idx],
        fast=None if marginal or e.fast is None else e.fast[idx],
        step_index=e.step_index,
    )


# ---------------------------------------------------------------- filter loop


def filter_step(
    e: WeightedEnsemble,
    z,
    t: float,
    ts: TransitionSampler,
    wu: WeightUpdater,
    cfg: FilterConfig,
    s: RandomStream,
    horizon: float | None = None,
) -> tuple[WeightedEnsemble, StepDiagnostics]:
    """One prediction/update/resample cycle, taking step k-1 to step k."""
    k = e.step_index + 1
    start = time.perf_counter()
    horizon = cfg.delta_s if horizon is None else horizon
    try:
        pred = ts(e.slow, e.carry, horizon, s.derive(0))
        wev = wu(pred, z)
        log_w = e.log_weights + wev.log_weight
        est = estimate(log_w, wev.local_means, k)
        ess = effective_sample_size(log_w, k)
        if wev.log_evaluations is None or wev.log_evaluations.ndim == 1:
            ess_pooled, n_evals = ess, e.n
        else:
            ess_pooled = effective_sample_size(e.log_weights[:, None] + wev.log_evaluations, k)
            n_evals = wev.log_evaluations.size
    except (FilterCollapseError, NumericError) as err:
        if isinstance(err, FilterCollapseError) or f"step {k}" in str(err):
            raise
        raise NumericError(f"step {k}: {err}") from err
    log_mean = float(logsumexp(log_w) - logsumexp(e.log_weights))
    out = WeightedEnsemble(pred.slow, log_w, pred.carry, pred.fast, k)
    resampled = cfg.resample_threshold >= 1.0 or ess / e.n < cfg.resample_threshold
    if resampled:
        out = resample_multinomial(
            out, s.derive(1), cfg.n_particles,
            marginal=cfg.variant in MARGINAL_VARIANTS, method=cfg.resampling,
        )
    diag = StepDiagnostics(
        step=k, time=float(t), estimates=est, ess=float(ess), ess_pooled=float(ess_pooled),
        n_particles=e.n, n_evaluations=int(n_evals), log_mean_weight=log_mean,
        resampled=bool(resampled), wall_ms=1e3 * (time.perf_counter() - start),
    )
    return out, diag


def _identity_sampler(backend) -> TransitionSampler:
    def ts(slow, carry, horizon, s):
        return backend.initial_prediction(slow, carry)
    return ts


def run_filter(
    backend,
    obs_seq: ObservationSequence,
    cfg: FilterConfig,
    s: RandomStream,
    fs: TestFunctions | None = None,
) -> FilterOutput:
    """Run one filter variant over the whole observation sequence.

    ``backend`` supplies ``initial``, ``initial_prediction``,
    ``transition_sampler(variant)``, ``weight_updater(variant, fs)`` and
    ``test_functions``. An observation at time 0 is assimilated with point
    weights on the initial states for every variant.
    """
    if len(obs_seq) < 1:
        raise ContractViolationError("need at least one observation")
    if cfg.n_observations is not None and cfg.n_observations != len(obs_seq):
        raise ContractViolationError(
            f"config expects {cfg.n_observations} observations, sequence has {len(obs_seq)}"
        )
    fs = backend.test_functions if fs is None else fs
    ts = backend.transition_sampler(cfg.variant)
    wu = backend.weight_updater(cfg.variant, fs)
    start = time.perf_counter()
    slow, carry = backend.initial(cfg.n_particles, s.derive(0))
    e = WeightedEnsemble(slow, np.zeros(cfg.n_particles), carry, None, 0)
    out = FilterOutput(cfg.variant)
    t_prev = 0.0
    for k, (t, z) in enumerate(zip(obs_seq.times, obs_seq.values), start=1):
        if k == 1 and t == 0.0:
            # nothing to predict: the initial law is weighted at its own states
            e, diag = filter_step(e, z, t, _identity_sampler(backend), backend.weight_updater("standard", fs),
                                  cfg, s.derive(k), horizon=0.0)
        else:
            e, diag = filter_step(e, z, t, ts, wu, cfg, s.derive(k), horizon=float(t - t_prev))
        out.steps.append(diag)
        t_prev = float(t)
    out.wall_ms = 1e3 * (time.perf_counter() - start)
    return out
