"""Verification tools: ESS series, paired replication variances, the Jensen
variance comparison, and an exact Kalman filter for linear-Gaussian models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from mspf import filtering as flt
from mspf import sde
from mspf.errors import ContractViolationError, InvalidParameterError, NumericError
from mspf.observations import GaussianObservation, ObservationSequence
from mspf.rng import RandomStream


def ess_timeseries(output: flt.FilterOutput, pooled: bool = False) -> np.ndarray:
    """Per-step ESS; ``pooled`` selects the n*M-evaluation variant."""
    if not output.steps:
        raise ContractViolationError("filter output has no recorded steps")
    return output.ess_pooled() if pooled else output.ess()


def block_bootstrap_se(series, s: RandomStream, block: int | None = None, n_boot: int = 2000) -> float:
    """Standard error of the mean of an autocorrelated series by the circular
    block bootstrap; ``block`` defaults to ceil(n^(1/3))."""
    x = np.asarray(series, dtype=float).reshape(-1)
    n = len(x)
    if n < 2:
        raise InvalidParameterError("need at least two values")
    block = int(np.ceil(n ** (1.0 / 3.0))) if block is None else int(block)
    if not 1 <= block <= n:
        raise InvalidParameterError(f"block length must lie in [1, {n}]")
    n_blocks = int(np.ceil(n / block))
    starts = s.generator.integers(0, n, size=(n_boot, n_blocks))
    idx = (starts[:, :, None] + np.arange(block)) % n
    means = x[idx.reshape(n_boot, -1)[:, :n]].mean(axis=1)
    return float(means.std(ddof=1))


# ---------------------------------------------------------------- Kalman oracle


@dataclass(frozen=True)
class LinearGaussianModel:
    """x_k = F x_{k-1} + N(0, Q),  z_k = H x_k + N(0, R),  x_0 ~ N(m0, P0)."""

    F: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    m0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        for name in ("F", "Q", "H", "R", "m0", "P0"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        d = self.F.shape[0]
        if self.F.shape != (d, d) or self.Q.shape != (d, d) or self.P0.shape != (d, d):
            raise ContractViolationError("state matrices must be square and consistent")
        if self.H.shape[1] != d or self.R.shape != (self.H.shape[0],) * 2 or self.m0.shape != (d,):
            raise ContractViolationError("observation matrices inconsistent with state dimension")
        for name in ("Q", "R", "P0"):
            mat = getattr(self, name)
            if not np.allclose(mat, mat.T) or np.linalg.eigvalsh(mat).min() < -1e-12:
                raise InvalidParameterError(f"{name} must be symmetric positive semi-definite")


@dataclass
class KalmanResult:
    means: np.ndarray  # (N, d)
    covs: np.ndarray  # (N, d, d)


def kalman_oracle(m: LinearGaussianModel, obs: ObservationSequence) -> KalmanResult:
    """Standard predict/update recursion; no prediction before an observation at t = 0."""
    mean, cov = m.m0.copy(), m.P0.copy()
    means, covs = [], []
    for t, z in zip(obs.times, obs.values):
        if t > 0:
            mean = m.F @ mean
            cov = m.F @ cov @ m.F.T + m.Q
        S = m.H @ cov @ m.H.T + m.R
        try:
            chol = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as err:
            raise NumericError(f"innovation covariance not invertible at t={t}") from err
        gain = np.linalg.solve(chol.T, np.linalg.solve(chol, m.H @ cov)).T
        mean = mean + gain @ (z - m.H @ mean)
        cov = cov - gain @ m.H @ cov
        cov = 0.5 * (cov + cov.T)
        means.append(mean.copy())
        covs.append(cov.copy())
    return KalmanResult(np.array(means), np.array(covs))


def euler_linear_gaussian(
    drift: np.ndarray, diffusion: np.ndarray, dt: float, n_sub: int,
    H: np.ndarray, obs_std, m0=None, P0=None,
) -> LinearGaussianModel:
    """Exact discrete model of ``n_sub`` Euler-Maruyama steps of dX = A X dt + B dW.

    ``diffusion`` is the diagonal of B; one observation interval is
    ``n_sub * dt``.
    """
    A = np.asarray(drift, dtype=float)
    d = A.shape[0]
    step = np.eye(d) + A * dt
    q1 = np.diag(np.asarray(diffusion, dtype=float) ** 2 * dt)
    F, Q = np.eye(d), np.zeros((d, d))
    for _ in range(n_sub):
        F = step @ F
        Q = step @ Q @ step.T + q1
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.diag(np.broadcast_to(np.asarray(obs_std, dtype=float) ** 2, (H.shape[0],)))
    m0 = np.zeros(d) if m0 is None else m0
    P0 = np.eye(d) if P0 is None else P0
    return LinearGaussianModel(F, Q, H, R, m0, P0)


def slow_fast_linear_model(epsilon: float, dt: float, n_sub: int, obs_std: float) -> LinearGaussianModel:
    """Discrete oracle model matching ``sde.linear_sde`` integrated by ``fine_integrate``."""
    A = np.array([[-1.0, 1.0], [1.0 / epsilon, -1.0 / epsilon]])
    B = np.array([1.0, 1.0 / np.sqrt(epsilon)])
    return euler_linear_gaussian(A, B, dt, n_sub, np.eye(2), obs_std)


# ---------------------------------------------------------------- replication variance


@dataclass
class ReplicationReport:
    """Paired replications of a plain and a variance-reduced estimator."""

    f_names: list[str]
    samples: dict[str, np.ndarray]  # variant -> (R, n_f)
    baseline: str
    reduced: str
    ratio: np.ndarray  # var(reduced) / var(baseline), per f
    ci_lo: np.ndarray  # bootstrap interval of the ratio
    ci_hi: np.ndarray
    variance_ci: dict[str, tuple[np.ndarray, np.ndarray]]
    note: str = ""

    @property
    def R(self) -> int:
        return next(iter(self.samples.values())).shape[0]

    @property
    def means(self) -> dict[str, np.ndarray]:
        return {v: a.mean(axis=0) for v, a in self.samples.items()}

    @property
    def variances(self) -> dict[str, np.ndarray]:
        return {v: a.var(axis=0, ddof=1) for v, a in self.samples.items()}

    @property
    def ratio_label(self) -> str:
        return f"{self.reduced}/{self.baseline}"

    def replication_rows(self):
        for v, arr in self.samples.items():
            for r in range(arr.shape[0]):
                for i, name in enumerate(self.f_names):
                    yield [r, v, name, arr[r, i]]

    def summary_rows(self):
        """Variance per (variant, f) with its bootstrap interval; the ratio
        rows are labelled ``reduced/baseline``."""
        variances = self.variances
        for v in self.samples:
            lo, hi = self.variance_ci[v]
            for i, name in enumerate(self.f_names):
                yield [v, name, variances[v][i], lo[i], hi[i]]
        for i, name in enumerate(self.f_names):
            yield [self.ratio_label, name, self.ratio[i], self.ci_lo[i], self.ci_hi[i]]


REPLICATION_HEADER = ["replication", "variant", "f_name", "estimate"]
SUMMARY_HEADER = ["variant", "f_name", "variance", "ci_lo", "ci_hi"]


def _variance_ratio(num, den):
    num, den = np.asarray(num, dtype=float), np.asarray(den, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    # 0/0 happens for constant test functions; both estimators are exact there
    out = np.where((num == 0) & (den == 0), 1.0, out)
    return out


def replication_variance(
    runner: Callable[[RandomStream], dict[str, dict[str, float]]],
    R: int,
    s: RandomStream,
    baseline: str = "point",
    reduced: str = "rao_blackwell",
    n_boot: int = 2000,
    level: float = 0.95,
    note: str = "",
) -> ReplicationReport:
    """Run ``R`` independent replications of both estimators and bootstrap the
    paired variance ratio. ``runner(stream)`` returns ``{variant: {f: value}}``."""
    if R < 2:
        raise InvalidParameterError("need at least two replications")
    results = [runner(s.derive(0).derive(r)) for r in range(R)]
    f_names = list(results[0][baseline])
    samples = {
        v: np.array([[res[v][f] for f in f_names] for res in results])
        for v in (baseline, reduced)
    }
    base, red = samples[baseline], samples[reduced]
    ratio = _variance_ratio(red.var(axis=0, ddof=1), base.var(axis=0, ddof=1))
    idx = s.derive(1).generator.integers(0, R, size=(n_boot, R))
    boot_var = {v: a[idx].var(axis=1, ddof=1) for v, a in samples.items()}
    boot = _variance_ratio(boot_var[reduced], boot_var[baseline])
    q = [0.5 * (1.0 - level), 0.5 * (1.0 + level)]
    ci_lo, ci_hi = np.quantile(boot, q, axis=0)
    variance_ci = {v: tuple(np.quantile(b, q, axis=0)) for v, b in boot_var.items()}
    return ReplicationReport(f_names, samples, baseline, reduced, ratio, ci_lo, ci_hi,
                             variance_ci, note)


@dataclass
class JensenVerdict:
    f_names: list[str]
    ratio: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    consistent: np.ndarray  # ratio <= 1 within the interval
    strict: np.ndarray  # interval lies entirely below 1

    @property
    def holds(self) -> bool:
        return bool(np.all(self.consistent))


def jensen_check(report: ReplicationReport, tol: float = 1e-9) -> JensenVerdict:
    """Is the reduced estimator's variance no larger than the plain one's?"""
    return JensenVerdict(
        report.f_names, report.ratio, report.ci_lo, report.ci_hi,
        consistent=report.ci_lo <= 1.0 + tol,
        strict=report.ci_hi < 1.0,
    )


# ---------------------------------------------------------------- one-step estimators


def predictive_pool(model: sde.SlowFastSde, n_pool: int, Delta_t: float, horizon: float,
                    s: RandomStream) -> np.ndarray:
    """Slow states from N(0,1) pushed through the averaged dynamics over ``horizon``."""
    x0 = s.derive(0).generator.standard_normal((n_pool, model.d_x))
    return sde.averaged_transition(model, x0, Delta_t, horizon, s.derive(1))


def one_step_runner(
    model: sde.SlowFastSde,
    obs: GaussianObservation,
    z,
    fs: flt.TestFunctions,
    n: int,
    x_pool: np.ndarray,
) -> Callable[[RandomStream], dict[str, dict[str, float]]]:
    """Build a runner comparing point weights g(x, y) (y ~ mu_x sampled) with
    quadrature-integrated weights [mu g](x) on the same slow draws."""
    z = np.atleast_1d(z)

    def assemble(slow, fast):
        fast = np.asarray(fast, dtype=float)
        if fast.ndim == 3:
            slow = np.broadcast_to(slow[:, None, :], fast.shape[:2] + (slow.shape[-1],))
        return np.concatenate([slow, fast], axis=-1)

    def runner(s: RandomStream):
        x = x_pool[s.derive(0).generator.integers(0, len(x_pool), n)]
        y = sde.sample_fast_equilibrium(model, x, s.derive(1))
        point = flt.point_weight_evaluation(assemble(x, y), z, obs, fs)
        rb = flt.quadrature_weight(x, z, obs, model.fast_log_density, assemble, fs,
                                   model.fast_support(x))
        return {
            "point": flt.estimate(point.log_weight, point.local_means),
            "rao_blackwell": flt.estimate(rb.log_weight, rb.local_means),
        }

    return runner
