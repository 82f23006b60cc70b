"""Gaussian observation models and synthetic truth/observation generation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mspf.errors import ContractViolationError, InvalidParameterError
from mspf.rng import RandomStream

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianObservation:
    """Observe selected coordinates of the full state with additive noise.

    ``observed`` indexes into the full state vector (slow and fast
    coordinates concatenated by the model backend).
    """

    observed: tuple[int, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        observed = tuple(int(i) for i in np.atleast_1d(self.observed))
        std = tuple(float(v) for v in np.broadcast_to(np.atleast_1d(self.std), (len(observed),)))
        if not observed:
            raise InvalidParameterError("at least one coordinate must be observed")
        if any(not v > 0 for v in std):
            raise InvalidParameterError(f"observation std must be > 0, got {std}")
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return len(self.observed)

    def select(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if state.ndim == 0 or state.shape[-1] <= max(self.observed):
            raise ContractViolationError(
                f"state of shape {state.shape} lacks observed coordinate {max(self.observed)}"
            )
        return state[..., list(self.observed)]

    def log_likelihood(self, state, z) -> np.ndarray:
        return log_likelihood(self, state, z)

    def simulate(self, state, s: RandomStream) -> np.ndarray:
        return simulate_observation(self, state, s)


def log_likelihood(m: GaussianObservation, state, z) -> np.ndarray:
    """Sum of Gaussian log-densities of the residuals; broadcasts over leading axes."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape[-1] != m.dim:
        raise ContractViolationError(f"observation has {z.shape[-1]} entries, model observes {m.dim}")
    std = np.asarray(m.std)
    resid = (m.select(state) - z) / std
    return -0.5 * np.sum(resid * resid, axis=-1) - np.sum(np.log(std)) - 0.5 * m.dim * _LOG_2PI


def simulate_observation(m: GaussianObservation, state, s: RandomStream) -> np.ndarray:
    clean = m.select(state)
    return clean + np.asarray(m.std) * s.generator.standard_normal(clean.shape)


@dataclass(frozen=True)
class ObservationSequence:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if len(times) < 1 or values.shape[0] != len(times):
            raise ContractViolationError("need one observation vector per time, at least one")
        gaps = np.diff(times)
        if np.any(gaps <= 0):
            raise ContractViolationError("observation times must be strictly increasing")
        if len(gaps) > 1 and not np.allclose(gaps, gaps[0], rtol=1e-9, atol=1e-12):
            raise ContractViolationError("observation times must be uniformly spaced")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.times)

    def to_csv(self, path):
        header = ["time"] + [f"z_{i + 1}" for i in range(self.values.shape[1])]
        write_table(path, header, np.column_stack([self.times, self.values]))

    @classmethod
    def from_csv(cls, path) -> ObservationSequence:
        data = read_table(path)
        return cls(data[:, 0], data[:, 1:])


@dataclass(frozen=True)
class Truth:
    times: np.ndarray
    states: np.ndarray

    def to_csv(self, path):
        header = ["time"] + [f"state_{i + 1}" for i in range(self.states.shape[1])]
        write_table(path, header, np.column_stack([self.times, self.states]))

    @classmethod
    def from_csv(cls, path) -> Truth:
        data = read_table(path)
        return cls(data[:, 0], data[:, 1:])


def fmt(value) -> str:
    """Shortest round-tripping text for a float; keeps CSV output byte-stable."""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_table(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([[float(v) for v in row] for row in reader], dtype=float)


def observation_times(delta_s: float, n_obs: int, observe_at_zero: bool) -> np.ndarray:
    start = 0 if observe_at_zero else 1
    return np.arange(start, n_obs + 1) * float(delta_s)


def generate_truth_and_observations(
    backend,
    horizon: float,
    delta_s: float,
    m: GaussianObservation,
    s: RandomStream,
    observe_at_zero: bool = False,
    out_dir=None,
) -> tuple[Truth, ObservationSequence]:
    """Simulate the fine model from its initial law and observe it every ``delta_s``.

    ``backend`` must provide ``simulate_truth(times, stream) -> states`` returning
    the full state at each requested time.
    """
    n_obs = int(round(horizon / delta_s))
    if n_obs < 1 or not np.isclose(n_obs * delta_s, horizon, rtol=1e-12, atol=0):
        raise ContractViolationError(f"horizon {horizon} is not a positive multiple of {delta_s}")
    times = observation_times(delta_s, n_obs, observe_at_zero)
    states = np.asarray(backend.simulate_truth(times, s.derive(0)), dtype=float)
    z = simulate_observation(m, states, s.derive(1))
    truth = Truth(times, states)
    obs = ObservationSequence(times, z)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        truth.to_csv(out_dir / "truth.csv")
        obs.to_csv(out_dir / "observations.csv")
    return truth, obs
