"""Hierarchically seeded random streams.

Every stream is a Philox-4x64 counter-based generator keyed by a
``numpy.random.SeedSequence`` built from ``(master_seed, stream_path)``.
Deriving a child appends an integer to the path, so per-step or
per-particle streams can be created without coordination and without
consuming draws from the parent.

Gaussian draws use numpy's ziggurat sampler on top of Philox; golden
outputs are tied to that pairing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from mspf.errors import InvalidParameterError

SEED_ENV_VAR = "MSPF_SEED"
_U64 = 2**64


@dataclass(frozen=True)
class RandomStream:
    """A reproducible source of random draws identified by its seed path.

    A stream is single-owner: the underlying generator is stateful and must
    not be shared between threads.
    """

    master_seed: int
    stream_path: tuple[int, ...] = ()
    _gen: np.random.Generator | None = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < _U64:
            raise InvalidParameterError(
                f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}"
            )
        path = tuple(int(p) for p in self.stream_path)
        if any(p < 0 for p in path):
            raise InvalidParameterError(f"stream_path entries must be >= 0: {path}")
        object.__setattr__(self, "master_seed", int(self.master_seed))
        object.__setattr__(self, "stream_path", path)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            seq = np.random.SeedSequence(self.master_seed, spawn_key=self.stream_path)
            object.__setattr__(self, "_gen", np.random.Generator(np.random.Philox(seq)))
        return self._gen

    def derive(self, child_id: int) -> RandomStream:
        return RandomStream(self.master_seed, self.stream_path + (int(child_id),))

    def gaussian(self, mean=0.0, std=1.0, size=None):
        return sample_gaussian(self, mean, std, size)

    def brownian_increment(self, dt, dim=1, size=None):
        return brownian_increment(self, dt, dim, size)

    def exponential(self, rate, size=None):
        return sample_exponential(self, rate, size)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return sample_uniform(self, lo, hi, size)


def derive_stream(parent: RandomStream, child_id: int) -> RandomStream:
    return parent.derive(child_id)


def sample_gaussian(s: RandomStream, mean=0.0, std=1.0, size=None):
    """Draw from N(mean, std**2); ``std == 0`` returns ``mean`` exactly."""
    std_arr = np.asarray(std, dtype=float)
    if np.any(std_arr < 0) or np.any(np.isnan(std_arr)):
        raise InvalidParameterError(f"std must be >= 0, got {std}")
    draw = s.generator.standard_normal(size)
    if size is None and std_arr.ndim == 0:
        return float(mean) + float(std) * float(draw)
    return mean + std_arr * draw


def brownian_increment(s: RandomStream, dt: float, dim: int = 1, size=None) -> np.ndarray:
    """``dim`` independent N(0, dt) components; ``size`` prepends batch axes."""
    if not dt > 0:
        raise InvalidParameterError(f"dt must be > 0, got {dt}")
    if dim < 1:
        raise InvalidParameterError(f"dim must be positive, got {dim}")
    shape = (dim,) if size is None else tuple(np.atleast_1d(size)) + (dim,)
    return np.sqrt(dt) * s.generator.standard_normal(shape)


def sample_exponential(s: RandomStream, rate: float, size=None):
    if not rate > 0:
        raise InvalidParameterError(f"rate must be > 0, got {rate}")
    return s.generator.exponential(1.0 / rate, size)


def sample_uniform(s: RandomStream, lo: float, hi: float, size=None):
    if lo > hi:
        raise InvalidParameterError(f"need lo <= hi, got [{lo}, {hi}]")
    if lo == hi:
        return lo if size is None else np.full(size, float(lo))
    return s.generator.uniform(lo, hi, size)


def resolve_seed(cli_seed=None, config_seed=None, default=0) -> int:
    """Pick the master seed: CLI flag, then $MSPF_SEED, then config, then default."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env not in (None, ""):
        return int(env)
    if config_seed is not None:
        return int(config_seed)
    return default
