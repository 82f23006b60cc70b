"""Chemical reaction networks: exact SSA and the nested multiscale jump scheme.

Propensities are mass-action with falling factorials,
``a_j(S) = k_j * prod_i S_i (S_i - 1) ... (S_i - r_ij + 1)``, which covers
``k3 S4 (S4 - 1)`` for the dimerization. The inner loops are numba kernels
that draw from the numpy ``Generator`` of a ``RandomStream``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from mspf.errors import ConfigError, ContractViolationError, InvalidParameterError, MspfError
from mspf.rng import RandomStream

EXAMPLE_INITIAL = np.array([700, 700, 1300, 900, 1050, 400], dtype=np.int64)
EXAMPLE_RATES = np.array([1000.0, 1000.0, 1000.0, 1000.0, 5e-5])


class ConsistencyError(MspfError, RuntimeError):
    """A population went negative; indicates a malformed network."""


@dataclass(frozen=True)
class ReactionNetwork:
    species: tuple[str, ...]
    stoichiometry: np.ndarray  # (N, M) state-change vectors as columns
    reactants: np.ndarray  # (M, N) reactant orders
    rates: np.ndarray  # (M,)
    fast_species: np.ndarray  # (N,) bool
    fast_reactions: np.ndarray  # (M,) bool
    check_partition: bool = True
    _slow_idx: np.ndarray = field(init=False, repr=False, compare=False)
    _table: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.stoichiometry, dtype=np.int64)
        r = np.asarray(self.reactants, dtype=np.int64)
        k = np.asarray(self.rates, dtype=float)
        fs = np.asarray(self.fast_species, dtype=bool)
        fr = np.asarray(self.fast_reactions, dtype=bool)
        n_sp, n_rx = v.shape
        if r.shape != (n_rx, n_sp) or k.shape != (n_rx,) or fs.shape != (n_sp,) or fr.shape != (n_rx,):
            raise ConfigError("reaction network arrays have inconsistent shapes")
        if np.any(k < 0) or np.any(r < 0):
            raise ConfigError("rates and reactant orders must be non-negative")
        if self.check_partition:
            if np.any(v[~fs][:, fr] != 0):
                raise ConfigError("a fast reaction changes a slow species")
            if np.any(v[fs][:, ~fr] != 0):
                raise ConfigError("a slow reaction changes a fast species")
        for name, arr in (("stoichiometry", v), ("reactants", r), ("rates", k),
                          ("fast_species", fs), ("fast_reactions", fr)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "species", tuple(self.species))
        object.__setattr__(self, "_slow_idx", np.flatnonzero(~fs))
        object.__setattr__(self, "_table", _reactant_table(r))

    @property
    def n_species(self) -> int:
        return self.stoichiometry.shape[0]

    @property
    def n_reactions(self) -> int:
        return self.stoichiometry.shape[1]

    @property
    def fast_idx(self) -> np.ndarray:
        return np.flatnonzero(self.fast_species)

    @property
    def slow_idx(self) -> np.ndarray:
        return self._slow_idx

    def propensities(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=np.int64)
        out = np.empty(state.shape[:-1] + (self.n_reactions,))
        flat_in = state.reshape(-1, self.n_species)
        flat_out = out.reshape(-1, self.n_reactions)
        for i in range(flat_in.shape[0]):
            _propensities(flat_in[i], self._table, self.rates, flat_out[i])
        return out

    def with_rates(self, rates) -> ReactionNetwork:
        return ReactionNetwork(self.species, self.stoichiometry, self.reactants, rates,
                               self.fast_species, self.fast_reactions, self.check_partition)


@dataclass
class JumpState:
    populations: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.populations = np.asarray(self.populations, dtype=np.int64)
        if np.any(self.populations < 0):
            raise InvalidParameterError("populations must be non-negative")


@dataclass
class SSATrajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), N)
    n_events: int


@dataclass
class FastJumpTrajectory:
    """Fast path at frozen slow species over a window of length ``T_f``.

    ``path_times``/``path_states`` hold every jump after burn-in (starting
    with the state at the end of burn-in); ``samples`` are ``M_s``
    equally-spaced states, the last one at the window end.
    """

    window: float
    burn_in: float
    path_times: np.ndarray
    path_states: np.ndarray
    samples: np.ndarray
    slow_propensity_avg: np.ndarray
    terminal: np.ndarray


def build_example_network(rate_scale: float = 1.0) -> ReactionNetwork:
    """Six species, five channels; S1..S5 fast, S6 slow.

    ``rate_scale`` multiplies k1..k4 to shrink the time-scale separation.
    """
    v = np.array([
        [-1, 1, 0, 0, 0],
        [-1, 1, 0, 0, 0],
        [1, -1, 0, 0, 0],
        [0, 0, -2, 2, 0],
        [0, 0, 1, -1, 0],
        [0, 0, 0, 0, 1],
    ])
    r = np.zeros((5, 6), dtype=np.int64)
    r[0, [0, 1]] = 1  # S1 + S2 -> S3
    r[1, [2, 5]] = 1  # S3 + S6 -> S1 + S2 + S6
    r[2, 3] = 2  # S4 + S4 -> S5
    r[3, [4, 5]] = 1  # S5 + S6 -> 2 S4 + S6
    r[4, [2, 3]] = 1  # S3 + S4 -> S3 + S4 + S6
    rates = EXAMPLE_RATES.copy()
    rates[:4] *= rate_scale
    return ReactionNetwork(
        species=("S1", "S2", "S3", "S4", "S5", "S6"),
        stoichiometry=v, reactants=r, rates=rates,
        fast_species=np.array([True] * 5 + [False]),
        fast_reactions=np.array([True] * 4 + [False]),
    )


def sample_example_initial(n: int, s: RandomStream) -> np.ndarray:
    """(700,700,1300,900,1050,400) + round(eta), eta ~ U[-10, 10], clipped at 0."""
    eta = s.uniform(-10.0, 10.0, size=(n, 6))
    return np.maximum(EXAMPLE_INITIAL + np.rint(eta).astype(np.int64), 0)


# ---------------------------------------------------------------- kernels


def _reactant_table(reactants: np.ndarray) -> np.ndarray:
    """(M, K, 2) rows of (species, order) per channel, padded with species -1.

    Lets the kernels skip the zero entries of the dense (M, N) order matrix.
    """
    n_rx = reactants.shape[0]
    width = max(1, int((reactants > 0).sum(axis=1).max(initial=0)))
    table = np.full((n_rx, width, 2), -1, dtype=np.int64)
    for j in range(n_rx):
        idx = np.flatnonzero(reactants[j])
        table[j, : len(idx), 0] = idx
        table[j, : len(idx), 1] = reactants[j, idx]
    return table


@numba.njit(cache=True)
def _propensities(state, table, rates, out):
    for j in range(rates.shape[0]):
        a = rates[j]
        for r in range(table.shape[1]):
            i = table[j, r, 0]
            if i < 0:
                break
            for q in range(table[j, r, 1]):
                a *= state[i] - q
        out[j] = a if a > 0.0 else 0.0


@numba.njit(cache=True)
def _pick(props, mask, total, u):
    target = u * total
    acc = 0.0
    last = -1
    for j in range(props.shape[0]):
        if mask[j] and props[j] > 0.0:
            acc += props[j]
            last = j
            if acc > target:
                return j
    return last


@numba.njit(cache=True)
def _apply(state, stoich, j):
    ok = True
    for i in range(state.shape[0]):
        state[i] += stoich[i, j]
        if state[i] < 0:
            ok = False
    return ok


@numba.njit(cache=True)
def _ssa_to_times(state, t0, sample_times, stoich, table, rates, mask, rng, out):
    """Exact SSA over channels in ``mask``; writes the state at each sample time.

    Returns the number of events, or -1 if a population went negative.
    """
    props = np.empty(rates.shape[0])
    t = t0
    events = 0
    k = 0
    n_out = sample_times.shape[0]
    while k < n_out:
        _propensities(state, table, rates, props)
        total = 0.0
        for j in range(props.shape[0]):
            if mask[j]:
                total += props[j]
        dt = rng.exponential(1.0 / total) if total > 0.0 else np.inf
        while k < n_out and sample_times[k] < t + dt:
            out[k, :] = state
            k += 1
        if k >= n_out:
            break
        t += dt
        j = _pick(props, mask, total, rng.random())
        if not _apply(state, stoich, j):
            return -1
        events += 1
    return events


@numba.njit(cache=True)
def _ssa_events(state, t0, t_end, stoich, table, rates, mask, rng, times, states):
    """Exact SSA recording every event; returns count, -1 on negative, -2 if full."""
    props = np.empty(rates.shape[0])
    t = t0
    n = 0
    times[0] = t0
    states[0, :] = state
    while True:
        _propensities(state, table, rates, props)
        total = 0.0
        for j in range(props.shape[0]):
            if mask[j]:
                total += props[j]
        if total <= 0.0:
            break
        t += rng.exponential(1.0 / total)
        if t > t_end:
            break
        j = _pick(props, mask, total, rng.random())
        if not _apply(state, stoich, j):
            return -1
        n += 1
        if n >= times.shape[0]:
            return -2
        times[n] = t
        states[n, :] = state
    return n + 1


@numba.njit(cache=True)
def _fast_window(state, stoich, table, rates, fast_rx, window, burn, n_samples, rng,
                 samples, slow_avg):
    """Fast-only SSA over ``burn + window`` time units with slow species frozen.

    Advances ``state`` in place, writes ``n_samples`` equally spaced states of
    the post-burn-in window into ``samples`` and the time average of every
    non-fast propensity into ``slow_avg``. Returns False on a negative count.
    """
    n_rx = rates.shape[0]
    props = np.empty(n_rx)
    for j in range(n_rx):
        slow_avg[j] = 0.0
    t = 0.0
    t_end = burn + window
    k = 0
    while True:
        _propensities(state, table, rates, props)
        total = 0.0
        for j in range(n_rx):
            if fast_rx[j]:
                total += props[j]
        dt = rng.exponential(1.0 / total) if total > 0.0 else np.inf
        t_next = t + dt
        lo = t if t > burn else burn
        hi = t_next if t_next < t_end else t_end
        if hi > lo:
            for j in range(n_rx):
                if not fast_rx[j]:
                    slow_avg[j] += props[j] * (hi - lo)
        while k < n_samples and burn + window * (k + 1) / n_samples < t_next:
            samples[k, :] = state
            k += 1
        if t_next >= t_end:
            break
        t = t_next
        j = _pick(props, fast_rx, total, rng.random())
        if not _apply(state, stoich, j):
            return False
    while k < n_samples:
        samples[k, :] = state
        k += 1
    for j in range(n_rx):
        slow_avg[j] /= window
    return True


@numba.njit(cache=True)
def _multiscale_batch(states, horizon, stoich, table, rates, fast_rx, window, burn,
                      weight_window, weight_burn, n_samples, rng, samples_out):
    """Nested scheme for every particle; returns index of a failed particle or -1."""
    n, n_sp = states.shape
    n_rx = rates.shape[0]
    slow_avg = np.empty(n_rx)
    scratch = np.empty((0, n_sp), dtype=states.dtype)
    for p in range(n):
        state = states[p]
        remaining = horizon
        while remaining > 0.0:
            if not _fast_window(state, stoich, table, rates, fast_rx, window, burn, 0, rng,
                                scratch, slow_avg):
                return p
            total = 0.0
            for j in range(n_rx):
                if not fast_rx[j]:
                    total += slow_avg[j]
            h = remaining
            if total * h > 1.0:
                h = 1.0 / total
            for j in range(n_rx):
                if not fast_rx[j] and slow_avg[j] > 0.0:
                    count = rng.poisson(slow_avg[j] * h)
                    for _ in range(count):
                        if not _apply(state, stoich, j):
                            return p
            remaining -= h
        if not _fast_window(state, stoich, table, rates, fast_rx, weight_window, weight_burn,
                            n_samples, rng, samples_out[p], slow_avg):
            return p
    return -1


# ---------------------------------------------------------------- public API


def _burn(window: float, burn_frac: float) -> float:
    if not window > 0:
        raise InvalidParameterError(f"window length must be > 0, got {window}")
    if not 0 <= burn_frac < 1:
        raise InvalidParameterError("burn-in fraction must lie in [0, 1)")
    return burn_frac * window


def ssa_run(net: ReactionNetwork, s0: JumpState, t_end: float, stream: RandomStream,
            sample_times=None, mask=None) -> SSATrajectory:
    """Exact Gillespie SSA from ``s0`` to ``t_end``.

    With ``sample_times`` the state is reported at those times only;
    otherwise every event is recorded.
    """
    if t_end < s0.time:
        raise ContractViolationError("t_end precedes the initial time")
    mask = np.ones(net.n_reactions, dtype=np.bool_) if mask is None else np.asarray(mask, dtype=np.bool_)
    state = s0.populations.copy()
    gen = stream.generator
    if sample_times is not None:
        sample_times = np.asarray(sample_times, dtype=float)
        if np.any(sample_times < s0.time) or np.any(sample_times > t_end):
            raise ContractViolationError("sample times must lie in [s0.time, t_end]")
        out = np.empty((len(sample_times), net.n_species), dtype=np.int64)
        events = _ssa_to_times(state, s0.time, sample_times, net.stoichiometry, net._table,
                               net.rates, mask, gen, out)
        if events < 0:
            raise ConsistencyError("negative population during SSA")
        return SSATrajectory(sample_times, out, int(events))
    cap = 1024
    while True:
        times = np.empty(cap)
        states = np.empty((cap, net.n_species), dtype=np.int64)
        trial = RandomStream(stream.master_seed, stream.stream_path)
        state = s0.populations.copy()
        count = _ssa_events(state, s0.time, t_end, net.stoichiometry, net._table, net.rates,
                            mask, trial.generator, times, states)
        if count == -1:
            raise ConsistencyError("negative population during SSA")
        if count == -2:
            cap *= 8
            continue
        times = np.append(times[:count], t_end)
        states = np.vstack([states[:count], states[count - 1]])
        return SSATrajectory(times, states, count - 1)


def ssa_advance(net: ReactionNetwork, states, horizon: float, stream: RandomStream) -> np.ndarray:
    """Exact SSA of every row of ``states`` over ``horizon``; one generator, rows in order."""
    states = np.array(states, dtype=np.int64)
    if states.ndim == 1:
        states = states[None, :]
    gen = stream.generator
    mask = np.ones(net.n_reactions, dtype=np.bool_)
    out = np.empty((1, net.n_species), dtype=np.int64)
    when = np.array([horizon])
    for p in range(states.shape[0]):
        if _ssa_to_times(states[p], 0.0, when, net.stoichiometry, net._table, net.rates,
                         mask, gen, out) < 0:
            raise ConsistencyError("negative population during SSA")
        states[p] = out[0]
    return states


def fast_subnetwork_run(net: ReactionNetwork, state: JumpState, T_f: float, M_s: int,
                        stream: RandomStream, burn_frac: float = 0.1) -> FastJumpTrajectory:
    """SSA over fast channels with slow species frozen; burn-in is extra time before the window."""
    if M_s < 1:
        raise InvalidParameterError("M_s must be positive")
    burn = _burn(T_f, burn_frac)
    gen = stream.generator
    start = state.populations.copy()
    # burn-in, then the window with full path recording
    slow_avg = np.empty(net.n_reactions)
    scratch = np.empty((0, net.n_species), dtype=np.int64)
    fast_mask = np.asarray(net.fast_reactions, dtype=np.bool_)
    if burn > 0 and not _fast_window(start, net.stoichiometry, net._table, net.rates, fast_mask,
                                     burn, 0.0, 0, gen, scratch, slow_avg):
        raise ConsistencyError("negative population in fast window")
    path = ssa_run(net, JumpState(start, 0.0), T_f, stream.derive(0), mask=fast_mask)
    grid = T_f * np.arange(1, M_s + 1) / M_s
    idx = np.searchsorted(path.times[:-1], grid, side="right") - 1
    samples = path.states[idx]
    durations = np.diff(path.times)
    props = net.propensities(path.states[:-1])
    avg = durations @ props / T_f
    avg[net.fast_reactions] = 0.0
    return FastJumpTrajectory(T_f, burn, path.times, path.states, samples, avg, path.states[-1].copy())


def averaged_slow_propensity(net: ReactionNetwork, traj: FastJumpTrajectory) -> np.ndarray:
    """Time average of each slow propensity along the piecewise-constant path."""
    if len(traj.path_times) < 2:
        raise ContractViolationError("empty fast trajectory")
    durations = np.diff(traj.path_times)
    total = durations.sum()
    props = net.propensities(traj.path_states[:-1])
    avg = durations @ props / total
    return avg[~net.fast_reactions]


def multiscale_jump_transition(
    net: ReactionNetwork, states, Delta_s: float, T_f: float, M_s: int, stream: RandomStream,
    burn_frac: float = 0.1, T_weight: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance slow species over ``Delta_s`` by Poisson firing at window-averaged
    slow propensities, sub-stepping so at most one firing is expected per
    sub-interval, then sample ``M_s`` points from a terminal fast window.

    Works on a batch ``(n, N)``; the fast state is warm-started from window to
    window. ``T_weight`` sets the terminal window length (default ``T_f``).
    Returns terminal states ``(n, N)`` and samples ``(n, M_s, N)``.
    """
    if Delta_s < 0:
        raise ContractViolationError("Delta_s must be >= 0")
    if M_s < 1:
        raise InvalidParameterError("M_s must be positive")
    burn = _burn(T_f, burn_frac)
    T_weight = T_f if T_weight is None else T_weight
    weight_burn = _burn(T_weight, burn_frac)
    states = np.array(states, dtype=np.int64)
    if states.ndim == 1:
        states = states[None, :]
    samples = np.empty((states.shape[0], M_s, net.n_species), dtype=np.int64)
    failed = _multiscale_batch(states, float(Delta_s), net.stoichiometry, net._table, net.rates,
                               np.asarray(net.fast_reactions, dtype=np.bool_), float(T_f), burn,
                               float(T_weight), weight_burn, int(M_s), stream.generator, samples)
    if failed >= 0:
        raise ConsistencyError(f"negative population for particle {failed}")
    return states, samples


def expected_ssa_events(net: ReactionNetwork, states, horizon: float) -> float:
    """Cost proxy: total propensity at ``states`` times ``horizon``, summed over rows."""
    return float(np.sum(net.propensities(np.atleast_2d(states))) * horizon)


def separation(net: ReactionNetwork, state) -> float:
    """Ratio of fast to slow event rates at ``state``."""
    props = net.propensities(state)
    slow = props[~net.fast_reactions].sum()
    return math.inf if slow == 0 else float(props[net.fast_reactions].sum() / slow)
