"""Model backends: bind a model family to the filter engine's variants.

A backend supplies the initial law, one transition sampler per variant,
the matching weight updater, and the test functions reported by the filter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mspf import filtering as flt
from mspf import jump, sde
from mspf.errors import ConfigError
from mspf.observations import GaussianObservation
from mspf.rng import RandomStream


def _point_updater(backend, fs):
    def update(pred: flt.Prediction, z) -> flt.WeightEvaluation:
        return flt.point_weight_evaluation(backend.assemble(pred.slow, pred.fast), z, backend.obs, fs)
    return update


def _averaged_updater(backend, fs):
    def update(pred: flt.Prediction, z) -> flt.WeightEvaluation:
        return flt.averaged_weight(backend.assemble(pred.slow, pred.fast), z, backend.obs, fs)
    return update


@dataclass
class SdeBackend:
    """Slow-fast SDE with standard normal initial law for every coordinate."""

    model: sde.SlowFastSde
    ms: sde.MultiscaleConfig
    obs: GaussianObservation
    fine_dt: float
    initial_mean: float = 0.0
    initial_std: float = 1.0
    test_functions: dict = field(default=None)

    def __post_init__(self):
        if self.test_functions is None:
            names = [f"x{i + 1}" if self.model.d_x > 1 else "x" for i in range(self.model.d_x)]
            names += [f"y{i + 1}" if self.model.d_y > 1 else "y" for i in range(self.model.d_y)]
            self.test_functions = {name: _coordinate(i) for i, name in enumerate(names)}

    @property
    def variants(self) -> tuple[str, ...]:
        if self.model.fast_log_density is not None and self.model.d_y == 1:
            return flt.VARIANTS
        return tuple(v for v in flt.VARIANTS if v != "rao_blackwell")

    def sample_initial_full(self, n, s: RandomStream) -> np.ndarray:
        d = self.model.d_x + self.model.d_y
        return self.initial_mean + self.initial_std * s.generator.standard_normal((n, d))

    def initial(self, n, s: RandomStream):
        full = self.sample_initial_full(n, s)
        return full[:, : self.model.d_x], full[:, self.model.d_x:]

    def initial_prediction(self, slow, carry) -> flt.Prediction:
        return flt.Prediction(slow, carry, carry)

    def assemble(self, slow, fast) -> np.ndarray:
        slow = np.asarray(slow, dtype=float)
        fast = np.asarray(fast, dtype=float)
        if fast.ndim == 3:
            slow = np.broadcast_to(slow[:, None, :], fast.shape[:2] + (slow.shape[-1],))
        return np.concatenate([slow, fast], axis=-1)

    def transition_sampler(self, variant):
        m, ms = self.model, self.ms
        if variant not in self.variants:
            raise ConfigError(f"variant {variant!r} is not available for model {m.name}")
        if variant == "standard":
            def ts(slow, carry, horizon, s):
                x, y = sde.fine_integrate(m, slow, carry, horizon, self.fine_dt, s)
                return flt.Prediction(x, y, y)
        elif variant == "rao_blackwell":
            def ts(slow, carry, horizon, s):
                if m.averaged_drift_exact is not None:
                    x = sde.averaged_transition(m, slow, ms.Delta_t, horizon, s)
                    return flt.Prediction(x, None, None)
                x, traj = sde.multiscale_transition(m, slow, ms, s, carry, horizon)
                return flt.Prediction(x, traj.terminal, None)
        else:
            keep_trajectory = variant == "multiscale"

            def ts(slow, carry, horizon, s):
                x, traj = sde.multiscale_transition(m, slow, ms, s, carry, horizon)
                fast = traj.samples if keep_trajectory else traj.terminal
                return flt.Prediction(x, traj.terminal, fast)
        return ts

    def weight_updater(self, variant, fs):
        if variant == "multiscale":
            return _averaged_updater(self, fs)
        if variant == "rao_blackwell":
            m = self.model

            def update(pred, z):
                return flt.quadrature_weight(pred.slow, z, self.obs, m.fast_log_density,
                                             self.assemble, fs, m.fast_support(pred.slow))
            return update
        return _point_updater(self, fs)

    def simulate_truth(self, times, s: RandomStream) -> np.ndarray:
        full = self.sample_initial_full(1, s.derive(0))
        x, y = full[:, : self.model.d_x], full[:, self.model.d_x:]
        out = []
        t_prev = 0.0
        for k, t in enumerate(times):
            x, y = sde.fine_integrate(self.model, x, y, float(t) - t_prev, self.fine_dt, s.derive(k + 1))
            out.append(np.concatenate([x[0], y[0]]))
            t_prev = float(t)
        return np.array(out)


def _coordinate(i):
    def f(full):
        return full[..., i]
    f.__name__ = f"coordinate_{i}"
    return f


@dataclass
class JumpBackend:
    """Reaction network whose particles carry the full population vector.

    The fast entries of a particle's state are only a warm start for the next
    fast window; weights use the fast samples produced by the transition.
    """

    net: jump.ReactionNetwork
    obs: GaussianObservation
    T_f: float = 1e-4
    M_s: int = 10_000
    T_weight: float | None = None
    burn_frac: float = 0.1
    test_functions: dict = field(default=None)

    def __post_init__(self):
        if self.test_functions is None:
            self.test_functions = {name.lower(): _coordinate(i) for i, name in enumerate(self.net.species)}

    variants = ("standard", "averaged", "multiscale")

    def initial(self, n, s: RandomStream):
        return jump.sample_example_initial(n, s), None

    def initial_prediction(self, slow, carry) -> flt.Prediction:
        return flt.Prediction(slow, None, slow[:, self.net.fast_idx])

    def assemble(self, slow, fast) -> np.ndarray:
        slow = np.asarray(slow, dtype=float)
        fast = np.asarray(fast, dtype=float)
        if fast.ndim == 3:
            full = np.repeat(slow[:, None, :], fast.shape[1], axis=1)
        else:
            full = slow.copy()
        full[..., self.net.fast_idx] = fast
        return full

    def transition_sampler(self, variant):
        net = self.net
        fast_idx = net.fast_idx
        if variant not in self.variants:
            raise ConfigError(f"variant {variant!r} is not available for model jump_chemical")
        if variant == "standard":
            def ts(slow, carry, horizon, s):
                states = jump.ssa_advance(net, slow, horizon, s)
                return flt.Prediction(states, None, states[:, fast_idx])
            return ts
        n_samples = self.M_s if variant == "multiscale" else 1

        def ts(slow, carry, horizon, s):
            states, samples = jump.multiscale_jump_transition(
                net, slow, horizon, self.T_f, n_samples, s, self.burn_frac, self.T_weight)
            fast = samples[:, :, fast_idx] if variant == "multiscale" else samples[:, 0, fast_idx]
            return flt.Prediction(states, None, fast)
        return ts

    def weight_updater(self, variant, fs):
        if variant == "multiscale":
            return _averaged_updater(self, fs)
        return _point_updater(self, fs)

    def simulate_truth(self, times, s: RandomStream) -> np.ndarray:
        s0 = jump.JumpState(jump.sample_example_initial(1, s.derive(0))[0], 0.0)
        traj = jump.ssa_run(self.net, s0, float(times[-1]), s.derive(1), sample_times=times)
        return traj.states.astype(float)

    def expected_cost(self, n_particles: int, horizon: float) -> float:
        """Expected exact-SSA events for ``n_particles`` over ``horizon``."""
        return n_particles * jump.expected_ssa_events(self.net, jump.EXAMPLE_INITIAL, horizon)
