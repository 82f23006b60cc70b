import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from mspf import filtering as flt
from mspf import sde
from mspf.errors import ContractViolationError, FilterCollapseError, NumericError
from mspf.observations import GaussianObservation, ObservationSequence
from mspf.rng import RandomStream

# std giving a unit-peak density: log g = -pi * residual^2
UNIT_PEAK = 1.0 / math.sqrt(2.0 * math.pi)

log_weights = hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-30, 30))


# ---------------------------------------------------------------- point weights


def test_point_weight_zero_residual():
    obs = GaussianObservation((0, 1), (1.0,))
    lw = flt.point_weight(np.array([[0.3, -2.0]]), np.array([0.3, -2.0]), obs)
    assert lw[0] == pytest.approx(-math.log(2 * math.pi))


def test_point_weight_closed_form():
    obs = GaussianObservation((1,), (0.1,))
    lw = flt.point_weight(np.array([[5.0, 0.1]]), np.array([0.0]), obs)
    assert lw[0] == pytest.approx(math.log(1 / (0.1 * math.sqrt(2 * math.pi))) - 0.5, rel=1e-12)


def test_point_weight_depends_on_state_only():
    obs = GaussianObservation((1,), (0.1,))
    lw = flt.point_weight(np.array([[1.0, 0.2], [1.0, 0.2]]), np.array([0.0]), obs)
    assert lw[0] == lw[1]


def test_point_weight_needs_single_sample():
    obs = GaussianObservation((1,), (0.1,))
    with pytest.raises(ContractViolationError):
        flt.point_weight(np.zeros((3, 4, 2)), np.zeros(1), obs)


# ---------------------------------------------------------------- averaged weights

FS = {"x": lambda a: a[..., 0], "y": lambda a: a[..., 1]}


def test_averaged_weight_m1_is_point_weight():
    obs = GaussianObservation((1,), (0.3,))
    traj = RandomStream(0).generator.standard_normal((5, 1, 2))
    avg = flt.averaged_weight(traj, np.array([0.2]), obs, FS)
    pt = flt.point_weight_evaluation(traj[:, 0, :], np.array([0.2]), obs, FS)
    assert np.allclose(avg.log_weight, pt.log_weight, rtol=0, atol=1e-14)
    for k in FS:
        assert np.allclose(avg.local_means[k], pt.local_means[k])


def test_averaged_weight_y_independent_g():
    obs = GaussianObservation((0,), (0.3,))
    traj = RandomStream(1).generator.standard_normal((4, 50, 2))
    traj[:, :, 0] = traj[:, :1, 0]
    avg = flt.averaged_weight(traj, np.array([0.1]), obs, FS)
    assert np.allclose(avg.log_weight, obs.log_likelihood(traj[:, 0, :], np.array([0.1])), atol=1e-12)


def test_averaged_weight_two_terms():
    obs = GaussianObservation((1,), (UNIT_PEAK,))
    r = math.sqrt(2.0 / math.pi)
    traj = np.array([[[0.0, 0.0], [0.0, r]]])
    avg = flt.averaged_weight(traj, np.array([0.0]), obs, FS)
    assert avg.log_weight[0] == pytest.approx(math.log((1 + math.exp(-2)) / 2), rel=1e-12)
    # local mean of y is the g-weighted average over the trajectory
    assert avg.local_means["y"][0] == pytest.approx(r * math.exp(-2) / (1 + math.exp(-2)), rel=1e-12)


def test_averaged_weight_empty_trajectory():
    obs = GaussianObservation((1,), (1.0,))
    with pytest.raises(ContractViolationError):
        flt.averaged_weight(np.zeros((3, 0, 2)), np.zeros(1), obs, FS)


def test_averaged_weight_underflow_safe():
    obs = GaussianObservation((1,), (0.1,))
    traj = np.full((2, 3, 2), 50.0)
    avg = flt.averaged_weight(traj, np.array([0.0]), obs, FS)
    assert np.all(np.isfinite(avg.log_weight)) and np.all(avg.log_weight < -1e4)


# ---------------------------------------------------------------- quadrature weights

BIMODAL = sde.bimodal_sde()


def _assemble(slow, fast):
    slow = np.broadcast_to(slow[:, None, :], fast.shape[:2] + (slow.shape[-1],))
    return np.concatenate([slow, fast], axis=-1)


def test_quadrature_normalization():
    # g observes x exactly at its unit-peak value so g == 1
    obs = GaussianObservation((0,), (UNIT_PEAK,))
    x = np.array([[0.5]])
    fs = {"one": lambda a: np.ones(a.shape[:-1])}
    ev = flt.quadrature_weight(x, np.array([0.5]), obs, BIMODAL.fast_log_density, _assemble, fs,
                               BIMODAL.fast_support(x))
    assert ev.log_weight[0] == pytest.approx(0.0, abs=1e-9)
    assert ev.local_means["one"][0] == pytest.approx(1.0, abs=1e-9)


def test_quadrature_odd_integrand_vanishes():
    obs = GaussianObservation((1,), (0.5,))  # g even in y when z = 0
    x = np.array([[0.7], [1.3]])
    ev = flt.quadrature_weight(x, np.array([0.0]), obs, BIMODAL.fast_log_density, _assemble, FS,
                               BIMODAL.fast_support(x))
    assert np.allclose(ev.local_means["y"], 0.0, atol=1e-9)


def test_quadrature_matches_trapezoid_oracle():
    obs = GaussianObservation((1,), (0.1,))
    x = np.array([[1.0]])
    ev = flt.quadrature_weight(x, np.array([1.0]), obs, BIMODAL.fast_log_density, _assemble, FS,
                               BIMODAL.fast_support(x))
    y = np.linspace(-5.0, 5.0, 10**6)
    mu = np.exp(-((1.0 - y**2) ** 2))
    mu /= np.trapezoid(mu, y)
    g = np.exp(-0.5 * ((y - 1.0) / 0.1) ** 2) / (0.1 * math.sqrt(2 * math.pi))
    mug = np.trapezoid(mu * g, y)
    mufg = np.trapezoid(mu * g * y, y)
    assert math.exp(ev.log_weight[0]) == pytest.approx(mug, rel=1e-6)
    # local mean is [mu f g] / [mu g]
    assert ev.local_means["y"][0] * math.exp(ev.log_weight[0]) == pytest.approx(mufg, rel=1e-6)


def test_quadrature_tolerance_failure_reports_achieved():
    obs = GaussianObservation((1,), (1e-3,))
    x = np.array([[1.0]])
    with pytest.raises(NumericError, match="achieved"):
        flt.quadrature_weight(x, np.array([1.0]), obs, BIMODAL.fast_log_density, _assemble, FS,
                              BIMODAL.fast_support(x), rtol=1e-14, min_level=3, max_level=5)


# ---------------------------------------------------------------- estimate and ESS


def test_estimate_single_particle():
    assert flt.estimate(np.array([-7.0]), {"f": np.array([2.5])})["f"] == 2.5


@given(log_weights, st.floats(-100, 100))
def test_estimate_constant_function(lw, c):
    assert flt.estimate(lw, {"f": np.full(lw.shape, c)})["f"] == pytest.approx(c, rel=1e-12, abs=1e-12)


def test_estimate_hand_example():
    est = flt.estimate(np.log([1.0, 3.0]), {"f": np.array([0.0, 4.0])})
    assert est["f"] == pytest.approx(3.0, rel=1e-14)


def test_estimate_zero_denominator():
    with pytest.raises(FilterCollapseError, match="step 4"):
        flt.estimate(np.full(3, -np.inf), {"f": np.zeros(3)}, step=4)


def test_ess_hand_values():
    assert flt.effective_sample_size(np.zeros(1000)) == pytest.approx(1000.0)
    lw = np.full(50, -np.inf)
    lw[7] = 0.0
    assert flt.effective_sample_size(lw) == pytest.approx(1.0)
    assert flt.effective_sample_size(np.log([1.0, 1.0, 2.0, 2.0])) == pytest.approx(3.6, rel=1e-12)


@given(log_weights, st.floats(-50, 50))
def test_ess_bounds_and_scale_invariance(lw, shift):
    ess = flt.effective_sample_size(lw)
    assert 1.0 - 1e-9 <= ess <= len(lw) + 1e-9
    assert flt.effective_sample_size(lw + shift) == pytest.approx(ess, rel=1e-9)
    est = flt.estimate(lw, {"f": np.arange(len(lw), dtype=float)})["f"]
    assert flt.estimate(lw + shift, {"f": np.arange(len(lw), dtype=float)})["f"] == pytest.approx(est, rel=1e-9)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 10), st.integers(1, 10)), elements=st.floats(-20, 20)))
def test_pooled_ess_bounds(lw):
    n, M = lw.shape
    ess = flt.effective_sample_size(lw)
    # numerator n over n*M evaluations: ranges from n/(n*M) to n
    assert 1.0 / M - 1e-9 <= ess <= n + 1e-9


def test_ess_collapse():
    with pytest.raises(FilterCollapseError):
        flt.effective_sample_size(np.full(4, -np.inf), step=2)
    with pytest.raises(NumericError):
        flt.effective_sample_size(np.array([0.0, np.nan]))


@given(log_weights)
def test_normalized_weights_sum_to_one(lw):
    w = flt.normalize_log_weights(lw)
    assert abs(w.sum() - 1.0) <= 1e-12 * len(lw)


# ---------------------------------------------------------------- resampling


def _ensemble(n=6, d=2, lw=None, fast=True):
    slow = np.arange(n * d, dtype=float).reshape(n, d)
    return flt.WeightedEnsemble(slow, np.zeros(n) if lw is None else lw,
                                carry=slow[:, :1].copy(), fast=slow[:, :1] + 0.5 if fast else None,
                                step_index=3)


def test_resample_degenerate():
    lw = np.full(6, -np.inf)
    lw[2] = 0.0
    out = flt.resample_multinomial(_ensemble(lw=lw), RandomStream(0), n_out=9)
    assert out.n == 9
    assert np.all(out.slow == _ensemble().slow[2])
    assert np.all(out.log_weights == 0.0)


def test_resample_deterministic():
    lw = np.log(np.arange(1.0, 7.0))
    a = flt.resample_multinomial(_ensemble(lw=lw), RandomStream(5))
    b = flt.resample_multinomial(_ensemble(lw=lw), RandomStream(5))
    assert np.array_equal(a.slow, b.slow)


def test_resample_marginal_drops_fast():
    out = flt.resample_multinomial(_ensemble(), RandomStream(0), marginal=True)
    assert out.fast is None and out.carry is not None
    assert flt.resample_multinomial(_ensemble(), RandomStream(0)).fast is not None


def test_resample_collapse_names_step():
    with pytest.raises(FilterCollapseError, match="step 3"):
        flt.resample_multinomial(_ensemble(lw=np.full(6, -np.inf)), RandomStream(0))


@pytest.mark.parametrize("method", ["multinomial", "systematic"])
def test_resampling_preserves_expectation(method):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(20)
    lw = rng.normal(0, 1, 20)
    target = np.dot(flt.normalize_log_weights(lw), x)
    e = flt.WeightedEnsemble(x[:, None], lw)
    means = np.array([
        flt.resample_multinomial(e, RandomStream(1, (r,)), method=method).slow.mean() for r in range(10**4)
    ])
    se = means.std(ddof=1) / math.sqrt(len(means))
    assert abs(means.mean() - target) < 3 * se


def test_uniform_bootstrap_unbiased():
    x = np.random.default_rng(1).standard_normal(30)
    e = flt.WeightedEnsemble(x[:, None], np.zeros(30))
    means = np.array([flt.resample_multinomial(e, RandomStream(2, (r,))).slow.mean() for r in range(10**4)])
    assert abs(means.mean() - x.mean()) < 3 * means.std(ddof=1) / 100


# ---------------------------------------------------------------- filter step / run


class ToyBackend:
    """x' = x + N(0, 1) per interval; g observes x; for wiring tests."""

    def __init__(self, obs_std=1.0, n_fast=1):
        self.obs = GaussianObservation((0,), (obs_std,))
        self.test_functions = {"x": lambda a: a[..., 0]}
        self.n_fast = n_fast

    def initial(self, n, s):
        return s.generator.standard_normal((n, 1)), None

    def initial_prediction(self, slow, carry):
        return flt.Prediction(slow, None, slow)

    def transition_sampler(self, variant):
        def ts(slow, carry, horizon, s):
            x = slow + math.sqrt(horizon) * s.generator.standard_normal(slow.shape)
            return flt.Prediction(x, None, x)
        return ts

    def weight_updater(self, variant, fs):
        def wu(pred, z):
            return flt.point_weight_evaluation(pred.slow, z, self.obs, fs)
        return wu


def _identity(slow, carry, horizon, s):
    return flt.Prediction(slow, carry, slow)


def _flat(pred, z):
    return flt.WeightEvaluation(np.zeros(pred.slow.shape[0]), {"x": pred.slow[:, 0]})


def test_step_identity_kernel_flat_weights():
    x = np.random.default_rng(3).standard_normal((5000, 1))
    e = flt.WeightedEnsemble(x, np.zeros(5000))
    cfg = flt.FilterConfig(5000, 1.0)
    out, diag = flt.filter_step(e, np.zeros(1), 1.0, _identity, _flat, cfg, RandomStream(0))
    assert diag.estimates["x"] == pytest.approx(x.mean(), abs=1e-12)
    assert diag.ess == pytest.approx(5000.0)
    assert out.step_index == 1 and np.all(out.log_weights == 0)
    assert abs(out.slow.mean() - x.mean()) < 4 * x.std() / math.sqrt(5000)


def test_step_single_particle():
    e = flt.WeightedEnsemble(np.array([[0.5]]), np.zeros(1))
    b = ToyBackend()
    cfg = flt.FilterConfig(1, 1.0)
    out, diag = flt.filter_step(e, np.array([3.0]), 1.0, b.transition_sampler("standard"),
                                b.weight_updater("standard", b.test_functions), cfg, RandomStream(1))
    assert diag.ess == pytest.approx(1.0)
    assert out.n == 1
    assert flt.normalize_log_weights(out.log_weights)[0] == 1.0


def test_step_collapse_carries_step_index():
    def dead(pred, z):
        return flt.WeightEvaluation(np.full(pred.slow.shape[0], -np.inf), {"x": pred.slow[:, 0]})

    e = flt.WeightedEnsemble(np.zeros((3, 1)), np.zeros(3), step_index=6)
    with pytest.raises(FilterCollapseError, match="step 7"):
        flt.filter_step(e, np.zeros(1), 7.0, _identity, dead, flt.FilterConfig(3, 1.0), RandomStream(0))


def test_adaptive_resampling_threshold():
    lw = np.log(np.array([1.0, 1.0, 1.0, 2.0]))

    def wu(pred, z):
        return flt.WeightEvaluation(lw, {"x": pred.slow[:, 0]})

    e = flt.WeightedEnsemble(np.zeros((4, 1)), np.zeros(4))
    _, kept = flt.filter_step(e, 0, 1.0, _identity, wu, flt.FilterConfig(4, 1.0, resample_threshold=0.5),
                              RandomStream(0))
    _, forced = flt.filter_step(e, 0, 1.0, _identity, wu, flt.FilterConfig(4, 1.0), RandomStream(0))
    assert not kept.resampled and forced.resampled


def test_run_filter_flat_weights_matches_pushforward():
    # g nearly flat: estimate is the mean of N(0,1) pushed through one unit step, i.e. 0
    b = ToyBackend(obs_std=1e6)
    obs = ObservationSequence(np.array([1.0]), np.array([[0.0]]))
    cfg = flt.FilterConfig(10**5, 1.0, n_observations=1)
    out = flt.run_filter(b, obs, cfg, RandomStream(4))
    # pushforward variance is 2
    assert abs(out.estimates("x")[0]) < 3 * math.sqrt(2.0 / 10**5)


def test_run_filter_output_schema(tmp_path):
    b = ToyBackend()
    obs = ObservationSequence(np.arange(1.0, 4.0), np.zeros((3, 1)))
    out = flt.run_filter(b, obs, flt.FilterConfig(50, 1.0), RandomStream(0))
    flt.write_outputs_csv(tmp_path / "e.csv", [out])
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == ",".join(flt.ESTIMATE_HEADER)
    assert len(lines) == 1 + 3
    # wall_ms is left empty unless requested, so files stay byte-stable
    assert lines[1].endswith(",")


def test_run_filter_observation_at_zero_uses_initial_states():
    b = ToyBackend()
    obs = ObservationSequence(np.array([0.0, 1.0]), np.zeros((2, 1)))
    out = flt.run_filter(b, obs, flt.FilterConfig(20, 1.0), RandomStream(0))
    assert out.times().tolist() == [0.0, 1.0]


def test_run_filter_rejects_length_mismatch():
    obs = ObservationSequence(np.array([1.0]), np.zeros((1, 1)))
    with pytest.raises(ContractViolationError):
        flt.run_filter(ToyBackend(), obs, flt.FilterConfig(5, 1.0, n_observations=2), RandomStream(0))


def test_config_validation():
    from mspf.errors import InvalidParameterError

    for bad in (dict(n_particles=0, delta_s=1.0), dict(n_particles=5, delta_s=0.0),
                dict(n_particles=5, delta_s=1.0, variant="nope"),
                dict(n_particles=5, delta_s=1.0, resample_threshold=0.0)):
        with pytest.raises((InvalidParameterError, ValueError)):
            flt.FilterConfig(**bad)
