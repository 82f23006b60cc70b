"""Experiment orchestration: build backends from a config, generate or load
data, run the requested filter variants on one observation file, and write
CSV outputs plus a JSON manifest."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mspf import __version__
from mspf import diagnostics as dg
from mspf import filtering as flt
from mspf import jump, sde
from mspf.backends import JumpBackend, SdeBackend
from mspf.config import ExperimentConfig, macro_steps
from mspf.errors import ContractViolationError, MspfError
from mspf.observations import (
    GaussianObservation,
    ObservationSequence,
    Truth,
    generate_truth_and_observations,
    read_table,
    write_table,
)
from mspf.rng import RandomStream, resolve_seed

log = logging.getLogger(__name__)

# stream ids under the run's root stream
DATA_STREAM, FILTER_STREAM, DENSITY_STREAM, REPLICATE_STREAM, BOOTSTRAP_STREAM, DIAGNOSE_STREAM = range(6)

RUN_FILES = ("truth.csv", "observations.csv", "estimates.csv", "ess.csv", "manifest.json")
PLOT_INPUTS = ("truth.csv", "estimates.csv", "ess.csv", "manifest.json")
ORACLE_HEADER = ["step", "time", "f_name", "kalman_mean", "kalman_var", "estimate_mean",
                 "bootstrap_se", "n_replications", "z_score"]
DENSITY_GRID = (-3.0, 3.0, 400)
DENSITY_X = 1.0


def build_backend(cfg: ExperimentConfig):
    if cfg.model == "jump_chemical":
        net = jump.build_example_network(cfg.rate_scale)
        obs = GaussianObservation(tuple(range(net.n_species)), (cfg.obs_std,))
        return JumpBackend(net, obs, T_f=cfg.T_f, M_s=cfg.M_s, T_weight=cfg.T_weight,
                           burn_frac=cfg.burn_frac)
    if cfg.model == "sde_bimodal":
        model = sde.bimodal_sde(cfg.epsilon)
        obs = GaussianObservation((1,), (cfg.obs_std,))
    else:
        model = sde.linear_sde(cfg.epsilon)
        obs = GaussianObservation((0, 1), (cfg.obs_std,))
    ms = sde.MultiscaleConfig(cfg.Delta_t, cfg.delta_t, cfg.M, macro_steps(cfg), cfg.burn_in,
                              cfg.warm_start, cfg.M_weight)
    return SdeBackend(model, ms, obs, fine_dt=cfg.delta_t)


@dataclass
class RunResult:
    out_dir: Path
    outputs: dict[str, flt.FilterOutput]
    manifest: dict
    truth: Truth | None = None
    observations: ObservationSequence | None = None
    files: list[Path] = field(default_factory=list)


def load_or_generate(cfg: ExperimentConfig, backend, root: RandomStream, out_dir: Path | None):
    if cfg.obs_path is not None:
        obs = ObservationSequence.from_csv(cfg.obs_path)
        truth = Truth.from_csv(cfg.truth_path) if cfg.truth_path is not None else None
        if out_dir is not None:
            obs.to_csv(out_dir / "observations.csv")
            if truth is not None:
                truth.to_csv(out_dir / "truth.csv")
        return truth, obs
    return generate_truth_and_observations(
        backend, cfg.n_obs * cfg.Delta_s, cfg.Delta_s, backend.obs, root.derive(DATA_STREAM),
        cfg.observe_at_zero, out_dir,
    )


def filter_config(cfg: ExperimentConfig, variant: str, n_obs: int) -> flt.FilterConfig:
    return flt.FilterConfig(cfg.n_particles, cfg.Delta_s, variant, n_obs,
                            cfg.resample_threshold, cfg.resampling)


def _refusal(cfg, backend, variant):
    """Exact SSA is refused when its expected event count exceeds the budget."""
    if cfg.model != "jump_chemical" or variant != "standard":
        return None
    cost = backend.expected_cost(cfg.n_particles, cfg.n_obs * cfg.Delta_s)
    if cost <= cfg.cost_budget:
        return None
    return {"variant": variant, "reason": "expected exact-SSA cost exceeds budget",
            "expected_events": cost, "cost_budget": cfg.cost_budget}


def run_experiment(cfg: ExperimentConfig, out_dir=None, seed: int | None = None,
                   variants=None, plot_data: bool = True) -> RunResult:
    """Run every requested variant on one shared observation file.

    Writes truth.csv, observations.csv, estimates.csv, ess.csv and
    manifest.json into ``out_dir`` (default ``cfg.out_dir``). Files created
    by a failed run are removed before the error propagates.
    """
    seed = resolve_seed(seed, cfg.seed)
    variants = tuple(cfg.variants if variants is None else variants)
    for v in variants:
        if v not in flt.VARIANTS:
            raise ContractViolationError(f"unknown variant {v!r}")
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    before = set(out.iterdir())
    try:
        return _run(cfg, out, seed, variants, plot_data)
    except BaseException:
        for p in set(out.iterdir()) - before:
            if p.is_file():
                p.unlink()
        raise


def _run(cfg, out, seed, variants, plot_data):
    root = RandomStream(seed)
    backend = build_backend(cfg)
    for v in variants:
        if v not in backend.variants:
            raise ContractViolationError(f"variant {v!r} is not available for model {cfg.model}")
    truth, obs = load_or_generate(cfg, backend, root, out)
    outputs, refusals, wall = {}, [], {}
    for v in variants:
        refused = _refusal(cfg, backend, v)
        if refused is not None:
            log.warning("refusing %s: %.3g expected events > budget %.3g", v,
                        refused["expected_events"], cfg.cost_budget)
            refusals.append(refused)
            continue
        log.info("running %s (n=%d, %d observations)", v, cfg.n_particles, len(obs))
        fo = flt.run_filter(backend, obs, filter_config(cfg, v, len(obs)),
                            root.derive(FILTER_STREAM).derive(flt.VARIANT_IDS[v]))
        outputs[v] = fo
        wall[v] = fo.wall_ms
    files = [out / "observations.csv"] + ([out / "truth.csv"] if truth is not None else [])
    flt.write_outputs_csv(out / "estimates.csv", list(outputs.values()), cfg.record_wall_clock)
    flt.write_ess_csv(out / "ess.csv", list(outputs.values()))
    files += [out / "estimates.csv", out / "ess.csv"]
    manifest = _manifest(cfg, seed, variants, outputs, refusals, wall, len(obs))
    if cfg.model == "linear_gaussian" and "standard" in outputs:
        manifest["oracle"] = write_oracle_comparison(cfg, backend, obs, root, outputs["standard"],
                                                     out / "oracle.csv")
        files.append(out / "oracle.csv")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    files.append(out / "manifest.json")
    if plot_data and truth is not None:
        files += emit_plot_data(out)
    return RunResult(out, outputs, manifest, truth, obs, files)


def _manifest(cfg, seed, variants, outputs, refusals, wall, n_obs):
    m = {
        "package_version": __version__,
        "config": cfg.echo(),
        "config_source": cfg.source,
        "seed": seed,
        "variants_requested": list(variants),
        "variants_run": list(outputs),
        "n_observations": n_obs,
        "refusals": refusals,
        "wall_clock_ms": wall,
        "reference_figures": {
            "sde_multiscale_vs_standard_time": "about half",
            "jump_exact_vs_multiscale_cost": "almost 1000 times",
        },
    }
    if cfg.model == "jump_chemical":
        backend_net = jump.build_example_network(cfg.rate_scale)
        m["jump_prediction"] = {
            "T_f": cfg.T_f, "T_weight": cfg.T_weight if cfg.T_weight is not None else cfg.T_f,
            "M_s": cfg.M_s, "burn_frac": cfg.burn_frac, "n_particles": cfg.n_particles,
            "separation_at_initial_state": jump.separation(backend_net, jump.EXAMPLE_INITIAL),
        }
    ratios = {}
    if "standard" in wall:
        for v, ms in wall.items():
            if v != "standard" and wall["standard"] > 0:
                ratios[f"{v}/standard"] = ms / wall["standard"]
    m["wall_clock_ratio"] = ratios
    return m


# ---------------------------------------------------------------- Kalman comparison


def write_oracle_comparison(cfg, backend: SdeBackend, obs: ObservationSequence, root: RandomStream,
                            primary: flt.FilterOutput, path: Path, n_boot: int = 2000) -> dict:
    """Compare the mean of ``cfg.replications`` independent standard-filter runs
    with the exact Kalman posterior of the discretized linear model."""
    n_sub = sde.n_steps(cfg.Delta_s, cfg.delta_t)
    oracle = dg.kalman_oracle(dg.slow_fast_linear_model(cfg.epsilon, cfg.delta_t, n_sub, cfg.obs_std), obs)
    names = list(backend.test_functions)
    runs = [np.column_stack([primary.estimates(f) for f in names])]
    fcfg = filter_config(cfg, "standard", len(obs))
    for r in range(1, cfg.replications):
        fo = flt.run_filter(backend, obs, fcfg, root.derive(REPLICATE_STREAM).derive(r))
        runs.append(np.column_stack([fo.estimates(f) for f in names]))
    runs = np.array(runs)  # (R, steps, f)
    idx = root.derive(BOOTSTRAP_STREAM).generator.integers(0, len(runs), (n_boot, len(runs)))
    se = runs[idx].mean(axis=1).std(axis=0, ddof=1)
    mean = runs.mean(axis=0)
    z = (mean - oracle.means) / se
    rows = []
    for k, t in enumerate(obs.times):
        for i, name in enumerate(names):
            rows.append([k + 1, t, name, oracle.means[k, i], oracle.covs[k, i, i], mean[k, i],
                         se[k, i], len(runs), z[k, i]])
    write_table(path, ORACLE_HEADER, rows)
    return {"replications": len(runs), "max_abs_z": float(np.max(np.abs(z)))}


# ---------------------------------------------------------------- plot data


def _read_rows(path: Path):
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def emit_plot_data(out_dir) -> list[Path]:
    """Tidy CSVs for the four figure families of a completed run.

    plot_truth.csv (time, coordinate, value); plot_estimates.csv (step, time,
    variant, f_name, estimate, truth); plot_ess.csv (step, time, variant,
    ess, ess_pooled); and, for sde_bimodal runs, plot_density.csv
    (y, mu_analytic, mu_empirical) at x = 1.
    """
    out = Path(out_dir)
    missing = [f for f in PLOT_INPUTS if not (out / f).is_file()]
    if missing:
        raise FileNotFoundError(f"run artifacts missing in {out}: expected {', '.join(missing)}")
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = manifest["config"]
    truth = read_table(out / "truth.csv")
    written = []

    rows = [[t, j + 1, v] for t, *states in truth for j, v in enumerate(states)]
    write_table(out / "plot_truth.csv", ["time", "coordinate", "value"], rows)
    written.append(out / "plot_truth.csv")

    truth_at = {round(t, 12): states for t, *states in truth}
    _, est = _read_rows(out / "estimates.csv")
    fnames = []
    for r in est:
        if r[3] not in fnames:
            fnames.append(r[3])
    rows = []
    for r in est:
        t = float(r[1])
        states = truth_at.get(round(t, 12))
        tv = states[fnames.index(r[3])] if states is not None and fnames.index(r[3]) < len(states) else np.nan
        rows.append([int(r[0]), t, r[2], r[3], float(r[4]), tv])
    write_table(out / "plot_estimates.csv",
                 ["step", "time", "variant", "f_name", "estimate", "truth"], rows)
    written.append(out / "plot_estimates.csv")

    _, ess = _read_rows(out / "ess.csv")
    rows = [[int(r[0]), float(r[1]), r[2], float(r[3]), float(r[4])] for r in ess]
    write_table(out / "plot_ess.csv", ["step", "time", "variant", "ess", "ess_pooled"], rows)
    written.append(out / "plot_ess.csv")

    if cfg["model"] == "sde_bimodal":
        grid, analytic, empirical = density_grid(
            cfg["epsilon"], cfg["delta_t"], RandomStream(manifest["seed"]).derive(DENSITY_STREAM))
        write_table(out / "plot_density.csv", ["y", "mu_analytic", "mu_empirical"],
                    np.column_stack([grid, analytic, empirical]))
        written.append(out / "plot_density.csv")
    return written


def density_grid(epsilon: float, delta_t: float, s: RandomStream, x: float = DENSITY_X,
                 chains: int = 100, samples_per_chain: int = 10_000):
    """Analytic fast density at ``x`` on a 400-point grid over [-3, 3] next to
    a histogram estimate from the micro-solver evaluated at the grid points."""
    lo, hi, n = DENSITY_GRID
    model = sde.bimodal_sde(epsilon)
    grid = np.linspace(lo, hi, n)
    xs = np.full((1, 1), x)
    analytic = np.exp(model.fast_log_density(xs, grid[None, :])[0])
    analytic /= np.trapezoid(analytic, grid)
    ms = sde.MultiscaleConfig(Delta_t=delta_t, delta_t=delta_t, M=samples_per_chain, L=1,
                              burn_in=samples_per_chain // 10)
    traj = sde.micro_trajectory(model, np.full((chains, 1), x), np.zeros((chains, 1)), ms, s)
    ys = traj.samples.reshape(-1)
    # bins centred on grid points so the estimate is read off at the grid itself
    step = grid[1] - grid[0]
    edges = np.concatenate([grid - step / 2, [grid[-1] + step / 2]])
    counts, _ = np.histogram(ys, bins=edges)
    empirical = counts / (ys.size * step)
    return grid, analytic, empirical


# ---------------------------------------------------------------- diagnose


def default_diagnose_functions(d_x: int = 1):
    return {
        "x": lambda a: a[..., 0],
        "y": lambda a: a[..., d_x],
        "y2": lambda a: a[..., d_x] ** 2,
        "x2": lambda a: a[..., 0] ** 2,
    }


def run_diagnose(cfg: ExperimentConfig, replications: int | None = None, out_dir=None,
                 seed: int | None = None, z=None, n_pool: int = 20_000) -> dg.ReplicationReport:
    """Paired point-weight vs quadrature-weight replications of one update.

    The predictive law is approximated by ``n_pool`` particles from N(0, 1)
    pushed through the averaged dynamics over one observation interval.
    """
    if cfg.model == "jump_chemical":
        raise ContractViolationError("diagnose needs an analytic fast measure; jump_chemical has none")
    seed = resolve_seed(seed, cfg.seed)
    R = cfg.replications if replications is None else int(replications)
    backend = build_backend(cfg)
    m = backend.model
    root = RandomStream(seed).derive(DIAGNOSE_STREAM)
    pool = dg.predictive_pool(m, n_pool, cfg.Delta_t, cfg.Delta_s, root.derive(0))
    z = np.ones(backend.obs.dim) if z is None else np.atleast_1d(z)
    runner = dg.one_step_runner(m, backend.obs, z, default_diagnose_functions(m.d_x),
                                cfg.diagnose_particles, pool)
    report = dg.replication_variance(
        runner, R, root.derive(1),
        note=f"predictive law approximated by {n_pool} averaged-dynamics particles from N(0,1)",
    )
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "replications.csv", dg.REPLICATION_HEADER, list(report.replication_rows()))
    write_table(out / "summary.csv", dg.SUMMARY_HEADER, list(report.summary_rows()))
    verdict = dg.jensen_check(report)
    info = {"seed": seed, "replications": R, "note": report.note, "z": z.tolist(),
            "jensen_holds": verdict.holds,
            "ratio": dict(zip(report.f_names, report.ratio.tolist()))}
    (out / "diagnose.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return report


def generate_data(cfg: ExperimentConfig, out_dir=None, seed: int | None = None):
    seed = resolve_seed(seed, cfg.seed)
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return load_or_generate(cfg, build_backend(cfg), RandomStream(seed), out)


__all__ = [
    "build_backend", "run_experiment", "emit_plot_data", "run_diagnose", "generate_data",
    "density_grid", "RunResult", "MspfError",
]
