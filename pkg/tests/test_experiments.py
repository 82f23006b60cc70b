import csv
import json

import numpy as np
import pytest

from mspf import cli, experiments
from mspf.config import parse_text
from mspf.experiments import emit_plot_data, run_experiment

TINY_SDE = """
model = sde_bimodal
seed = 3
variants = standard, averaged, rao_blackwell, multiscale
n_particles = 20
n_obs = 3
Delta_s = 0.1
epsilon = 1e-2
Delta_t = 1e-2
delta_t = 1e-4
M = 10
M_weight = 50
"""

TINY_JUMP = """
model = jump_chemical
seed = 3
variants = standard, averaged, multiscale
n_particles = 10
n_obs = 2
Delta_s = 0.1
rate_scale = 1e-4
T_f = 0.002
M_s = 20
"""

TINY_LG = """
model = linear_gaussian
seed = 3
n_particles = 500
n_obs = 3
replications = 4
"""


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def sde_run(tmp_path):
    return run_experiment(parse_text(TINY_SDE), tmp_path / "sde")


def test_outputs_and_schema(sde_run):
    out = sde_run.out_dir
    for f in experiments.RUN_FILES + ("plot_truth.csv", "plot_estimates.csv", "plot_ess.csv", "plot_density.csv"):
        assert (out / f).is_file(), f
    est = _rows(out / "estimates.csv")
    # one row per (step, variant, f)
    assert len(est) == 3 * 4 * 2
    assert list(est[0]) == ["step", "time", "variant", "f_name", "estimate", "ess", "n_particles", "wall_ms"]
    assert all(r["wall_ms"] == "" for r in est)
    ess = _rows(out / "ess.csv")
    for r in ess:
        assert 1.0 - 1e-9 <= float(r["ess"]) <= int(r["n_particles"]) + 1e-9
        assert float(r["ess_pooled"]) <= int(r["n_evaluations"])
    m = json.loads((out / "manifest.json").read_text())
    assert m["seed"] == 3 and m["config"]["n_particles"] == 20
    assert set(m["wall_clock_ms"]) == {"standard", "averaged", "rao_blackwell", "multiscale"}
    assert "multiscale/standard" in m["wall_clock_ratio"]


def test_density_grid(sde_run):
    rows = np.loadtxt(sde_run.out_dir / "plot_density.csv", delimiter=",", skiprows=1)
    assert rows.shape == (400, 3)
    assert rows[0, 0] == -3.0 and rows[-1, 0] == 3.0
    assert abs(np.trapezoid(rows[:, 1], rows[:, 0]) - 1.0) < 1e-6
    assert np.all(rows[:, 2] >= 0)


def test_variants_share_observations(sde_run):
    # every variant reports at the same observation times
    est = _rows(sde_run.out_dir / "estimates.csv")
    times = {v: sorted({r["time"] for r in est if r["variant"] == v}) for v in {r["variant"] for r in est}}
    assert len({tuple(t) for t in times.values()}) == 1


def test_byte_identical_reruns(tmp_path):
    cfg = parse_text(TINY_SDE)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    for f in a.out_dir.glob("*.csv"):
        assert f.read_bytes() == (b.out_dir / f.name).read_bytes(), f.name


def test_seed_changes_outputs(tmp_path):
    cfg = parse_text(TINY_SDE)
    a = run_experiment(cfg, tmp_path / "a", variants=["rao_blackwell"])
    b = run_experiment(cfg, tmp_path / "b", seed=4, variants=["rao_blackwell"])
    assert (a.out_dir / "estimates.csv").read_bytes() != (b.out_dir / "estimates.csv").read_bytes()
    assert json.loads((b.out_dir / "manifest.json").read_text())["seed"] == 4


def test_loads_existing_observations(tmp_path, sde_run):
    cfg = parse_text(TINY_SDE + f"obs_path = {sde_run.out_dir / 'observations.csv'}\n")
    res = run_experiment(cfg, tmp_path / "again", variants=["multiscale"])
    assert (res.out_dir / "observations.csv").read_bytes() == (sde_run.out_dir / "observations.csv").read_bytes()
    assert res.truth is None


def test_jump_run_and_refusal(tmp_path):
    res = run_experiment(parse_text(TINY_JUMP), tmp_path / "j")
    assert set(res.outputs) == {"standard", "averaged", "multiscale"}
    assert res.observations.times[0] == 0.0 and len(res.observations) == 3
    tight = parse_text(TINY_JUMP + "cost_budget = 100\n")
    res = run_experiment(tight, tmp_path / "k", variants=["standard"])
    m = res.manifest
    assert m["variants_run"] == []
    assert m["refusals"][0]["variant"] == "standard"
    assert m["refusals"][0]["expected_events"] > m["refusals"][0]["cost_budget"]


def test_linear_gaussian_oracle_csv(tmp_path):
    res = run_experiment(parse_text(TINY_LG), tmp_path / "lg")
    rows = _rows(res.out_dir / "oracle.csv")
    assert len(rows) == 3 * 2
    assert {r["n_replications"] for r in rows} == {"4"}
    assert all(float(r["bootstrap_se"]) > 0 for r in rows)


def test_failure_removes_partial_outputs(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise experiments.flt.FilterCollapseError(2)

    monkeypatch.setattr(experiments.flt, "run_filter", boom)
    out = tmp_path / "fail"
    out.mkdir()
    (out / "keep.txt").write_text("mine")
    with pytest.raises(experiments.flt.FilterCollapseError):
        run_experiment(parse_text(TINY_SDE), out)
    assert sorted(p.name for p in out.iterdir()) == ["keep.txt"]


def test_plot_data_lists_missing(tmp_path):
    with pytest.raises(FileNotFoundError) as err:
        emit_plot_data(tmp_path)
    for f in ("truth.csv", "estimates.csv", "ess.csv", "manifest.json"):
        assert f in str(err.value)


def test_diagnose_outputs(tmp_path):
    cfg = parse_text("model = sde_bimodal\nepsilon = 1e-3\ndelta_t = 1e-5\ndiagnose_particles = 30\n")
    rep = experiments.run_diagnose(cfg, 8, tmp_path / "d", n_pool=500)
    assert rep.R == 8
    rows = _rows(tmp_path / "d" / "replications.csv")
    assert list(rows[0]) == ["replication", "variant", "f_name", "estimate"]
    assert len(rows) == 8 * 2 * 4
    summary = _rows(tmp_path / "d" / "summary.csv")
    assert list(summary[0]) == ["variant", "f_name", "variance", "ci_lo", "ci_hi"]


# ---------------------------------------------------------------- CLI


def _write(tmp_path, text, name="c.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_cli_run_exit_zero(tmp_path, capsys):
    cfg = _write(tmp_path, TINY_SDE)
    code = cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "9",
                     "--variants", "multiscale,rao_blackwell"])
    assert code == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["seed"] == 9 and m["variants_run"] == ["multiscale", "rao_blackwell"]


def test_cli_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("MSPF_SEED", "21")
    cfg = _write(tmp_path, TINY_SDE)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--variants", "rao_blackwell"]) == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 21


def test_cli_gen_data(tmp_path):
    cfg = _write(tmp_path, TINY_JUMP)
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "g")]) == 0
    assert sorted(p.name for p in (tmp_path / "g").iterdir()) == ["observations.csv", "truth.csv"]


def test_cli_diagnose(tmp_path):
    cfg = _write(tmp_path, "model = linear_gaussian\ndiagnose_particles = 20\n")
    assert cli.main(["diagnose", "--config", cfg, "--replications", "5", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "summary.csv").is_file()


@pytest.mark.parametrize("args", [
    ["run", "--config", "/nonexistent.cfg"],
    ["run"],
    ["bogus"],
    ["run", "--config", "CFG", "--seed", "-1"],
    ["run", "--config", "CFG", "--variants", "nope"],
    ["diagnose", "--config", "JUMP", "--replications", "5"],
])
def test_cli_validation_errors_exit_one(tmp_path, args):
    cfg = _write(tmp_path, TINY_SDE)
    jcfg = _write(tmp_path, TINY_JUMP, "j.cfg")
    args = [cfg if a == "CFG" else jcfg if a == "JUMP" else a for a in args]
    assert cli.main(args) == 1


def test_cli_numeric_error_exits_two(tmp_path):
    # micro steps far too coarse for the quartic potential blow up
    cfg = _write(tmp_path, TINY_SDE.replace("delta_t = 1e-4", "delta_t = 1e-2").replace("M = 10", "M = 2000"))
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--variants", "multiscale"]) == 2
    assert not (tmp_path / "o" / "estimates.csv").exists()
