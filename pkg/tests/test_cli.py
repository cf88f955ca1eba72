"""End-to-end subcommand behavior, exit codes, and determinism."""

import json
import os
import subprocess
import sys

import pytest

from cbpabc.archive import load_archive
from cbpabc.cli import main
from cbpabc.config import load_config
from cbpabc.datasets import load_observations

SIM_CFG = """\
offspring = geometric:0.4
gamma = 0.75
z0 = 10
generations = 8
seed = 77
"""

RUN_CFG = """\
observations = {obs}
kappa_max = 4
pool_sizes = 2000,8000
particles = 200
keep_fraction = 0.2
seed = 5
"""


def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """simulate once, smc once; later tests only read the outputs."""
    root = tmp_path_factory.mktemp("cli")
    sim_cfg = root / "sim.cfg"
    sim_cfg.write_text(SIM_CFG + f"out = {root / 'sim'}\n")
    assert main(["simulate", "--config", str(sim_cfg)]) == 0
    obs = root / "sim" / "trajectory.csv"

    run_cfg = root / "run.cfg"
    run_cfg.write_text(RUN_CFG.format(obs=obs) + f"out = {root / 'smc'}\n")
    assert main(["smc", "--config", str(run_cfg)]) == 0
    return {"root": root, "sim_cfg": sim_cfg, "run_cfg": run_cfg, "obs": obs,
            "archive": root / "smc" / "archive_t2.csv"}


def test_simulate_output_is_loadable(workspace):
    sample = load_observations(str(workspace["obs"]))
    assert sample.sizes[0] == 10
    assert sample.generations == 8
    assert sample.has_phi


def test_simulate_deterministic_and_seed_flag(workspace, capsys, tmp_path):
    cfg = workspace["sim_cfg"]
    code, _, _ = run_cli(["simulate", "--config", str(cfg),
                          "--out", str(tmp_path / "a")], capsys)
    assert code == 0
    code, _, _ = run_cli(["simulate", "--config", str(cfg),
                          "--out", str(tmp_path / "b")], capsys)
    assert code == 0
    first = (tmp_path / "a" / "trajectory.csv").read_bytes()
    assert first == (tmp_path / "b" / "trajectory.csv").read_bytes()
    assert first == workspace["obs"].read_bytes()

    code, _, _ = run_cli(["simulate", "--config", str(cfg), "--seed", "78",
                          "--out", str(tmp_path / "c")], capsys)
    assert code == 0
    assert first != (tmp_path / "c" / "trajectory.csv").read_bytes()


def test_smc_outputs(workspace):
    out = workspace["root"] / "smc"
    for name in ("archive_t1.csv", "archive_t1.traj.csv",
                 "archive_t2.csv", "archive_t2.traj.csv", "kappa_pmf.csv"):
        assert (out / name).exists(), name
    cfg = load_config(str(workspace["run_cfg"]))
    loaded = load_archive(str(workspace["archive"]),
                          expect_config_hash=cfg.config_hash)
    assert loaded.particles.n == 200
    pmf_lines = (out / "kappa_pmf.csv").read_text().splitlines()
    assert pmf_lines[0] == "kappa,probability"
    assert len(pmf_lines) == 1 + 3    # kappa = 2, 3, 4


def test_smc_prints_kappa_hat(workspace, capsys, tmp_path):
    code, stdout, _ = run_cli(["smc", "--config", str(workspace["run_cfg"]),
                               "--out", str(tmp_path)], capsys)
    assert code == 0
    assert "kappa_hat = 3" in stdout
    assert (tmp_path / "archive_t2.csv").read_bytes() == \
        workspace["archive"].read_bytes()


def test_smc_thread_invariant_across_processes(workspace, tmp_path):
    """Fresh processes with different worker counts write identical bytes."""
    outs = []
    for threads, sub in (("1", "t1"), ("3", "t3")):
        out = tmp_path / sub
        res = subprocess.run(
            [sys.executable, "-m", "cbpabc.cli", "smc",
             "--config", str(workspace["run_cfg"]),
             "--threads", threads, "--out", str(out)],
            capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        outs.append(out)
    for name in ("archive_t1.csv", "archive_t2.csv", "archive_t2.traj.csv",
                 "kappa_pmf.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert (outs[0] / "archive_t2.csv").read_bytes() == \
        workspace["archive"].read_bytes()


def test_refine_outputs(workspace, capsys, tmp_path):
    code, stdout, _ = run_cli(
        ["refine", "--config", str(workspace["run_cfg"]),
         "--archive", str(workspace["archive"]), "--out", str(tmp_path)],
        capsys)
    assert code == 0
    for name in ("adjusted.csv", "posterior_m.csv", "posterior_gamma.csv",
                 "posterior_tau_m.csv", "joint_m_gamma.csv", "summary.txt"):
        assert (tmp_path / name).exists(), name
    summary = (tmp_path / "summary.txt").read_text()
    assert "kappa_hat = 3" in summary
    assert "tau_m_mean = " in summary
    assert "m mean = " in stdout
    header = (tmp_path / "posterior_m.csv").read_text().splitlines()
    assert header[0].startswith("# bandwidth: ")
    assert "grid,density" in header
    adj = (tmp_path / "adjusted.csv").read_text().splitlines()
    assert adj[0] == "p0,p1,p2,p3,gamma,m,tau_m,weight"


def test_refine_rerun_bit_identical(workspace, capsys, tmp_path):
    for sub in ("a", "b"):
        code, _, _ = run_cli(
            ["refine", "--config", str(workspace["run_cfg"]),
             "--archive", str(workspace["archive"]),
             "--out", str(tmp_path / sub)], capsys)
        assert code == 0
    for name in ("adjusted.csv", "posterior_m.csv", "summary.txt",
                 "joint_m_gamma.csv"):
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes()


def test_refine_refuses_foreign_config(workspace, capsys, tmp_path):
    other = tmp_path / "other.cfg"
    other.write_text(workspace["run_cfg"].read_text().replace(
        "kappa_max = 4", "kappa_max = 5"))
    code, _, stderr = run_cli(
        ["refine", "--config", str(other),
         "--archive", str(workspace["archive"]), "--out", str(tmp_path)],
        capsys)
    assert code == 2
    err = json.loads(stderr.strip())
    assert err["error"] == "ArchiveMismatch"
    assert "refusing to mix priors" in err["message"]


def test_fit_growth_outputs(capsys, tmp_path):
    from cbpabc.datasets import format_observations
    from cbpabc.laws import DensityControl, FinitePmf, ObservedSample, simulate
    traj = simulate(FinitePmf((1 / 6, 1 / 6, 1 / 6, 0.5)),
                    DensityControl("verhulst", 1e4),
                    z0=50, generations=12, seed=9001)
    obs = tmp_path / "growth.csv"
    obs.write_text(format_observations(
        ObservedSample(sizes=tuple(int(v) for v in traj.sizes))))
    cfg = tmp_path / "growth.cfg"
    cfg.write_text(f"""\
observations = {obs}
kappa_max = 5
k_prior_lo = 5000
k_prior_hi = 20000
pool_sizes = 8000,32000
particles = 300
keep_fraction = 0.3
family_grid = verhulst;gompertz
seed = 13
out = {tmp_path / 'fit'}
""")
    with pytest.warns(UserWarning):
        code, stdout, _ = run_cli(["fit-growth", "--config", str(cfg)], capsys)
    assert code == 0
    assert "selected verhulst" in stdout
    scores = (tmp_path / "fit" / "scores.csv").read_text().splitlines()
    assert scores[0] == "family,shape,r2g"
    assert len(scores) == 3
    assert scores[1].startswith("verhulst,,")
    for name in ("best_posterior_m.csv", "best_posterior_gamma.csv",
                 "best_posterior_K_e.csv", "best_joint_m_gamma.csv",
                 "best_forecast.csv", "best_summary.txt"):
        assert (tmp_path / "fit" / name).exists(), name
    summary = (tmp_path / "fit" / "best_summary.txt").read_text()
    assert "family = verhulst" in summary
    assert "K_e_mean = " in summary


def test_exit_code_1_on_config_error(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key = 1\n")
    code, _, stderr = run_cli(["smc", "--config", str(cfg)], capsys)
    assert code == 1
    err = json.loads(stderr.strip())
    assert err["error"] == "ConfigError"
    assert "bad.cfg:1" in err["message"]


def test_exit_code_1_on_missing_required_flag(capsys, workspace):
    code, _, stderr = run_cli(
        ["refine", "--config", str(workspace["run_cfg"])], capsys)
    assert code == 1
    assert json.loads(stderr.strip())["error"] == "ConfigError"


def test_exit_code_2_on_missing_observations(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"observations = {tmp_path / 'gone.csv'}\n")
    code, _, stderr = run_cli(["smc", "--config", str(cfg)], capsys)
    assert code == 2
    assert json.loads(stderr.strip())["error"] == "ParseError"


def test_exit_code_3_on_exhausted_budget(capsys, tmp_path):
    obs = tmp_path / "obs.csv"
    obs.write_text("index,value\n0,1\n1,2\n2,4\n")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"""\
observations = {obs}
kappa_max = 3
pool_sizes = 1000,2000
particles = 50
attempt_factor = 1
seed = 3
out = {tmp_path / 'o'}
""")
    code, _, stderr = run_cli(["smc", "--config", str(cfg)], capsys)
    assert code == 3
    assert json.loads(stderr.strip())["error"] == "BudgetExceeded"


def test_summarize_archive_and_observations(workspace, capsys):
    code, stdout, _ = run_cli(["summarize", str(workspace["archive"])], capsys)
    assert code == 0
    assert "iteration 2" in stdout
    assert "kappa_hat = 3" in stdout

    code, stdout, _ = run_cli(["summarize", str(workspace["obs"])], capsys)
    assert code == 0
    assert "generations 0..8" in stdout
    assert "phi = " in stdout

    pmf = workspace["root"] / "smc" / "kappa_pmf.csv"
    code, stdout, _ = run_cli(["summarize", str(pmf)], capsys)
    assert code == 0
    assert "rows = 3" in stdout


def test_summarize_missing_file(capsys, tmp_path):
    code, _, stderr = run_cli(["summarize", str(tmp_path / "void.csv")], capsys)
    assert code == 2
    assert json.loads(stderr.strip())["error"] == "ParseError"


def test_console_script_installed():
    res = subprocess.run(["cbpabc", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("simulate", "smc", "refine", "fit-growth", "summarize"):
        assert name in res.stdout
