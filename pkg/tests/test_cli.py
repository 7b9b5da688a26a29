import json

import numpy as np
import pytest

from chemotaxis_euler.cli import EXIT_BLOWUP, EXIT_INVALID, EXIT_OK, main
from chemotaxis_euler.grid import read_snapshot
from chemotaxis_euler.io import read_trajectories

SMALL_MACRO = "grid: {nx: 21, ny: 21}\nT: 0.2\nsnapshot_times: [0.1, 0.2]\n"
SMALL_MICRO = "kind: micro\ngrid: {nx: 21, ny: 21}\nT: 0.04\nsnapshot_times: [0.02, 0.04]\nmicro: {n_agents: 20}\n"
SMALL_ESTIMATE = (
    "kind: estimate\ngrid: {nx: 21, ny: 21}\nT: 0.04\nsnapshot_times: [0.02, 0.04]\n"
    "estimation: {max_iter: 1, theta0: [6, 500, 4, 2000, 0, 1.2]}\n"
)


@pytest.fixture
def write_config(tmp_path):
    def _write(text, name="config.yaml"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)

    return _write


def _files(outdir):
    return {p.name: p.read_bytes() for p in sorted(outdir.iterdir())}


def test_simulate_writes_snapshots_and_manifest(tmp_path, write_config):
    out = tmp_path / "run"
    assert main(["simulate", "--config", write_config(SMALL_MACRO), "--out", str(out)]) == EXIT_OK
    names = {p.name for p in out.iterdir()}
    assert {"manifest.json", "config.yaml", "timing.json"} <= names
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["artifacts"]) == names
    assert {"rho_0001.csv", "m1_0001.csv", "m2_0001.csv", "phi_0001.csv", "rho_0002.csv"} <= names
    rho, meta = read_snapshot(out / "rho_0002.csv")
    assert meta["t"] == 0.2 and rho.shape == (21, 21)


def test_rerun_is_byte_identical(tmp_path, write_config):
    cfg = write_config(SMALL_MACRO)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["simulate", "--config", cfg, "--out", str(b)]) == EXIT_OK
    fa, fb = _files(a), _files(b)
    fa.pop("timing.json")
    fb.pop("timing.json")
    assert fa == fb


def test_saved_config_reproduces_run(tmp_path, write_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", write_config(SMALL_MACRO), "--out", str(a), "--seed", "4"]) == EXIT_OK
    assert main(["simulate", "--config", str(a / "config.yaml"), "--out", str(b)]) == EXIT_OK
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_blowup_exit_code(tmp_path, write_config):
    out = tmp_path / "run"
    code = main(["simulate", "--config", write_config("T: 1.0\nsnapshot_times: [1.0]\n"), "--interactions", "none",
                 "--out", str(out)])
    assert code == EXIT_BLOWUP
    manifest = json.loads((out / "manifest.json").read_text())
    assert 0 < manifest["diagnostics"]["blowup_time"] < 1.0
    assert not list(out.glob("rho_*.csv"))


def test_invalid_config_exit_code(tmp_path, write_config, capsys):
    out = tmp_path / "run"
    code = main(["simulate", "--config", write_config("kernels: {R_rep: 0.1, R_adh: 0.05}\n"), "--out", str(out)])
    assert code == EXIT_INVALID
    assert "R_adh" in capsys.readouterr().err
    assert not out.exists()


def test_missing_data_leaves_no_output(tmp_path):
    out = tmp_path / "est"
    assert main(["estimate", "--data", str(tmp_path / "missing.csv"), "--out", str(out)]) == EXIT_INVALID
    assert not out.exists()


def test_generate_estimate_and_sensitivity(tmp_path, write_config):
    synth = tmp_path / "synth"
    assert main(["generate-synthetic", "--config", write_config(SMALL_MICRO, "micro.yaml"),
                 "--out", str(synth)]) == EXIT_OK
    times, positions = read_trajectories(synth / "trajectory.csv")
    assert times == [0.0, 0.02, 0.04] and positions[0].shape == (20, 2)
    est = tmp_path / "est"
    cfg = write_config(SMALL_ESTIMATE, "est.yaml")
    assert main(["estimate", "--config", cfg, "--data", str(synth / "trajectory.csv"), "--out", str(est)]) == EXIT_OK
    report = json.loads((est / "report.json").read_text())
    assert len(report["theta_opt"]) == 6 and np.isfinite(report["E"])
    assert report["parameters"][-1] == "h"
    sens = tmp_path / "sens"
    assert main(["sensitivity", "--config", cfg, "--data", str(synth / "trajectory.csv"),
                 "--report", str(est / "report.json"), "--out", str(sens)]) == EXIT_OK
    summary = json.loads((sens / "sensitivity.json").read_text())["summary"]
    assert summary["w_rep_tum"] is None and summary["eta"] is not None


def test_density_grid_mismatch(tmp_path, write_config):
    synth = tmp_path / "synth"
    assert main(["generate-synthetic", "--config", write_config(SMALL_MICRO, "micro.yaml"),
                 "--out", str(synth)]) == EXIT_OK
    run = tmp_path / "run"
    assert main(["simulate", "--config", write_config(SMALL_MACRO), "--out", str(run)]) == EXIT_OK
    big = write_config(SMALL_ESTIMATE.replace("nx: 21, ny: 21", "nx: 31, ny: 31"), "big.yaml")
    code = main(["estimate", "--config", big, "--data", str(synth / "trajectory.csv"),
                 "--densities", str(run), "--out", str(tmp_path / "est")])
    assert code == EXIT_INVALID


@pytest.mark.parametrize("style", ["heatmap", "quiver-overlay", "agents-overlay"])
def test_plot_styles(tmp_path, write_config, style):
    run = tmp_path / "run"
    micro_text = SMALL_MICRO.replace("[0.02, 0.04]", "[0.1, 0.2]").replace("T: 0.04", "T: 0.2")
    assert main(["simulate", "--config", write_config(SMALL_MACRO), "--out", str(run)]) == EXIT_OK
    agents = tmp_path / "agents"
    assert main(["generate-synthetic", "--config", write_config(micro_text, "m.yaml"), "--out", str(agents)]) == 0
    snap = sorted(run.glob("rho_*.csv"))[-1]
    args = ["plot", str(snap), "--style", style, "--out", str(tmp_path / "fig")]
    if style == "agents-overlay":
        args += ["--trajectory", str(agents / "trajectory.csv"), "--tumors", str(agents / "tumors.csv")]
    assert main(args) == EXIT_OK
    pngs = list((tmp_path / "fig").glob("*.png"))
    assert len(pngs) == 1 and pngs[0].read_bytes()[:4] == b"\x89PNG"


def test_plot_needs_trajectory_for_agents(tmp_path):
    assert main(["plot", "x.csv", "--style", "agents-overlay", "--out", str(tmp_path / "f")]) == EXIT_INVALID
