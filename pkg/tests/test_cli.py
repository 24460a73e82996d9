import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from eptissue import cli
from eptissue.cli import ExperimentSpec, main, parse_config, run_experiment
from eptissue.model import ConfigError

SMALL = ["mesh_h=0.04", "dt=0.5", "t_end=5"]


def read_csv(path):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


def test_empty_file_and_preset(tmp_path):
    cfg = tmp_path / "empty.cfg"
    cfg.write_text("# nothing here\n\n")
    spec = parse_config(cfg, preset_name="paper2024")
    p = spec.params
    assert (p.radius, p.k_ep, p.V_rev) == (0.25, 40.0, 1.5)
    assert (p.sigma_c, p.sigma_e, p.S_ir) == (4.789e-3, 0.0526, 2.63e4)


def test_field_sets_voltage_and_end_time(tmp_path):
    cfg = tmp_path / "e500.cfg"
    cfg.write_text("E_field = 500\n")
    p = parse_config(cfg).params
    assert p.t_end == 100 and p.g == pytest.approx(10.0)
    p = parse_config(cfg, ["t_end = 30"]).params
    assert p.t_end == 30
    with pytest.raises(ConfigError) as err:
        parse_config(cfg, ["g=3"])
    assert err.value.key == "g"


@pytest.mark.parametrize("item,key", [
    ("tau_ep=-1", "tau_ep"), ("bogus=1", "bogus"), ("dt=fast", "dt"),
    ("sweep_E=", "sweep_E"), ("conv_levels=2", "conv_levels"),
    ("write_kernel=maybe", "write_kernel"),
])
def test_config_errors_name_the_key(item, key):
    with pytest.raises(ConfigError) as err:
        parse_config(None, [item])
    assert err.value.key == key


def test_config_syntax_errors(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("dt = 0.1\nnot a pair\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config(cfg)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        ExperimentSpec(kind="plot")


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert parse_config().threads == 3
    assert parse_config(threads=2).threads == 2
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        parse_config()


def test_echo_roundtrip(tmp_path):
    spec = parse_config(None, ["E_field=2500", "dt=1/3", "conv_h=0.04,0.02,0.01",
                               "write_kernel=yes", "v_init=cos:0.1"], kind="run")
    echo = tmp_path / "echo.cfg"
    echo.write_text(cli.echo_config(spec))
    again = parse_config(echo, kind="run")
    assert again.params == spec.params
    assert again.conv_h == spec.conv_h and again.write_kernel is True
    assert cli.echo_config(again) == cli.echo_config(spec)


def test_run_outputs_and_determinism(tmp_path):
    args = ["run", "--set", "E_field=500", "--set", "write_kernel=true"]
    for s in SMALL:
        args += ["--set", s]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    for name in ("sigma_eff.csv", "membrane.csv", "kernel.csv", "config_echo.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header, rows = read_csv(tmp_path / "a" / "sigma_eff.csv")
    assert header == ["t", "sigma11", "sigma12", "sigma21", "sigma22",
                      "B_integral11", "Sm_avg"]
    assert len(rows) == 11
    assert not (tmp_path / "a" / "FAILED").exists()
    # the echoed config reproduces the run
    out_c = tmp_path / "c"
    assert main(["run", "--config", str(tmp_path / "a" / "config_echo.txt"),
                 "--out", str(out_c)]) == 0
    assert (out_c / "sigma_eff.csv").read_bytes() == (tmp_path / "a" / "sigma_eff.csv").read_bytes()


def test_exit_code_config_error(tmp_path, capsys):
    assert main(["run", "--set", "tau_ep=-1", "--out", str(tmp_path)]) == 2
    assert "tau_ep" in capsys.readouterr().err


def test_exit_code_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", "--out", str(blocker / "sub")] + sum(
        (["--set", s] for s in SMALL), [])) == 2


def test_exit_code_numerical_failure(tmp_path):
    out = tmp_path / "unstable"
    code = main(["run", "--set", "mesh_h=0.02", "--set", "dt=10", "--set", "t_end=20",
                 "--set", "g=10", "--out", str(out)])
    assert code == 3
    assert "stability" in (out / "FAILED").read_text()
    assert not (out / "sigma_eff.csv").exists()
    # a later successful run clears the marker
    assert main(["run", "--out", str(out)] + sum((["--set", s] for s in SMALL), [])) == 0
    assert not (out / "FAILED").exists()


def test_sweep_small(tmp_path):
    spec = parse_config(None, ["mesh_h=0.04", "sweep_E=0, 500, 2500", "sweep_steps=100"],
                        kind="sweep_field", out_dir=tmp_path, threads=2)
    assert run_experiment(spec) == 0
    header, rows = read_csv(tmp_path / "sweep.csv")
    assert header == ["E_field", "t_end", "sigma_eff11_final", "Sm_avg_final"]
    assert [float(r[1]) for r in rows] == [200.0, 100.0, 20.0]
    final = [float(r[2]) for r in rows]
    assert final == sorted(final)
    assert (tmp_path / "points" / "E_500" / "sigma_eff.csv").exists()


def test_convergence_outputs(tmp_path):
    spec = parse_config(None, ["conv_h=0.08, 0.04, 0.02", "conv_mesh_dt=0.5",
                               "conv_E=500"], kind="convergence_mesh", out_dir=tmp_path)
    assert run_experiment(spec) == 0
    header, rows = read_csv(tmp_path / "convergence_mesh.csv")
    assert header == ["h", "sigma_eff11_T", "difference"]
    assert len(rows) == 3 and rows[-1][2] == ""
    fit = dict(read_csv(tmp_path / "convergence_mesh_fit.csv")[1])
    assert np.isfinite(float(fit["slope"])) and fit["levels"] == "3"

    spec = parse_config(None, ["mesh_h=0.04", "conv_dt=0.5", "conv_levels=3"],
                        kind="convergence_time", out_dir=tmp_path)
    assert run_experiment(spec) == 0
    header, rows = read_csv(tmp_path / "convergence_time.csv")
    assert header[0] == "dt" and len(rows) == 3
    assert float(rows[1][0]) == pytest.approx(0.5 / 1.5)


def test_convergence_time_rejects_fractional_steps(tmp_path):
    spec = parse_config(None, ["mesh_h=0.04", "conv_dt=0.3", "conv_levels=3"],
                        kind="convergence_time", out_dir=tmp_path)
    assert run_experiment(spec) == 2
    assert "conv_dt" in (tmp_path / "FAILED").read_text()


def test_validate(tmp_path):
    spec = parse_config(None, ["mesh_h=0.02"], kind="validate", out_dir=tmp_path)
    assert run_experiment(spec) == 0
    report = (tmp_path / "validate_report.txt").read_text()
    assert "sigma_eff(0) == A" in report
    rows = {r[0]: float(r[3]) for r in read_csv(tmp_path / "validate.csv")[1]}
    assert rows["sigma_eff0_equals_A"] == 1.0
    assert abs(rows["ratio_A11_A_ins11"] / rows["ratio_perrins"] - 1) < 1e-3


def test_fitted_slope():
    h = np.array([0.4, 0.2, 0.1])
    assert cli.fitted_slope(h, 3 * h ** 2) == pytest.approx(2.0)
    assert np.isnan(cli.fitted_slope(h, [1.0, 0.0, 0.5]))


def test_module_entry_point(tmp_path):
    done = subprocess.run([sys.executable, "-m", "eptissue", "run", "--set", "bogus=1",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert done.returncode == 2 and "bogus" in done.stderr


def test_convergence_script_quick(tmp_path):
    script = Path(__file__).resolve().parents[1] / "scripts" / "convergence_study.py"
    done = subprocess.run([sys.executable, str(script), "--quick", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert done.returncode == 0, done.stderr
    assert "slope" in done.stdout
    assert (tmp_path / "convergence_time" / "convergence_time_fit.csv").exists()
