import json

import numpy as np
import pytest

from edglab.cli import ConfigError, RunConfig, load_config_file, main


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# -- config plumbing ---------------------------------------------------


def test_runconfig_validation():
    with pytest.raises(ConfigError):
        RunConfig(rho=1.0).validate()                   # no kernel
    with pytest.raises(ConfigError):
        RunConfig(gamma=1.0).validate()                 # no N and no rho
    with pytest.raises(ConfigError):
        RunConfig(gamma=1.0, N=10, rho=1.0).validate()  # both
    with pytest.raises(ConfigError):
        RunConfig(gamma=1.0, rho=1.0, replicas=0).validate()
    with pytest.raises(ConfigError):
        RunConfig(gamma=1.0, rho=1.0, L=1).validate()
    RunConfig(gamma=1.0, rho=1.0).validate()


def test_runconfig_grid():
    cfg = RunConfig(gamma=1.0, rho=1.0, grid="0:1:0.25")
    np.testing.assert_allclose(cfg.grid_times(), [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ConfigError):
        RunConfig(gamma=1.0, rho=1.0, grid="0:1").grid_times()
    with pytest.raises(ConfigError):
        RunConfig(gamma=1.0, rho=1.0, grid="1:0:0.5").grid_times()


def test_runconfig_particles_and_density():
    cfg = RunConfig(gamma=1.0, rho=0.5, L=201)
    assert cfg.particles() == 100                       # round(0.5 * 201)
    assert cfg.density() == 0.5
    cfg2 = RunConfig(gamma=1.0, N=75, L=100)
    assert cfg2.particles() == 75
    assert cfg2.density() == 0.75


def test_table_kernel_from_config(tmp_path):
    path = tmp_path / "k.csv"
    path.write_text("k,l,rate\n1,1,1.0\n1,2,2.0\n2,2,4.0\n")
    cfg = RunConfig(table=str(path), rho=1.0)
    cfg.validate()
    ker = cfg.kernel()
    assert ker(2, 1) == 2.0


def test_load_config_file_formats(tmp_path):
    ini = tmp_path / "run.cfg"
    ini.write_text("[run]\ngamma = 1.0\nL = 500   # sites\nrho = 1.0\n")
    vals = load_config_file(ini)
    assert vals == {"gamma": "1.0", "L": "500", "rho": "1.0"}
    js = tmp_path / "run.json"
    js.write_text('{"gamma": 1.0, "L": 500}')
    assert load_config_file(js) == {"gamma": 1.0, "L": 500}
    bad = tmp_path / "bad.cfg"
    bad.write_text("gamma 1.0\n")
    with pytest.raises(ConfigError):
        load_config_file(bad)


def test_main_rejects_bad_config(tmp_path, capsys):
    assert main(["simulate", "--rho", "1", "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["simulate", "--gamma", "1", "--N", "5", "--rho", "1",
                 "--out", str(tmp_path)]) == 2


def test_config_file_plus_flag_override(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("gamma = 1.0\nrho = 1.0\nL = 60\nreplicas = 2\n"
                       "t_end = 0.2\nseed = 5\n")
    out = tmp_path / "out"
    rc = main(["simulate", "--config", str(cfgfile), "--L", "40",
               "--out", str(out)])
    assert rc == 0
    embedded = (out / "ensemble_mean.csv").read_text().splitlines()[0]
    cfg = json.loads(embedded.split("=", 1)[1])
    assert cfg["L"] == 40                               # flag beats file


# -- subcommands -------------------------------------------------------


def run_simulate(tmp_path, monkeypatch, sub):
    d = tmp_path / sub
    d.mkdir()
    monkeypatch.chdir(d)
    rc = main(["simulate", "--gamma", "1", "--L", "80", "--rho", "1",
               "--t-end", "0.5", "--grid", "0:0.5:0.25", "--replicas", "2",
               "--seed", "9", "--out", "ens"])
    assert rc == 0
    return d / "ens"


def test_simulate_outputs_and_determinism(tmp_path, monkeypatch):
    out_a = run_simulate(tmp_path, monkeypatch, "a")
    out_b = run_simulate(tmp_path, monkeypatch, "b")
    for name in ["replica_0000.jsonl", "replica_0001.jsonl",
                 "ensemble_mean.csv"]:
        assert (out_a / name).exists()
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    # the mean rows are probability vectors
    rows = (out_a / "ensemble_mean.csv").read_text().splitlines()[2:]
    tot = {}
    for row in rows:
        t, k, fm, fv = row.split(",")
        tot[t] = tot.get(t, 0.0) + float(fm)
    for t, s in tot.items():
        assert s == pytest.approx(1.0)


def test_simulate_parallel_matches_serial(tmp_path):
    args = ["simulate", "--gamma", "1", "--L", "60", "--rho", "1",
            "--t-end", "0.3", "--replicas", "3", "--seed", "4"]
    out1, out2 = tmp_path / "serial", tmp_path / "par"
    assert main(args + ["--jobs", "1", "--out", str(out1)]) == 0
    assert main(args + ["--jobs", "2", "--out", str(out2)]) == 0
    a = (out1 / "ensemble_mean.csv").read_text().splitlines()[1:]
    b = (out2 / "ensemble_mean.csv").read_text().splitlines()[1:]
    assert a == b


def test_ode_outputs(tmp_path):
    out = tmp_path / "ode"
    rc = main(["ode", "--gamma", "1", "--rho", "1", "--t-end", "1",
               "--grid", "0:1:0.5", "--out", str(out)])
    assert rc == 0
    report = read_json(out / "ode_run.json")
    assert report["config"]["gamma"] == 1.0
    assert report["config"]["blown_up"] is False
    summary = report["summary"]
    # mass ledger closes at every grid time
    for m1, leak in zip(summary["m1"], summary["leak"]):
        assert abs(m1 + leak - 1.0) < 1e-8
    lines = (out / "ode_summary.csv").read_text().splitlines()
    assert lines[0].startswith("t,m0,m1,m2")
    assert len(lines) == 4                              # header + 3 grid times
    assert (out / "ode_profile.csv").exists()


def test_ode_init_csv(tmp_path):
    prof = tmp_path / "init.csv"
    prof.write_text("k,f_k\n0,0.5\n2,0.5\n")
    out = tmp_path / "ode"
    rc = main(["ode", "--gamma", "1", "--rho", "1", "--t-end", "0.2",
               "--init-csv", str(prof), "--out", str(out)])
    assert rc == 0
    report = read_json(out / "ode_run.json")
    assert report["summary"]["m1"][0] == pytest.approx(1.0, abs=1e-9)
    bad = tmp_path / "bad.csv"
    bad.write_text("k,f_k\n0,0.5\n2,0.4\n")             # sums to 0.9
    with pytest.raises(ConfigError):
        main(["ode", "--gamma", "1", "--rho", "1", "--t-end", "0.2",
              "--init-csv", str(bad), "--out", str(out)])


def test_tagged_outputs(tmp_path):
    out = tmp_path / "tagged"
    rc = main(["tagged", "--gamma", "1", "--L", "60", "--rho", "1",
               "--t-end", "0.3", "--replicas", "20", "--seed", "2",
               "--out", str(out)])
    assert rc == 0
    report = read_json(out / "tagged_run.json")
    assert 0.0 <= report["tv_vs_limit"] <= 1.0
    lines = (out / "tagged_law.csv").read_text().splitlines()
    assert lines[1] == "k,empirical,limit_p"


def test_verify_passes_at_moderate_scale(tmp_path):
    out = tmp_path / "verify"
    rc = main(["verify", "--gamma", "1", "--L", "1000", "--rho", "1",
               "--t-end", "1", "--grid", "0:1:0.1", "--replicas", "5",
               "--seed", "1", "--out", str(out)])
    assert rc == 0
    report = read_json(out / "verify.json")
    assert report["pass"] is True
    assert set(report["checks"]) == {"kernel", "ode_conservation", "lln",
                                     "weak_form"}


def test_scaling_outputs(tmp_path):
    out = tmp_path / "scaling"
    rc = main(["scaling", "--gamma-list", "1.0", "--rho", "1",
               "--t-end", "30", "--grid", "0:30:0.25", "--out", str(out)])
    assert rc == 0
    report = read_json(out / "scaling.json")
    entry = report["coarsening"]["1.0"]
    assert entry["regime"] == "power"
    assert abs(entry["beta_hat"] - 1.0) < 0.2
    lines = (out / "coarsening.csv").read_text().splitlines()
    assert lines[1] == "gamma,t,ell"


def test_scaling_absorption_leg(tmp_path):
    out = tmp_path / "scaling"
    rc = main(["scaling", "--gamma", "1", "--rho", "1", "--t-end", "2",
               "--replicas", "10", "--l-list", "2,4", "--seed", "3",
               "--out", str(out)])
    assert rc == 0
    report = read_json(out / "scaling.json")
    ab = report["absorption"]
    assert ab["2"]["completed"] + ab["2"]["censored"] == 10
    assert "4" in ab
