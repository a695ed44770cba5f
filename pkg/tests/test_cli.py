import numpy as np
import pytest

from banditgames import cli
from banditgames.sim_harness import RateCurve, parse_trace_csv
from banditgames.verification import Check


def run(argv, capsys=None):
    code = cli.main(argv)
    out = capsys.readouterr().out if capsys else ""
    return code, out


def test_single_replication_static_trace(tmp_path):
    out = tmp_path / "o"
    code, _ = run(["run", "--min-algo", "uniform", "--horizon", "10", "--reps", "1", "--out", str(out)])
    assert code == 0
    lines = (out / "trace_000.csv").read_text().splitlines()
    assert lines[0] == "t,eg,delta,kl_star,a,b,loss"
    assert len(lines) == 11
    assert sorted(p.name for p in out.iterdir()) == ["curve.csv", "trace_000.csv"]


def test_rerun_is_byte_identical(tmp_path):
    argv = ["run", "--game", "hard:0.05", "--min-algo", "eoe:p=1", "--max-algo", "doubling",
            "--horizon", "300", "--reps", "5", "--seed", "9", "--traces", "2"]
    assert run(argv + ["--out", str(tmp_path / "a")])[0] == 0
    assert run(argv + ["--out", str(tmp_path / "b"), "--workers", "2"])[0] == 0
    for name in ("curve.csv", "trace_000.csv", "trace_001.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_csv_reemission_is_byte_identical(tmp_path):
    out = tmp_path / "o"
    run(["run", "--min-algo", "regexp3:T=200", "--horizon", "200", "--reps", "3", "--out", str(out)])
    curve_text = (out / "curve.csv").read_text()
    assert RateCurve.from_csv(curve_text).to_csv() == curve_text
    trace_text = (out / "trace_000.csv").read_text()
    assert parse_trace_csv(trace_text).to_csv() == trace_text


def test_regularized_exp3_below_bound(tmp_path, capsys):
    out = tmp_path / "o"
    code, _ = run(["run", "--game", "hard:0", "--min-algo", "regexp3:T=10000", "--horizon", "10000",
                   "--reps", "200", "--p", "2", "--traces", "0", "--out", str(out)], capsys)
    assert code == 0
    curve = RateCurve.from_csv((out / "curve.csv").read_text())
    assert curve.t[-1] == 10_000
    assert curve.estimate[-1] < 0.70648


@pytest.mark.parametrize(
    "argv",
    [
        ["--min-algo", "bogus"],
        ["--game", "hard:0.5"],
        ["--game", "/nonexistent/game.txt"],
        ["--horizon", "0"],
        ["--checkpoints", "5,50"],
        ["--p", "-1"],
    ],
)
def test_invalid_config_exits_2_without_outputs(tmp_path, capsys, argv):
    out = tmp_path / "o"
    code = cli.main(["run", "--horizon", "20", "--reps", "1", "--out", str(out)] + argv)
    assert code == 2
    assert "error" in capsys.readouterr().err
    assert not out.exists() or list(out.iterdir()) == []


def test_failure_mid_run_removes_partial_outputs(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise ValueError("simulated failure")

    monkeypatch.setattr(cli, "run_episode", boom)
    out = tmp_path / "o"
    assert cli.main(["run", "--min-algo", "uniform", "--horizon", "5", "--reps", "1", "--out", str(out)]) == 2
    assert list(out.iterdir()) == []


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as info:
        cli.main(["run", "--horizon", "ten"])
    assert info.value.code == 2


def test_config_file_and_override(tmp_path, monkeypatch):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# experiment\nmin-algo = uniform\nhorizon = 12\nreps = 2\ncheckpoints = 1,6,12\nsvg = yes\n")
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env_out"))
    assert cli.main(["run", "--config", str(cfg), "--horizon", "6", "--checkpoints", "1,6"]) == 0
    out = tmp_path / "env_out"
    assert sorted(p.name for p in out.iterdir()) == ["curve.csv", "curve.svg", "trace_000.csv"]
    assert len((out / "trace_000.csv").read_text().splitlines()) == 7
    assert (out / "curve.svg").read_text().startswith("<svg")


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("horizn = 12\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_deterministic_loss_flag(tmp_path):
    out = tmp_path / "o"
    cli.main(["run", "--min-algo", "uniform", "--horizon", "50", "--reps", "1", "--deterministic-loss", "--out", str(out)])
    trace = parse_trace_csv((out / "trace_000.csv").read_text())
    assert set(np.round(trace.loss, 12)) <= {round(1 / 3, 12), round(2 / 3, 12)}
    assert np.all(trace.eg == 0)


def test_verify_oracles(capsys, tmp_path):
    code, out = run(["verify", "oracles", "--quick", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert "checks passed" in out and "FAIL" not in out
    assert (tmp_path / "verify_oracles.csv").read_text().startswith("check,measured")


def test_verify_exit_reflects_checks(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_suite", lambda name, **kw: [Check("ok", 0.0, 1.0), Check("bad", 2.0, 1.0)])
    code, out = run(["verify", "thm4"], capsys)
    assert code == 1
    assert "FAIL  bad" in out and "1/2 checks passed" in out


def test_verify_unknown_suite():
    with pytest.raises(SystemExit) as info:
        cli.main(["verify", "thm9"])
    assert info.value.code == 2


def test_table1_rows(capsys, tmp_path):
    code, out = run(["table1", "--horizon", "1000", "--reps", "4", "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = (tmp_path / "table1.csv").read_text().splitlines()
    assert rows[0] == "algorithm,p,theory exponent,fitted slope,slope se,t range"
    theory = {r.split(",")[0]: r.split(",")[2] for r in rows[1:]}
    assert theory["EOE over EXP3-IX (p=2)"] == "-0.2500"
    assert theory["EOE over EXP3-IX (p=1)"] == "-0.3333"
    assert theory["EOE over EXP3-IX (p=0.5)"] == "-0.4000"
    assert theory["Regularized EXP3 (tuned to T)"] == "-0.2500"
    assert theory["EXP3-IX average output"] == "-0.5000"
    assert "Doubling meta-procedure" in theory


def test_lowerbound_static_nash(capsys):
    code, out = run(["lowerbound", "--min-algo", "uniform", "--horizon", "10000", "--reps", "2"], capsys)
    assert code == 0
    assert "eps_T = 0.00170103" in out
    assert "mean KL budget on eps=0: 0 <= bound 0" in out
