import csv
import json
import subprocess
import sys

import pytest

from eurqkd import cli

FAST = ["--n-total", "1e9"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def _files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file()}


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# --- keyrate ------------------------------------------------------------------


def test_keyrate_distance_sweep(tmp_path):
    out = tmp_path / "k"
    assert run("--out", out, "keyrate", "--grid", "0:10:1", *FAST) == 0
    rows = _rows(out / "keyrate.csv")
    assert [float(r["distance_km"]) for r in rows] == pytest.approx(list(range(11)))
    rates = [float(r["rate"]) for r in rows]
    assert rates[0] > 0 and all(a >= b for a, b in zip(rates, rates[1:]))
    man = json.loads((out / "keyrate_manifest.json").read_text())
    assert man["command"] == "keyrate" and man["outputs"] == ["keyrate.csv"]
    assert man["config"]["protocol"]["n_total"] == 10**9
    assert "--out" not in man["argv"]


def test_keyrate_blocksize_monotone(tmp_path):
    out = tmp_path / "b"
    assert run("--out", out, "keyrate", "--axis", "blocksize", "--grid", "1e7,1e8,1e9",
               "--distance", "5") == 0
    rows = _rows(out / "keyrate.csv")
    assert [int(r["n_total"]) for r in rows] == [10**7, 10**8, 10**9]
    rates = [float(r["rate"]) for r in rows]
    assert rates == sorted(rates)


def test_keyrate_csv_format(tmp_path):
    out = tmp_path / "f"
    run("--out", out, "keyrate", "--grid", "1,2")
    raw = (out / "keyrate.csv").read_bytes()
    assert b"\r\n" not in raw
    header = raw.split(b"\n")[0].decode().split(",")
    from eurqkd.keyrate import KeyRateReport
    assert header == KeyRateReport.fields()
    assert "e-01" in raw.decode() or "e+00" in raw.decode()


def test_keyrate_no_key_exit_code(tmp_path):
    assert run("--out", tmp_path / "n", "keyrate", "--grid", "40,50") == cli.EXIT_NO_KEY
    assert (tmp_path / "n" / "keyrate.csv").exists()


def test_malformed_config_writes_nothing(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"protocol": {"beta": 2.0}}))
    out = tmp_path / "o"
    assert run("--config", bad, "--out", out, "keyrate") == cli.EXIT_INVALID
    assert not out.exists()
    bad.write_text("{oops")
    assert run("--config", bad, "--out", out, "keyrate") == cli.EXIT_INVALID
    assert not out.exists()


@pytest.mark.parametrize("grid", ["5:1:1", "0:1:0", "a,b", ","])
def test_bad_grid(tmp_path, grid):
    assert run("--out", tmp_path / "g", "keyrate", "--grid", grid) == cli.EXIT_INVALID


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"protocol": {"squeezing_db": 13.1, "beta": 0.9},
                               "channel": {"excess_noise": 0.02}}))
    out = tmp_path / "c"
    assert run("--config", cfg, "--out", out, "keyrate", "--grid", "1", "--beta", "0.97") in (0, 3)
    row = _rows(out / "keyrate.csv")[0]
    assert float(row["beta"]) == 0.97 and float(row["excess_noise"]) == 0.02


def test_unknown_option_is_invalid(tmp_path):
    assert run("keyrate", "--bogus") == cli.EXIT_INVALID


# --- estimate -----------------------------------------------------------------


def test_simulate_estimate_round_trip(tmp_path):
    sim = tmp_path / "s"
    assert run("--seed", 7, "--out", sim, "simulate", "--trials", 2, "--samples", 4000, "--dump", 1) == 0
    raw = sim / "batches" / "trial_000000.csv"
    assert raw.exists()
    est = tmp_path / "e"
    assert run("--out", est, "estimate", "--input", raw, "--first-rows", 2000, "--z", 3) == 0
    report = json.loads((est / "estimate.json").read_text())
    trial = _rows(sim / "simulate_trials.csv")[0]
    assert report["m_used"] == 2000
    for key in ("c_mb_hat", "tau_hat", "tau_low", "v_eps_hat", "v_eps_up"):
        assert report[key] == float(trial[key])
    man = json.loads((sim / "simulate_manifest.json").read_text())
    assert man["raw_batches"] == ["batches/trial_000000.csv"]


def test_estimate_mode_mismatch(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text("m1,m2,b\n1,2,3\n4,5,6\n")
    assert run("--out", tmp_path / "o", "estimate", "--input", data, "--mode", "single") == cli.EXIT_INVALID
    assert "double" in capsys.readouterr().err


def test_estimate_empty_file(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("")
    assert run("--out", tmp_path / "o", "estimate", "--input", data) == cli.EXIT_INVALID


def test_estimate_reports_bad_lines(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text("m,b\n1,2\nx,3\n")
    assert run("--out", tmp_path / "o", "estimate", "--input", data) == cli.EXIT_INVALID
    assert "line 3" in capsys.readouterr().err


def test_estimate_double_file(tmp_path):
    sim = tmp_path / "s"
    assert run("--out", sim, "simulate", "--mode", "double", "--trials", 1, "--samples", 3000,
               "--dump", 1) == 0
    est = tmp_path / "e"
    assert run("--out", est, "estimate", "--input", sim / "batches" / "trial_000000.csv", "--z", 3) == 0
    report = json.loads((est / "estimate.json").read_text())
    trial = _rows(sim / "simulate_trials.csv")[0]
    assert report["mode"] == "double" and report["m_used"] == 3000
    assert report["tau_hat"] == float(trial["tau_hat"])


# --- simulate -----------------------------------------------------------------


def test_simulate_same_seed_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["simulate", "--trials", 20, "--samples", 4000]
    assert run("--seed", 42, "--out", a, *args) == 0
    assert run("--seed", 42, "--out", b, "--workers", 2, *args) == 0
    fa, fb = _files(a), _files(b)
    # the manifests differ only in the recorded argv
    assert fa.pop("simulate_manifest.json") != fb.pop("simulate_manifest.json")
    assert fa == fb
    c = tmp_path / "c"
    run("--seed", 43, "--out", c, *args)
    assert _files(c)["simulate_trials.csv"] != _files(a)["simulate_trials.csv"]


def test_simulate_check_default_config(tmp_path):
    out = tmp_path / "s"
    assert run("--out", out, "simulate", "--check") == 0
    rows = _rows(out / "simulate_checks.csv")
    assert rows and all(r["passed"] == "1" for r in rows)


def test_simulate_infeasible(tmp_path, capsys):
    assert run("--out", tmp_path / "x", "simulate", "--samples", "1e9", "--trials", 1) == cli.EXIT_INVALID
    assert "GiB" in capsys.readouterr().err


# --- optimize -----------------------------------------------------------------


def test_optimize_interior_pe_fraction(tmp_path):
    out = tmp_path / "o"
    assert run("--out", out, "optimize", "--free", "m_fraction", "--distance", 5, *FAST) == 0
    best = json.loads((out / "optimize_best.json").read_text())
    assert 0.01 < best["argmax"]["m_fraction"] < 0.99
    assert best["report"]["rate"] > 0
    trace = _rows(out / "optimize_trace.csv")
    assert len(trace) == 21 + 2 * 21


def test_optimize_double_split(tmp_path):
    base = ["--mode", "double", "--v-m", "0.02", "--distance", 5, "--n-total", "1e6"]
    k = tmp_path / "k"
    run("--out", k, "keyrate", "--grid", "5", *base)
    even = float(_rows(k / "keyrate.csv")[0]["rate"])
    out = tmp_path / "o"
    assert run("--out", out, "optimize", "--free", "v_m2_fraction", *base) == 0
    assert float(_rows(out / "optimize_best.csv")[0]["rate"]) >= even > 0


def test_optimize_empty_feasible_set(tmp_path):
    out = tmp_path / "o"
    code = run("--out", out, "optimize", "--free", "m_fraction", "--distance", 60, "--points", 5)
    assert code == cli.EXIT_NO_KEY
    assert (out / "optimize_trace.csv").exists()


def test_optimize_rejects_bad_free(tmp_path):
    assert run("--out", tmp_path / "o", "optimize", "--free", "colour") == cli.EXIT_INVALID


# --- provenance ---------------------------------------------------------------


@pytest.mark.parametrize("argv", [
    ["keyrate", "--grid", "0:4:1", "--direction", "dr"],
    ["simulate", "--trials", 5, "--samples", 3000, "--mode", "double"],
    ["optimize", "--free", "m_fraction,bits", "--points", 5, "--distance", 3],
])
def test_replay_reproduces_outputs(tmp_path, argv):
    first = tmp_path / "first"
    code = run("--seed", 9, "--out", first, *argv)
    manifest = next(first.glob("*_manifest.json"))
    second = tmp_path / "second"
    assert run("replay", manifest, "--out", second) == code
    assert _files(first) == {k: v for k, v in _files(second).items()}


def test_globals_after_subcommand(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run("--seed", 3, "--out", a, "simulate", "--trials", 3, "--samples", 2000)
    run("simulate", "--trials", 3, "--samples", 2000, "--seed", 3, "--out", b)
    assert _files(a)["simulate_trials.csv"] == _files(b)["simulate_trials.csv"]


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert run("keyrate", "--grid", "1") in (0, 3)
    assert (tmp_path / "env" / "keyrate.csv").exists()
    monkeypatch.delenv(cli.OUT_ENV)
    monkeypatch.chdir(tmp_path)
    run("keyrate", "--grid", "1")
    assert (tmp_path / cli.DEFAULT_OUT / "keyrate.csv").exists()


def test_help_lists_commands_and_examples(capsys):
    assert cli.main(["--help"]) == 0
    text = capsys.readouterr().out
    for word in ("keyrate", "estimate", "simulate", "optimize", "--config", "--seed", "--out",
                 "--workers", cli.OUT_ENV, "Exit status"):
        assert word in text


@pytest.mark.parametrize("cmd", ["keyrate", "estimate", "simulate", "optimize", "replay"])
def test_subcommand_help(cmd, capsys):
    assert cli.main([cmd, "--help"]) == 0
    assert "--out" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "eurqkd", "--out", str(tmp_path / "m"),
                           "keyrate", "--grid", "2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "max rate" in proc.stdout
