import json
import subprocess
import sys

import pytest
from click.testing import CliRunner

from nestfhe.bench import (SCHEMA, WorkloadError, counts_layout, measure_counts, parse_report, predict_counts,
                           run_bench)
from nestfhe.cli import _warn_insecure, main
from nestfhe.ring import PRESET_NAMES, describe_preset, preset


@pytest.fixture
def runner():
    try:
        return CliRunner(mix_stderr=False)
    except TypeError:  # click >= 8.2 always keeps stderr apart
        return CliRunner()


def test_predict_counts_closed_forms():
    assert predict_counts("conv2d", "nested", 16) == {"pmult": 16, "hrot": 6, "level": 0, "plaintexts": 16}
    assert predict_counts("conv2d", "coefficient", 4)["pmult"] == 7
    assert predict_counts("conv2d", "slot", 4, 3)["hrot"] == 2 * 9 + 8 - 4
    assert predict_counts("dwconv2d", "nested", 64)["hrot"] == 0
    with pytest.raises(WorkloadError):
        predict_counts("pool", "nested", 4)


def test_counts_layout_checks():
    assert counts_layout(16, 4096).w == 16
    with pytest.raises(WorkloadError):
        counts_layout(8, 4096)


@pytest.mark.parametrize("layer", ["conv2d", "dwconv2d"])
@pytest.mark.parametrize("enc", ["nested", "coefficient", "slot"])
def test_measure_counts_small(layer, enc):
    r = measure_counts(layer, enc, 4, ring_degree=1024)
    assert r.match, (r.predicted, r.measured)
    assert r.rel_error < 2.0 ** -12
    assert r.to_dict()["match"] is True


def test_bench_report_roundtrip():
    rep = run_bench("conv2d", "nested", "desk", 1024, channels=4, reps=2)
    d = rep.to_dict()
    assert d["schema"] == SCHEMA and list(d) == list(rep.FIELDS)
    assert parse_report(rep.to_json(), "json") == d
    assert parse_report(rep.to_csv(), "csv") == d
    assert rep.min_s <= rep.median_s <= rep.p95_s
    with pytest.raises(ValueError):
        parse_report(json.dumps(d | {"schema": "other/2"}), "json")


def test_bench_counters_deterministic():
    a = run_bench("conv2d", "nested", "desk", 1024, channels=4, reps=1)
    b = run_bench("conv2d", "nested", "desk", 1024, channels=4, reps=10)
    assert a.counters == b.counters and a.counters["hrot"] == 2


def test_dwconv_faster_than_conv():
    conv = run_bench("conv2d", "nested", "desk", 4096, channels=16, reps=5)
    dw = run_bench("dwconv2d", "nested", "desk", 4096, channels=16, reps=5)
    assert dw.median_s < conv.median_s


def test_security_warning_iff_standard_set(capsys):
    for name in PRESET_NAMES:
        p = preset(name, describe_preset(name)["ring_degree"])
        _warn_insecure(p)
        err = capsys.readouterr().err
        assert ("WARNING" in err) == (name not in ("set1", "set2")), name


def test_cli_verify_ok(runner):
    r = runner.invoke(main, ["verify", "--suite", "ring", "--suite", "linalg", "--ring-degree", "256"])
    assert r.exit_code == 0, r.output
    assert "PASS" in r.output and "FAIL" not in r.output


def test_cli_verify_usage_errors(runner):
    assert runner.invoke(main, ["verify", "--suite", "nope"]).exit_code == 2
    assert runner.invoke(main, ["verify", "--ring-degree", "100"]).exit_code == 2
    assert runner.invoke(main, ["frobnicate"]).exit_code == 2


def test_cli_verify_detects_fault():
    """A perturbed twiddle factor must make the encoding suite fail (exit 1)."""
    cmd = [sys.executable, "-m", "nestfhe.cli", "verify", "--suite", "encoding", "--ring-degree", "256",
           "--inject-fault", "twiddle"]
    r = subprocess.run(cmd, capture_output=True, text=True, timeout=300)
    assert r.returncode == 1, r.stdout + r.stderr
    assert "FAIL" in r.stdout and "encoding" in r.stderr


def test_cli_counts(runner):
    r = runner.invoke(main, ["counts", "-C", "4", "--ring-degree", "1024", "--format", "json"])
    assert r.exit_code == 0, r.output
    rows = json.loads(r.stdout)
    assert len(rows) == 3 and all(x["match"] for x in rows)
    r = runner.invoke(main, ["counts", "-C", "8", "--ring-degree", "1024"])
    assert r.exit_code == 2


def test_cli_counts_table_and_csv(runner):
    r = runner.invoke(main, ["counts", "-C", "4", "--ring-degree", "1024", "--encoding", "nested"])
    assert r.exit_code == 0 and "level seq/fused" in r.stdout and "MISMATCH" not in r.stdout
    r = runner.invoke(main, ["counts", "-C", "4", "--ring-degree", "1024", "--encoding", "slot", "--format", "csv"])
    lines = r.stdout.strip().splitlines()
    assert lines[0] == "layer,encoding,channels,metric,predicted,measured" and len(lines) == 5


def test_cli_bench_json_and_warning(runner):
    r = runner.invoke(main, ["bench", "--ring-degree", "1024", "-C", "4", "--reps", "1", "--format", "json"])
    assert r.exit_code == 0, r.output
    d = parse_report(r.stdout, "json")
    assert d["ring_degree"] == 1024 and d["secure"] is False
    assert "WARNING" in r.stderr and "WARNING" not in r.stdout


def test_cli_bench_usage_errors(runner):
    assert runner.invoke(main, ["bench", "--preset", "nope"]).exit_code == 2
    assert runner.invoke(main, ["bench", "--layer", "bootstrap", "--encoding", "slot"]).exit_code == 2
    assert runner.invoke(main, ["bench", "--ring-degree", "1024", "-C", "8"]).exit_code == 2
    assert runner.invoke(main, ["bench", "--reps", "0"]).exit_code == 2


def test_cli_env_overrides(runner):
    env = {"NESTFHE_RING_DEGREE": "1024", "NESTFHE_CHANNELS": "4", "NESTFHE_REPS": "1", "NESTFHE_FORMAT": "csv",
           "NESTFHE_LAYER": "dwconv2d"}
    r = runner.invoke(main, ["bench"], env=env)
    assert r.exit_code == 0, r.output
    d = parse_report(r.stdout, "csv")
    assert (d["ring_degree"], d["channels"], d["reps"], d["workload"]) == (1024, 4, 1, "dwconv2d")


def test_cli_version_and_threads(runner):
    r = runner.invoke(main, ["--version"])
    assert r.exit_code == 0 and "nestfhe" in r.stdout
    r = runner.invoke(main, ["--threads", "1", "verify", "--suite", "ring", "--ring-degree", "64"])
    assert r.exit_code == 0, r.output


def test_console_script_installed():
    r = subprocess.run(["nestfhe", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "verify" in r.stdout
