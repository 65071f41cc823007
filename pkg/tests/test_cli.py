import json

import pytest

from semilab.cli import (
    WORKERS_ENV,
    bundled_config,
    main,
    parse_config,
    run_experiment,
    verify_directory,
    worker_count,
)
from semilab.errors import ArtifactError, ConfigError

SMALL_BRACKET = """
schema_version = 1
output = "unused"

[carleman]
model = "circle"
r = 1.0
V = "0"
E = 1.0

[carleman.weight]
tau = 1e-3
eps = 0.01
c_Y = 6.0

[carleman.scan]
y_bounds = [[-6.0, 6.0], [-0.002, 0.002]]
xi_bounds = [[-1.6, 1.6], [-1.6, 1.6]]
counts = 12
"""

SMALL_FACTORIZE = """
schema_version = 1

[factorize]
q = ["xi1**2 + 1"]
B = "2 + sin(y1)"
K = [1]
h_list = [0.0625, 0.03125, 0.015625]
test_functions = 4
"""


@pytest.fixture(scope="module")
def warped_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("warped")
    code, _ = run_experiment(parse_config(bundled_config("warped_goodness.toml")), out)
    assert code == 0
    return out


def test_list_models(capsys):
    assert main(["list-models"]) == 0
    text = capsys.readouterr().out
    for name in ("cosine_warped", "harmonic_oscillator", "circle", "warped_goodness.toml"):
        assert name in text


def test_malformed_toml_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("schema_version = 1\n[model\ntype = 'x'\n")
    assert main(["run", str(p)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_increasing_h_grid_is_rejected():
    text = bundled_config("warped_goodness.toml").replace("[0.05, 0.04, 0.03, 0.025, 0.02]", "[0.05, 0.04, 0.045]")
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.field == "h_grid.values"
    assert err.value.line == text.splitlines().index(
        next(line for line in text.splitlines() if line.startswith("values"))
    ) + 1


def test_unknown_field_and_schema_version():
    with pytest.raises(ConfigError):
        parse_config(SMALL_BRACKET.replace("r = 1.0", "radius = 1.0"))
    with pytest.raises(ConfigError) as err:
        parse_config(SMALL_BRACKET.replace("schema_version = 1", "schema_version = 7"))
    assert err.value.field == "schema_version"


def test_bracket_run_and_verify(tmp_path):
    code, out = run_experiment(parse_config(SMALL_BRACKET), tmp_path)
    assert code == 0
    summ = json.loads((out / "bracket.json").read_text())
    assert summ["margin"] == pytest.approx(8.0, rel=0.05)
    results = verify_directory(out)
    assert results and all(ok for _, ok, _ in results)


def test_factorize_run_and_verify(tmp_path):
    code, out = run_experiment(parse_config(SMALL_FACTORIZE), tmp_path)
    assert code == 0
    results = dict((n, ok) for n, ok, _ in verify_directory(out))
    assert results["residual_order[K1]"]


def test_warped_run_verifies(warped_run, capsys):
    assert main(["verify", str(warped_run)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS monotonicity[antipode]" in out
    rep = json.loads((warped_run / "report_antipode.json").read_text())
    assert rep["r_H"]["rate"] == pytest.approx(0.486, abs=5e-3)
    assert all(rep["verdicts"].values())


def test_hand_edited_trace_fails(warped_run, tmp_path):
    import shutil

    d = tmp_path / "copy"
    shutil.copytree(warped_run, d)
    trace = d / "trace_antipode.csv"
    lines = trace.read_text().splitlines()
    cells = lines[3].split(",")
    cells[2] = "-1.0"  # makes the restriction norm grow as h shrinks
    lines[3] = ",".join(cells)
    trace.write_text("\n".join(lines) + "\n")
    results = {n: (ok, detail) for n, ok, detail in verify_directory(d)}
    assert "trace_antipode.csv" in results["artifact_hashes"][1]
    assert results["monotonicity[antipode]"][0] is False
    assert results["rate_refit[antipode.r_H]"][0] is False
    assert main(["verify", str(d)]) == 1


def test_schema_mismatch_is_artifact_error(warped_run, tmp_path, capsys):
    import shutil

    d = tmp_path / "copy"
    shutil.copytree(warped_run, d)
    manifest = json.loads((d / "manifest.json").read_text())
    manifest["schema_version"] = 99
    (d / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ArtifactError):
        verify_directory(d)
    assert main(["verify", str(d)]) == 2
    assert "schema version mismatch" in capsys.readouterr().err


def test_missing_manifest(tmp_path):
    assert main(["verify", str(tmp_path)]) == 2


def test_plot_regenerates_svg(warped_run, tmp_path, capsys):
    import shutil

    d = tmp_path / "copy"
    shutil.copytree(warped_run, d)
    (d / "decay_antipode.svg").unlink()
    assert main(["plot", str(d)]) == 0
    assert (d / "decay_antipode.svg").read_text().startswith("<svg")


def test_manifest_records_provenance(warped_run):
    manifest = json.loads((warped_run / "manifest.json").read_text())
    assert manifest["schema_version"] == 1
    for name in ("eigen.csv", "family.json", "trace_antipode.csv", "report_antipode.json"):
        assert name in manifest["artifacts"]
        assert len(manifest["artifacts"][name]["sha256"]) == 64


def test_workers_env_override(monkeypatch):
    cfg = parse_config(bundled_config("warped_goodness.toml"))
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert worker_count(cfg) == 1
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert worker_count(cfg) == 3
    monkeypatch.setenv(WORKERS_ENV, "many")
    assert worker_count(cfg) == 1


def test_parallel_run_is_bitwise_identical(warped_run, tmp_path, monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "2")
    code, out = run_experiment(parse_config(bundled_config("warped_goodness.toml")), tmp_path)
    assert code == 0
    for name in ("eigen.csv", "trace_antipode.csv", "report_antipode.json"):
        assert (out / name).read_bytes() == (warped_run / name).read_bytes()
