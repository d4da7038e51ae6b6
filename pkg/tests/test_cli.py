import json

import pytest

from bifbm.cli import EXIT_CHECK_FAILED, EXIT_IO, EXIT_OK, EXIT_USAGE, covariance_reports, main
from bifbm.covariance import BifbmParams


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch, tmp_path):
    for name in ("BIFBM_OUT_DIR", "BIFBM_WORKERS", "BIFBM_LOG_FILE"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


def test_cov_check_passes(tmp_path, capsys) -> None:
    out = tmp_path / "out"
    assert main(["cov-check", "--H", "0.3", "--K", "0.4", "--out", str(out)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith("PASS decomposition_residual") for line in lines)
    assert not any(line.startswith("FAIL") for line in lines)
    report = json.loads((out / "cov-check.json").read_text(encoding="utf-8"))
    assert report["pass"] is True
    assert report["metadata"]["H"] == 0.3
    assert "tool_version" in report["metadata"]


def test_covariance_reports_degenerate_case() -> None:
    checks = {r.check: r for r in covariance_reports(BifbmParams(0.6, 1.0), 2.0)}
    assert "decomposition_residual" not in checks
    assert checks["fbm_degeneration"].statistic == 0.0
    assert all(r.passed for r in checks.values())


def test_simulate_is_bit_identical_across_runs_and_workers(tmp_path) -> None:
    args = ["simulate", "--process", "bifbm", "--H", "0.5", "--K", "0.5", "--n", "256", "--seed", "7"]
    assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "b"), "--workers", "3"]) == EXIT_OK
    first = (tmp_path / "a" / "bifbm.csv").read_bytes()
    assert first == (tmp_path / "b" / "bifbm.csv").read_bytes()
    assert first.splitlines()[0] == b"t,value"
    meta = json.loads((tmp_path / "a" / "bifbm.meta.json").read_text(encoding="utf-8"))
    assert meta["master_seed"] == 7 and meta["n"] == 256


def test_simulate_ensemble_json(tmp_path) -> None:
    out = tmp_path / "out"
    code = main(["simulate", "--process", "fbm", "--H", "0.7", "--K", "1", "--n", "32", "--n-rep", "4", "--format", "json", "--out", str(out)])
    assert code == EXIT_OK
    payload = json.loads((out / "fbm.json").read_text(encoding="utf-8"))
    assert len(payload["values"]) == 4
    assert len(payload["t"]) == 33
    assert payload["values"][0][0] == 0.0


def test_simulate_xk_with_cholesky(tmp_path) -> None:
    out = tmp_path / "out"
    code = main(["simulate", "--process", "xk", "--K", "0.5", "--n", "16", "--n-rep", "3", "--x-method", "cholesky", "--out", str(out)])
    assert code == EXIT_OK
    assert len((out / "xk.csv").read_text(encoding="utf-8").splitlines()) == 1 + 3 * 17


def test_key_value_config_and_flag_override(tmp_path) -> None:
    conf = tmp_path / "run.conf"
    conf.write_text("H = 0.3\nK = 0.4\nn = 8\nseed = 3\n", encoding="utf-8")
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(conf), "--H", "0.35", "--out", str(out)]) == EXIT_OK
    meta = json.loads((out / "bifbm.meta.json").read_text(encoding="utf-8"))
    assert (meta["H"], meta["K"], meta["n"], meta["master_seed"]) == (0.35, 0.4, 8, 3)


def test_invalid_parameters_are_usage_errors(tmp_path, capsys) -> None:
    assert main(["cov-check", "--H", "1.5", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err
    assert main(["simulate", "--seed", "-4", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["verify-decomposition", "--n-rep", "10", "--n", "8", "--out", str(tmp_path)]) == EXIT_USAGE


@pytest.mark.parametrize(
    "flags", [["--n-rep", "-3"], ["--n-rep", "0"], ["--n", "0"], ["--n", "1"], ["--workers", "0"]]
)
def test_invalid_counts_are_usage_errors(tmp_path, capsys, flags: list[str]) -> None:
    assert main(["simulate", *flags, "--out", str(tmp_path)]) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err
    assert not (tmp_path / "bifbm.csv").exists()

def test_unknown_command_exits_through_argparse() -> None:
    with pytest.raises(SystemExit) as exc:
        main(["plot"])
    assert exc.value.code == 2


def test_unwritable_output_is_io_error(tmp_path) -> None:
    blocker = tmp_path / "blocker"
    blocker.write_text("", encoding="utf-8")
    assert main(["simulate", "--n", "8", "--out", str(blocker / "sub")]) == EXIT_IO


def test_step_norms_command(tmp_path) -> None:
    out = tmp_path / "out"
    assert main(["step-norms", "--H", "0.6", "--K", "0.75", "--T", "2", "--n-rep", "50", "--seed", "4", "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "step-norms.json").read_text(encoding="utf-8"))
    assert [c["check"] for c in report["checks"]] == ["l1_weight_bound_sweep", "step_norm_identity", "c_bound_finite_difference"]


def test_negative_control_reported_as_pass_when_it_fails(tmp_path, capsys) -> None:
    out = tmp_path / "out"
    code = main(
        ["verify-decomposition", "--H", "0.3", "--K", "0.5", "--T", "2", "--n", "8", "--n-rep", "2000", "--x-method", "cholesky", "--seed", "11", "--out", str(out)]
    )
    assert code in (EXIT_OK, EXIT_CHECK_FAILED)
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith("PASS law_equality_negative_control") for line in lines)



def test_law_check_and_control_use_configured_scheme(tmp_path) -> None:
    conf = tmp_path / "run.conf"
    conf.write_text("sampler.quadrature_nodes = 2048\n", encoding="utf-8")
    out = tmp_path / "out"
    code = main(
        ["verify-decomposition", "--config", str(conf), "--H", "0.6", "--K", "0.75", "--T", "2", "--n", "8", "--n-rep", "1000", "--seed", "3", "--out", str(out)]
    )
    assert code in (EXIT_OK, EXIT_CHECK_FAILED)
    report = json.loads((out / "verify-decomposition.json").read_text(encoding="utf-8"))
    checks = {c["check"]: c for c in report["checks"]}
    for name in ("law_equality", "law_equality_negative_control"):
        assert "nodes=2048" in checks[name]["details"]["x_provenance"][0]


def test_variation_command_honors_horizon(tmp_path) -> None:
    out = tmp_path / "out"
    code = main(["variation", "--H", "0.6", "--K", "0.8", "--T", "2", "--n", "256", "--n-rep", "4", "--seed", "9", "--out", str(out)])
    assert code in (EXIT_OK, EXIT_CHECK_FAILED)
    report = json.loads((out / "variation.json").read_text(encoding="utf-8"))
    checks = {c["check"]: c for c in report["checks"]}
    assert checks["variation_limit"]["params"]["T"] == 2.0
    assert checks["strong_variation"]["params"]["T"] == 4.0
    assert checks["strong_variation"]["details"]["eps"] == 4.0 / 256
    assert checks["x_variation_vanishes"]["params"]["T"] == 2.0
    assert (out / "x-variation-sweep.csv").exists()

@pytest.mark.slow
def test_heat_command(tmp_path) -> None:
    out = tmp_path / "out"
    code = main(["heat", "--T", "2", "--n", "16", "--n-rep", "10000", "--seed", "5", "--workers", "4", "--out", str(out)])
    report = json.loads((out / "heat.json").read_text(encoding="utf-8"))
    assert [c["check"] for c in report["checks"]] == ["heat_ratio_constancy", "heat_bifbm_proportionality", "heat_refinement"]
    assert code == EXIT_OK, report


@pytest.mark.slow
def test_full_suite(tmp_path) -> None:
    out = tmp_path / "out"
    code = main(["full-suite", "--seed", "2024", "--workers", "4", "--out", str(out)])
    report = json.loads((out / "full-suite.json").read_text(encoding="utf-8"))
    failed = [c["check"] for c in report["checks"] if not c["pass"]]
    assert code == EXIT_OK, failed
