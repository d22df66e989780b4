import json
import math

import pytest

from rdmdp.cli import main
from rdmdp.exceptions import ConfigError
from rdmdp.harness import load_spec, pde_dump, rate_dump, replay, run_experiment, simulate_dump, validate_spec
from rdmdp.rdmdp_models import ExperimentSpec


def _spec(tmp_path, **kwargs) -> ExperimentSpec:
    base = {"n_ladder": [16], "T": 0.2, "m": 16, "K": 16, "samples": 4, "replicas": 8, "out": str(tmp_path)}
    return validate_spec(base | kwargs)


def test_spec_defaults():
    """Desk-scale defaults."""
    spec = ExperimentSpec()
    assert spec.n_ladder == [64, 128, 256]
    assert spec.horizon == 1.0
    assert (spec.m, spec.K) == (256, 512)
    assert spec.model.lam == 0.1


def test_spec_rejects_unknown_keys(tmp_path):
    """Unknown keys are configuration errors."""
    with pytest.raises(ConfigError):
        _spec(tmp_path, bogus=1)


def test_spec_rejects_zero_replicas(tmp_path):
    """At least one replica."""
    with pytest.raises(ConfigError):
        _spec(tmp_path, replicas=0)


def test_spec_rejects_missing_field_file(tmp_path):
    """Referenced field files must exist."""
    with pytest.raises(ConfigError):
        _spec(tmp_path, H_file=str(tmp_path / "missing.csv"))


def test_load_spec_toml_with_overrides(tmp_path):
    """TOML files parse and command-line overrides win."""
    path = tmp_path / "exp.toml"
    path.write_text('kind = "clt-init"\nseed = 3\nn_ladder = [32]\n\n[model]\na = 1.0\nb = 2.0\nlambda = 0.2\n')
    spec = load_spec(path, {"seed": 9, "replicas": None})
    assert spec.kind == "clt-init"
    assert spec.seed == 9
    assert spec.model.lam == 0.2
    assert spec.replicas == 200


def test_load_spec_bad_suffix(tmp_path):
    """Only JSON and TOML are accepted."""
    path = tmp_path / "exp.yaml"
    path.write_text("kind: clt-init\n")
    with pytest.raises(ConfigError):
        load_spec(path)


def test_clt_init_passes(tmp_path):
    """Variance of the initial field matches chi ||H||^2."""
    spec = _spec(tmp_path, kind="clt-init", n_ladder=[64], clt_samples=20_000)
    report = run_experiment(spec)
    assert report.verdict == "PASS"
    assert report.metrics["variance_rel_error"] < 0.05
    assert report.metrics["cumulant_exact"] == pytest.approx(report.metrics["cumulant_limit"], rel=0.2)
    for name in ("manifest.json", "series.csv", "summary.json"):
        assert (tmp_path / "clt-init" / name).is_file()


def test_clt_init_zero_field(tmp_path):
    """H = 0 has variance exactly zero."""
    spec = _spec(tmp_path, kind="clt-init", n_ladder=[64], clt_samples=1000, H={"kind": "zero"})
    report = run_experiment(spec)
    assert report.verdict == "PASS"
    assert report.metrics["variance"] == 0.0


def test_martingale_unity_zero_field(tmp_path):
    """H = 0 gives mean exactly one with zero standard error."""
    spec = _spec(tmp_path, kind="martingale-unity", H={"kind": "zero"})
    report = run_experiment(spec)
    assert report.verdict == "PASS"
    assert report.metrics["per_n"]["16"]["mean"] == 1.0
    assert report.metrics["per_n"]["16"]["se"] == 0.0
    assert report.metrics["per_n"]["16"]["mean_log_m"] == 0.0
    assert report.metrics["per_n"]["16"]["predicted_log_m"] == 0.0


def test_martingale_unity_default_control():
    """The martingale check defaults to a low-amplitude cosine control."""
    spec = ExperimentSpec(kind="martingale-unity")
    assert spec.H.kind == "cosine"
    assert spec.H.amplitude == pytest.approx(0.15)
    assert ExperimentSpec(kind="clt-init").H.amplitude == 1.0
    assert ExperimentSpec(kind="martingale-unity", H={"kind": "cosine", "amplitude": 0.5}).H.amplitude == 0.5


def test_martingale_unity_reports_log_moments(tmp_path):
    """Log-space moments are reported next to the negative Gaussian prediction -speed [H, H]_T."""
    report = run_experiment(_spec(tmp_path, kind="martingale-unity", replicas=16))
    row = report.metrics["per_n"]["16"]
    assert row["predicted_log_m"] < 0.0
    assert row["se_log_m"] > 0.0
    assert math.isfinite(row["mean_log_m"])


def test_martingale_unity_single_replica(tmp_path):
    """One replica leaves the standard error undefined."""
    spec = _spec(tmp_path, kind="martingale-unity", replicas=1)
    report = run_experiment(spec)
    assert report.verdict == "UNDEFINED"
    assert report.notes


def test_replay_is_bit_for_bit(tmp_path):
    """Re-running a manifest reproduces every statistic."""
    spec = _spec(tmp_path, kind="martingale-unity", replicas=6)
    run_experiment(spec, workers=3)
    same, diffs = replay(tmp_path / "martingale-unity" / "manifest.json", workers=1)
    assert same, diffs


def test_manifest_echoes_thresholds(tmp_path):
    """Thresholds and derived constants land in the manifest."""
    spec = _spec(tmp_path, kind="clt-init", n_ladder=[64], clt_samples=2000, thresholds={"clt_rel_tol": 0.5})
    run_experiment(spec)
    manifest = json.loads((tmp_path / "clt-init" / "manifest.json").read_text())
    assert manifest["thresholds"]["clt_rel_tol"] == 0.5
    assert 0.0 < manifest["derived"]["rho_star"] < 1.0
    assert manifest["spec"]["kind"] == "clt-init"


def test_bg_decay_zero_field(tmp_path):
    """H = 0 integrals vanish identically."""
    spec = _spec(tmp_path, kind="bg-decay", n_ladder=[16, 32], H={"kind": "zero"}, replicas=2)
    report = run_experiment(spec)
    assert report.verdict == "PASS"
    assert report.metrics["sup_I1"] == [0.0, 0.0]


def test_bg_decay_single_n_undefined(tmp_path):
    """A ladder of one cannot show a decrease."""
    spec = _spec(tmp_path, kind="bg-decay", replicas=2)
    assert run_experiment(spec).verdict == "UNDEFINED"


def test_bg_decay_small_r_n(tmp_path):
    """r_n too close to a_n is refused."""
    spec = _spec(tmp_path, kind="bg-decay", r_n_exponent=0.01, replicas=2)
    with pytest.raises(ConfigError):
        run_experiment(spec)


def test_tilted_hydro_reports_ladder(tmp_path):
    """One error per probe and side length."""
    spec = _spec(tmp_path, kind="tilted-hydro", n_ladder=[16, 32], replicas=4)
    report = run_experiment(spec)
    assert set(report.metrics["errors"]) == {"16", "32"}
    assert all(len(v) == 3 for v in report.metrics["errors"].values())
    assert len(report.rows) == 2 * 5


def test_rate_identity_passes(tmp_path):
    """Deterministic identity suite at a small grid."""
    spec = _spec(tmp_path, kind="rate-identity", T=1.0, m=32, K=512, phi={"kind": "sine", "amplitude": 0.3})
    report = run_experiment(spec)
    assert report.verdict == "PASS", report.rows
    assert report.metrics["convergence_order"] >= 1.9


def test_rate_identity_zero_control(tmp_path):
    """H* = 0 and phi = 0 make every identity exact."""
    spec = _spec(tmp_path, kind="rate-identity", T=1.0, m=16, K=64, H={"kind": "zero"})
    report = run_experiment(spec)
    assert report.metrics["roundtrip_rel_l2"] == 0.0
    assert report.metrics["ell_T_identity_rel"] == 0.0


def test_mdp_probe_full_space_untilted(tmp_path):
    """Without a tilt and with A = everything, P-hat is one."""
    spec = _spec(
        tmp_path,
        kind="mdp-probe",
        H={"kind": "zero"},
        event_threshold=float("-inf"),
        replicas=4,
    )
    report = run_experiment(spec)
    assert report.verdict == "EXPLORATORY"
    assert report.rows[0]["log_p_hat"] == pytest.approx(0.0, abs=1e-12)
    assert report.rows[0]["gap"] == pytest.approx(0.0, abs=1e-12)


def test_generator_oracle_passes(tmp_path):
    """Full dynamics on the three-site ring agree with the matrix exponential."""
    spec = _spec(tmp_path, kind="generator-oracle", oracle_runs=200_000, thresholds={"oracle_tv": 0.01})
    report = run_experiment(spec)
    assert report.verdict == "PASS"


def test_generator_oracle_exclusion_and_frozen(tmp_path):
    """Pure exclusion conserves sectors; T = 0 reproduces the initial law."""
    spec = _spec(
        tmp_path,
        kind="generator-oracle",
        oracle_runs=50_000,
        oracle_horizon=0.0,
        glauber_enabled=False,
        thresholds={"oracle_tv": 0.02},
    )
    report = run_experiment(spec)
    assert report.metrics["sectors_conserved"] is True
    assert report.metrics["frozen"] is True


def test_generator_oracle_size_capped(tmp_path):
    """The dense oracle refuses rings above four sites."""
    with pytest.raises(ConfigError):
        _spec(tmp_path, kind="generator-oracle", oracle_n=5)


def test_generator_oracle_needs_d1(tmp_path):
    """The dense oracle is one-dimensional."""
    with pytest.raises(ConfigError):
        run_experiment(_spec(tmp_path, kind="generator-oracle", d=2, oracle_runs=10))


def test_dumps(tmp_path):
    """simulate, pde and rate write their files."""
    spec = _spec(tmp_path, T=0.5)
    assert simulate_dump(spec, tilt=True).is_file()
    assert (tmp_path / "simulate" / "final.bin").is_file()
    assert pde_dump(spec).is_file()
    breakdown = rate_dump(spec, tmp_path / "pde" / "rho.csv")
    assert breakdown.qT == pytest.approx(breakdown.q0 + breakdown.qdyn)
    assert (tmp_path / "rate" / "rate.json").is_file()


def test_cli_exit_codes(tmp_path):
    """0 on PASS, 1 on configuration errors."""
    config = tmp_path / "clt.json"
    config.write_text(json.dumps({"n_ladder": [64], "clt_samples": 20_000, "m": 32, "K": 16}))
    assert main(["experiment", "clt-init", "--config", str(config), "--out", str(tmp_path)]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"replicas": -1}))
    assert main(["experiment", "clt-init", "--config", str(bad)]) == 1
