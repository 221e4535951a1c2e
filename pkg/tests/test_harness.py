import csv
import json

import numpy as np
import pytest

from scsi_noma import __version__
from scsi_noma.channel import PathProfile, covariance, steering_vector
from scsi_noma.cli import main
from scsi_noma.harness import (
    DEFAULT_SCHEMES,
    ConfigError,
    SimulationConfig,
    TrialRecord,
    aggregate,
    db_to_linear,
    dbm_to_watts,
    emit_csv,
    evaluate_schemes,
    parse_scheme,
    run_experiment,
    write_outputs,
)

SMALL = dict(n_antennas=16, n_rf_chains=2, n_users=4, n_paths=3, trials=2, seed=7, p_max_dbm=[25, 30])


def _write_config(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, **kw}))
    return path


def test_unit_conversions():
    assert dbm_to_watts(30) == pytest.approx(1.0)
    assert dbm_to_watts(21) == pytest.approx(0.125892541, rel=1e-8)
    assert db_to_linear(0) == 1.0
    assert db_to_linear(10) == pytest.approx(10.0)


def test_defaults():
    cfg = SimulationConfig()
    assert (cfg.n_antennas, cfg.n_rf_chains, cfg.n_users, cfg.n_paths) == (64, 4, 9, 6)
    assert cfg.r_min == 0.01 and cfg.tau == 1e-5
    assert tuple(cfg.schemes) == DEFAULT_SCHEMES


def test_parse_scheme():
    assert parse_scheme("agnes-scsi+sab+zf") == ("agnes-scsi", "sab", "zf")
    for bad in ("agnes+sab+zf", "agnes-scsi+sab", "kmeans-icsi+egt+mmse"):
        with pytest.raises(ConfigError):
            parse_scheme(bad)


@pytest.mark.parametrize(
    "bad",
    [{"n_antenna": 64}, {"n_rf_chains": 64}, {"n_users": 1}, {"trials": 0}, {"tau": 0}, {"schemes": []}],
)
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        SimulationConfig.from_dict({**SMALL, **bad})


def test_emit_csv(tmp_path):
    cols = ("a", "b")
    p = emit_csv([], tmp_path / "empty.csv", cols)
    assert p.read_text() == "a,b\n"
    p = emit_csv([(1, 0.1 + 0.2), ("x", True)], tmp_path / "two.csv", cols)
    lines = p.read_text().splitlines()
    assert len(lines) == 3
    rows = list(csv.DictReader(p.open()))
    assert float(rows[0]["b"]) == pytest.approx(0.3, rel=1e-9)
    assert rows[1] == {"a": "x", "b": "1"}


def test_aggregate_counts_infeasible_as_zero():
    recs = [
        TrialRecord("s", 4, 30.0, 0, 2.0, 8.0, (2.0,) * 4, True, "ok"),
        TrialRecord("s", 4, 30.0, 1, 0.0, 0.0, (), False, "infeasible"),
        TrialRecord("s", 4, 30.0, 2, np.nan, np.nan, (), False, "failed:ConditioningError"),
    ]
    (row,) = aggregate(recs, ["s"])
    assert (row.n_trials, row.n_ok, row.n_infeasible, row.n_failed) == (3, 1, 1, 1)
    assert row.mean_min_rate == pytest.approx(1.0)
    assert row.mean_sum_rate == pytest.approx(4.0)


def test_orthogonal_single_path_users_oma_closed_form():
    # K = G users on mutually orthogonal grid beams: no interference, max-min
    # equalizes g_u P_u, so t* = log2(1 + snr P_max / sum(1/g_u)) with g_u = N |alpha_u|^2
    n, G = 16, 3
    angles = np.arcsin(4 * np.arange(G) / n)
    rng = np.random.default_rng(4)
    alpha = rng.standard_normal(G) + 1j * rng.standard_normal(G)
    R = [covariance(PathProfile([a], [1.0]), n) for a in angles]
    H = np.stack([np.sqrt(n) * al * steering_vector(a, n).conj() for a, al in zip(angles, alpha)])
    cfg = SimulationConfig(
        n_antennas=n, n_rf_chains=G, n_users=G, n_paths=1, snr_db=3.0, p_max_dbm=[20.0, 27.0],
        schemes=["agnes-scsi+sab+zf", "agnes-scsi+sab+slnr", "agnes-icsi+egt+zf"],
    )
    g = n * np.abs(alpha) ** 2
    for rec in evaluate_schemes(cfg, R, H):
        assert rec.status == "ok"
        expect = np.log2(1 + db_to_linear(3.0) * dbm_to_watts(rec.p_max_dbm) / np.sum(1 / g))
        assert abs(rec.min_rate - expect) / expect < 0.05


def _tiny_cfg(**kw):
    return SimulationConfig.from_dict({**SMALL, "trials": 3, **kw})


def test_experiment_shapes_and_order():
    cfg = _tiny_cfg()
    res = run_experiment(cfg)
    assert len(res.records) == 3 * 2 * len(DEFAULT_SCHEMES)
    assert len(res.aggregates) == 2 * len(DEFAULT_SCHEMES)
    keys = [(r.n_users, r.p_max_dbm, cfg.schemes.index(r.scheme), r.trial) for r in res.records]
    assert keys == sorted(keys)
    for r in res.records:
        if r.feasible:
            assert len(r.rates) == 4
            assert r.min_rate >= cfg.r_min - 1e-9


def test_same_seed_same_trials_csv(tmp_path):
    cfg = _tiny_cfg(trials=1)
    a = write_outputs(run_experiment(cfg), tmp_path / "a")["trials"].read_bytes()
    b = write_outputs(run_experiment(cfg), tmp_path / "b")["trials"].read_bytes()
    assert a == b
    c = write_outputs(run_experiment(_tiny_cfg(trials=1, seed=8)), tmp_path / "c")["trials"].read_bytes()
    assert a != c


def test_meta_echoes_settings(tmp_path):
    result = run_experiment(_tiny_cfg(trials=1))
    meta = write_outputs(result, tmp_path)["meta"].read_text()
    assert f"scsi_noma {__version__}" in meta
    assert "seed: 7" in meta and "sigma2: 1.0" in meta
    cfg_line = next(line for line in meta.splitlines() if line.startswith("config: "))
    assert json.loads(cfg_line[len("config: "):])["n_antennas"] == 16


def test_cli_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_cli_echo_config(tmp_path, capsys):
    path = _write_config(tmp_path)
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o"), "--echo-config", "--seed", "11"]) == 0
    echoed = json.loads(capsys.readouterr().out)
    assert echoed["seed"] == 11 and echoed["n_users"] == 4
    assert not (tmp_path / "o").exists()


def test_cli_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_antennas": 64, "bogus": 1}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    assert main(["sweep", "k", "--config", str(_write_config(tmp_path))]) == 2


def test_cli_simulate_writes_outputs(tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(_write_config(tmp_path, trials=1)), "--out", str(out)]) == 0
    for name in ("trials.csv", "aggregate.csv", "timing.csv", "meta.txt"):
        assert (out / name).exists()
    rows = list(csv.DictReader((out / "trials.csv").open()))
    assert len(rows) == 2 * len(DEFAULT_SCHEMES)


def test_cli_sweep_k_uses_first_pmax(tmp_path):
    out = tmp_path / "k"
    cfg = _write_config(tmp_path, trials=1, k_sweep=[2, 3])
    assert main(["sweep", "k", "--config", str(cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "trials.csv").open()))
    assert {r["n_users"] for r in rows} == {"2", "3"}
    assert {r["p_max_dbm"] for r in rows} == {"25"}


def test_cli_exit_3_on_failures(tmp_path, monkeypatch):
    import scsi_noma.harness as harness

    def broken(*args, **kwargs):
        raise harness.ConditioningError("singular")

    monkeypatch.setattr(harness, "zf_digital", broken)
    out = tmp_path / "fail"
    assert main(["simulate", "--config", str(_write_config(tmp_path, trials=1)), "--out", str(out)]) == 3
    assert (out / "trials.csv").exists()
    assert "ConditioningError" in (out / "meta.txt").read_text()


@pytest.mark.slow
def test_doubling_pmax_does_not_hurt():
    cfg = SimulationConfig(n_users=9, trials=200, seed=3, p_max_dbm=[24.0, 27.0], schemes=["agnes-scsi+sab+zf"])
    res = run_experiment(cfg)
    lo = res.aggregate("agnes-scsi+sab+zf", 9, 24.0)
    hi = res.aggregate("agnes-scsi+sab+zf", 9, 27.0)
    assert hi.mean_min_rate >= lo.mean_min_rate
