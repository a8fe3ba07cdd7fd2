import json

import numpy as np
import pytest

from nlosloc import cli, harness, model


SMALL_SETTINGS = harness.EstimatorSettings(
    centralized_starts=1,
    centralized_max_iter=15,
    centralized_max_cycles=1,
    distributed_max_iter=60,
)


@pytest.fixture(scope="module")
def small_scenario():
    return model.make_random_scenario(seed=301, n_nodes=4, sigma=8.0,
                                      eta0=np.deg2rad(7.0), support_points=3)


class TestTrials:
    def test_run_trial_deterministic(self, small_scenario):
        a = harness.run_trial(small_scenario, "centralized", seed=5, settings=SMALL_SETTINGS)
        b = harness.run_trial(small_scenario, "centralized", seed=5, settings=SMALL_SETTINGS)
        np.testing.assert_array_equal(a.q_hat, b.q_hat)
        assert a.error_m == b.error_m

    def test_all_estimators_run(self, small_scenario):
        for est in harness.ESTIMATORS:
            rec = harness.run_trial(small_scenario, est, seed=3, settings=SMALL_SETTINGS)
            assert rec.error_m >= 0.0
            assert rec.estimator == est

    def test_trial_seeds_unique(self):
        seeds = [harness.trial_seed(7, k) for k in range(100)]
        assert len(set(seeds)) == 100


class TestSweep:
    def _spec(self, trials=3):
        return harness.SweepSpec(
            varied="eta0",
            values=(np.deg2rad(3.0), np.deg2rad(7.0)),
            trials=trials,
            estimators=("centralized", "tdoa_only"),
            seed=2,
            settings=SMALL_SETTINGS,
        )

    def test_rows_structure(self, small_scenario):
        rows, records = harness.run_sweep(self._spec(), small_scenario)
        assert len(rows) == 4  # 2 values x 2 estimators
        assert len(records) == 12
        for row in rows:
            assert 0.0 <= row["convergence_rate"] <= 1.0

    def test_single_trial_rmse_is_error(self, small_scenario):
        spec = harness.SweepSpec(
            varied="none", values=(), trials=1, estimators=("tdoa_only",),
            seed=4, settings=SMALL_SETTINGS,
        )
        rows, records = harness.run_sweep(spec, small_scenario)
        assert rows[0]["rmse_m"] == pytest.approx(records[0].error_m)

    def test_csv_byte_identical(self, small_scenario, tmp_path):
        rows, records = harness.run_sweep(self._spec(), small_scenario)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        harness.write_sweep_csv(rows, p1)
        harness.write_sweep_csv(rows, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert p1.read_text().startswith(harness.CSV_SCHEMA)
        rows2, _ = harness.run_sweep(self._spec(), small_scenario)
        p3 = tmp_path / "c.csv"
        harness.write_sweep_csv(rows2, p3)
        assert p1.read_bytes() == p3.read_bytes()

    def test_parallel_matches_serial(self, small_scenario):
        spec = self._spec(trials=2)
        rows_s, _ = harness.run_sweep(spec, small_scenario, parallel=1)
        rows_p, _ = harness.run_sweep(spec, small_scenario, parallel=2)
        for a, b in zip(rows_s, rows_p):
            assert a.keys() == b.keys()
            for k in a:
                va, vb = a[k], b[k]
                if isinstance(va, float) and np.isnan(va):
                    assert np.isnan(vb)
                else:
                    assert va == vb, k

    def test_diverged_trials_excluded_from_rmse(self, small_scenario):
        rows, records = harness.run_sweep(self._spec(), small_scenario)
        for row in rows:
            sub = [r for r in records
                   if r.estimator == row["estimator"]
                   and (np.isnan(row["value"]) or r.param_value == row["value"])]
            conv_errs = [r.error_m for r in sub if r.converged]
            if conv_errs:
                assert row["rmse_m"] == pytest.approx(
                    float(np.sqrt(np.mean(np.square(conv_errs)))))

    def test_spec_validation(self):
        with pytest.raises(Exception):
            harness.SweepSpec(varied="bogus", values=(1.0,), trials=1)
        with pytest.raises(Exception):
            harness.SweepSpec(varied="sigma", values=(-1.0,), trials=1)


class TestReplicaPieces:
    def test_max_tdoa_by_construction(self):
        worst = 0.0
        for mode in ("band", "list"):
            for tgt in harness.replica_target_locations():
                sc = harness.build_replica_scenario(tgt, mode)
                d = sc.true_path_lengths()
                worst = max(worst, float(np.abs(d[1:] - d[0]).max()))
        assert worst <= 160.0

    def test_replica_measurement_statistics(self):
        sc = harness.build_replica_scenario(harness.replica_target_locations()[4], "band")
        d = sc.true_path_lengths()
        n = 3000
        noise = np.empty(n)
        aoa_noise = np.empty(n)
        for k in range(n):
            ms = harness.replica_measurements(sc, k)
            noise[k] = ms.tdoa[0] - (d[1] - d[0])
            aoa_noise[k] = ms.aoa[1] - sc.theta_true[1]
        assert noise.mean() == pytest.approx(harness.REPLICA_TDOA_BIAS,
                                             abs=4 * 4.0 / np.sqrt(n))
        assert noise.std() == pytest.approx(harness.REPLICA_TDOA_STD, rel=0.1)
        assert aoa_noise.std() == pytest.approx(harness.REPLICA_AOA_STD, rel=0.1)

    def test_replica_smoke(self, monkeypatch):
        monkeypatch.setattr(harness, "replica_target_locations",
                            lambda n=13: [np.array([40.0, 2.0])])
        rows = harness.replicate_experiment_synthetic(seed=3, trials_per_location=2)
        assert len(rows) == 2 * 2 * 2  # modes x trials x estimators
        cdf = harness.replica_error_cdf(rows, "band", "centralized",
                                        converged_only=False)
        assert cdf and cdf[-1][1] == pytest.approx(1.0)


class TestCli:
    def test_simulate_zero_noise(self, capsys):
        rc = cli.main(["simulate", "--config", "configs/scenario_zero_noise.json",
                       "--estimators", "centralized"])
        assert rc == 0
        out = capsys.readouterr().out
        err_val = float(out.splitlines()[-1].split("error=")[1].split()[0])
        assert err_val < 1e-3

    def test_bad_config_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{broken")
        assert cli.main(["simulate", "--config", str(bad)]) == 2

    def test_missing_field_exit_2(self, tmp_path):
        cfg = tmp_path / "incomplete.json"
        cfg.write_text(json.dumps({"nodes": []}))
        assert cli.main(["simulate", "--config", str(cfg)]) == 2

    def test_validate_gossip(self, capsys):
        rc = cli.main(["validate-gossip", "--topology", "star", "--nodes", "5",
                       "--samples", "2000"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "rho_ok=True" in out

    def test_sweep_and_dump(self, tmp_path, capsys):
        cfg = {
            "varied": "eta0",
            "values_deg": [5.0],
            "trials": 2,
            "estimators": ["tdoa_only"],
            "scenario": "default5",
            "seed": 3,
            "settings": {"centralized_max_iter": 10},
        }
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps(cfg))
        out_csv = tmp_path / "out.csv"
        trials_csv = tmp_path / "trials.csv"
        rc = cli.main(["sweep", "--config", str(path), "--out", str(out_csv),
                       "--dump-trials", str(trials_csv)])
        assert rc == 0
        assert out_csv.read_text().startswith(harness.CSV_SCHEMA)
        assert len(trials_csv.read_text().splitlines()) == 2 + 2  # schema+header+rows

    def test_relay_cli(self, tmp_path, capsys):
        cfg = {
            "sample_period_ns": 100,
            "oversample": 10,
            "t0_ns": [0, 0, 0],
            "t_delay_ms": [0, 25, 50],
            "tau1_m": [60, 150, 240],
            "tau2_m": [30, 45, 60],
            "packet_ms": 0.5,
        }
        path = tmp_path / "relay.json"
        path.write_text(json.dumps(cfg))
        out_csv = tmp_path / "relay.csv"
        rc = cli.main(["relay", "--config", str(path), "--trials", "3",
                       "--seed", "1", "--out", str(out_csv)])
        assert rc == 0
        lines = out_csv.read_text().splitlines()
        assert len(lines) == 2 + 3 * 2  # schema + header + trials*(nodes-1)
        errs = [abs(float(l.split(",")[-1])) for l in lines[2:]]
        assert max(errs) <= 3.0

    def test_replicate_cli(self, tmp_path, monkeypatch):
        monkeypatch.setattr(harness, "replica_target_locations",
                            lambda n=13: [np.array([40.0, 2.0])])
        out_csv = tmp_path / "replica.csv"
        rc = cli.main(["replicate", "--seed", "2", "--trials", "1",
                       "--out", str(out_csv)])
        assert rc == 0
        assert out_csv.exists()
