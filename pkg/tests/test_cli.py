from __future__ import annotations

import csv
import json

import numpy as np
import pytest
import yaml

from riskcast.cli import (
    DEFAULT_EPSILONS,
    ExperimentConfig,
    config_from_dict,
    config_hash,
    emit_report,
    load_config,
    main,
    run_experiment,
    run_frontier,
    stage_seed,
)
from riskcast.calibration import QuantileEvaluator, budget_scale_search, run_selection
from riskcast.data import make_windows, generate_synthetic
from riskcast.errors import EmptySweep

BASE_CONFIG = {
    "dataset": {
        "kind": "synthetic",
        "length": 2600,
        "base_level": 160.0,
        "handover_drop": 30.0,
        "noise": {"kind": "uniform", "half_width": 35.0},
    },
    "L": 6,
    "H": 2,
    "split_ratios": [0.6, 0.2, 0.2],
    "risk": {"epsilon": 0.35},
    "backbone": {"kind": "boosted_trees", "n_trees": 20, "max_depth": 3, "min_samples_leaf": 40},
    "baselines": ["point", "budget_scale"],
    "admission_b": 10.0,
    "seed": 13,
}


def write_config(tmp_path, overrides=None, name="config.yaml"):
    raw = json.loads(json.dumps(BASE_CONFIG))
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key].update(value)
        else:
            raw[key] = value
    raw.setdefault("output_dir", str(tmp_path / "out"))
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


class TestConfig:
    def test_defaults(self):
        config = config_from_dict({"dataset": {"kind": "synthetic", "length": 100, "base_level": 10.0}})
        assert config.history == 75 and config.horizon == 15
        assert config.risk.epsilon == 0.35
        assert config.risk.tau_min == 0.15 and config.risk.tau_max == 0.40
        assert config.risk.delta == 0.05 and config.risk.grid_size == 5
        assert config.backbone.n_trees == 200

    def test_seed_override_re_derives_stage_seeds(self, tmp_path):
        path = write_config(tmp_path)
        a = load_config(path)
        b = load_config(path, seed=99)
        assert b.seed == 99
        assert b.backbone.seed == stage_seed(99, "backbone")
        assert a.backbone.seed != b.backbone.seed
        assert b.dataset.synthetic.seed == stage_seed(99, "data")

    def test_epsilon_and_output_overrides(self, tmp_path):
        path = write_config(tmp_path)
        config = load_config(path, epsilon=0.42, output_dir="elsewhere")
        assert config.risk.epsilon == 0.42
        assert config.output_dir == "elsewhere"

    def test_hash_tracks_semantics_not_output_dir(self, tmp_path):
        base = load_config(write_config(tmp_path))
        moved = load_config(write_config(tmp_path, {"output_dir": "other"}, name="b.yaml"))
        reseeded = load_config(write_config(tmp_path, {"seed": 14}, name="c.yaml"))
        rebudgeted = load_config(write_config(tmp_path, {"risk": {"epsilon": 0.30}}, name="d.yaml"))
        assert config_hash(base) == config_hash(moved)
        assert config_hash(base) != config_hash(reseeded)
        assert config_hash(base) != config_hash(rebudgeted)


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    config = load_config(write_config(tmp), output_dir=str(tmp / "out"))
    return run_experiment(config)


class TestRunExperiment:
    def test_writes_bundle_files(self, bundle):
        for name in ("manifest.json", "config.json", "selection.json", "reports.json",
                     "metrics_long.csv", "metrics_long.json"):
            assert (bundle.output_dir / name).exists()

    def test_methods_present(self, bundle):
        assert set(bundle.safety) == {"point", "budget_scale", "safe_quantile"}
        assert set(bundle.admission) == {"point", "budget_scale", "safe_quantile"}

    def test_selected_model_is_feasible_on_calibration(self, bundle):
        sel = bundle.selection
        assert sel.feasible
        chosen = next(e for e in sel.fine_grid if e.tau == sel.tau_star)
        assert chosen.over_rate <= 0.35

    def test_long_table_matches_reports(self, bundle):
        with open(bundle.output_dir / "metrics_long.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "split", "subset", "metric", "value"]
        by_key = {(r[0], r[2], r[3]): float(r[4]) for r in rows[1:]}
        assert by_key[("safe_quantile", "all", "mae")] == bundle.safety["safe_quantile"].mae
        assert by_key[("point", "p30", "over_rate")] == (
            bundle.safety["point"].subsets["p30"].over_rate
        )
        assert by_key[("budget_scale", "p10", "mean_dropped")] == (
            bundle.admission["budget_scale"].subsets["p10"].mean_dropped
        )

    def test_csv_json_reports_agree(self, bundle):
        with open(bundle.output_dir / "metrics_long.json") as fh:
            json_rows = json.load(fh)
        with open(bundle.output_dir / "metrics_long.csv", newline="") as fh:
            csv_rows = list(csv.reader(fh))[1:]
        assert len(json_rows) == len(csv_rows)
        for jr, cr in zip(json_rows, csv_rows):
            assert [jr["method"], jr["split"], jr["subset"], jr["metric"]] == cr[:4]
            assert jr["value"] == float(cr[4])


class TestZeroNoise:
    def test_constant_trace_is_exactly_learned(self, tmp_path):
        path = write_config(tmp_path, {
            "dataset": {"kind": "synthetic", "length": 800, "base_level": 120.0,
                        "handover_drop": 0.0, "noise": {"kind": "none"}},
            "backbone": {"n_trees": 5, "max_depth": 2, "min_samples_leaf": 20},
        })
        bundle = run_experiment(load_config(path, output_dir=str(tmp_path / "out")))
        for report in bundle.safety.values():
            assert report.mae < 1e-9
            assert report.over_rate == 0.0
        assert bundle.selection.feasible
        assert bundle.selection.tau_star == 0.40  # whole interval safe


class TestProtocolSeparation:
    def test_test_split_never_influences_calibration(self, tmp_path):
        config = load_config(write_config(tmp_path), output_dir=str(tmp_path / "out"))
        trace = generate_synthetic(config.dataset.synthetic)
        full = make_windows(trace, config.history, config.horizon, config.split_ratios)
        truncated = full.without_test()
        assert len(truncated.test) == 0

        results = []
        for ds in (full, truncated):
            evaluator = QuantileEvaluator(ds.train, ds.calibration, config.backbone)
            penalty = 1000.0 * float(np.mean(ds.train.Y))
            sel = run_selection(config.risk, evaluator, penalty=penalty)
            from riskcast.backbone import train_point_model
            from riskcast.metrics import PredictionBatch

            pm = train_point_model(ds.train, config.backbone)
            cal_b = PredictionBatch(pm.predict(ds.calibration.X, ds.calibration.layout), ds.calibration.Y)
            scale = budget_scale_search(cal_b, config.risk.epsilon)
            results.append((sel.tau_star, scale.c_star))
        assert results[0] == results[1]


class TestDeterminism:
    def test_two_runs_are_byte_identical(self, tmp_path):
        path = write_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run_experiment(load_config(path, output_dir=str(out_a)))
        run_experiment(load_config(path, output_dir=str(out_b)))
        for name in ("metrics_long.csv", "metrics_long.json", "reports.json", "selection.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name


class TestFrontier:
    def test_rows_and_consistency_with_run(self, tmp_path):
        config = load_config(write_config(tmp_path), output_dir=str(tmp_path / "out"))
        rows = run_frontier(config, [0.35])
        assert [r.method for r in rows] == ["point", "budget_scale", "safe_quantile"]
        bundle = run_experiment(config)
        by_method = {r.method: r for r in rows}
        for method, report in bundle.safety.items():
            assert by_method[method].over_rate == report.over_rate
            assert by_method[method].mae == report.mae

    def test_sweep_files(self, tmp_path):
        config = load_config(write_config(tmp_path), output_dir=str(tmp_path / "out"))
        rows = run_frontier(config, [0.30, 0.40])
        assert len(rows) == 6
        assert (tmp_path / "out" / "frontier.csv").exists()
        assert (tmp_path / "out" / "frontier.json").exists()

    def test_empty_sweep(self, tmp_path):
        config = load_config(write_config(tmp_path), output_dir=str(tmp_path / "out"))
        with pytest.raises(EmptySweep):
            run_frontier(config, [])

    def test_unsorted_sweep_rejected(self, tmp_path):
        config = load_config(write_config(tmp_path), output_dir=str(tmp_path / "out"))
        with pytest.raises(ValueError):
            run_frontier(config, [0.4, 0.3])

    def test_default_epsilons(self):
        assert DEFAULT_EPSILONS == (0.30, 0.35, 0.40, 0.45, 0.50)


class TestCommands:
    def test_run_and_report_and_inspect(self, tmp_path, capsys):
        path = write_config(tmp_path)
        out = tmp_path / "out"
        assert main(["run", "--config", path, "--output", str(out)]) == 0
        assert main(["report", "--bundle", str(out), "--format", "json"]) == 0
        assert main(["inspect", "--bundle", str(out)]) == 0
        captured = capsys.readouterr().out
        assert "tau_star" in captured

    def test_synth_then_ingest(self, tmp_path, capsys):
        path = write_config(tmp_path)
        trace_csv = tmp_path / "trace.csv"
        assert main(["synth", "--config", path, "--output", str(trace_csv)]) == 0
        assert main(["ingest", "--csv", str(trace_csv)]) == 0
        assert "rows" in capsys.readouterr().out

    def test_run_with_bad_config_fails_with_stage(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("dataset: {kind: nope}\n")
        code = main(["run", "--config", str(bad)])
        assert code != 0
        assert "error [run]" in capsys.readouterr().err

    def test_missing_file_fails(self, tmp_path, capsys):
        code = main(["run", "--config", str(tmp_path / "absent.yaml")])
        assert code != 0

    def test_epsilon_override_changes_selection(self, tmp_path):
        path = write_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--config", path, "--output", str(out_a)]) == 0
        assert main(["run", "--config", path, "--output", str(out_b), "--epsilon", "0.05"]) == 0
        sel_a = json.loads((out_a / "selection.json").read_text())
        sel_b = json.loads((out_b / "selection.json").read_text())
        assert sel_a["quantile_selection"]["tau_star"] >= sel_b["quantile_selection"]["tau_star"]


class TestEmitReport:
    def test_absent_subsets_are_omitted_not_zero_filled(self, tmp_path):
        report = {
            "mae": 1.0, "rmse": 1.5, "over_rate": 0.2, "mpe": 0.5,
            "p95_pos_err": 2.0, "n_elements": 10,
            "subsets": {
                "all": {"mae": 1.0, "rmse": 1.5, "over_rate": 0.2, "mpe": 0.5,
                        "p95_pos_err": 2.0, "n_elements": 10},
                # no p30/p10 entries
            },
        }
        admission = {"mean_dropped": 0.1, "violation_rate": 0.1, "p95_dropped": 1.0,
                     "n_slots": 10}
        (tmp_path / "reports.json").write_text(json.dumps(
            {"methods": {"safe_quantile": {"safety": report, "admission": admission}}}
        ))
        from riskcast.cli import long_rows

        rows = long_rows(tmp_path)
        subsets = {r[2] for r in rows}
        assert subsets == {"all"}

    def test_round_trip_values(self, tmp_path):
        config = load_config(write_config(tmp_path), output_dir=str(tmp_path / "out"))
        bundle = run_experiment(config)
        emit_report(bundle.output_dir, "csv")
        with open(bundle.output_dir / "metrics_long.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        parsed = {(r[0], r[2], r[3]): float(r[4]) for r in rows[1:]}
        assert parsed[("safe_quantile", "all", "p95_pos_err")] == (
            bundle.safety["safe_quantile"].p95_pos_err
        )

    def test_unknown_format(self, tmp_path):
        config = load_config(write_config(tmp_path), output_dir=str(tmp_path / "out"))
        run_experiment(config)
        from riskcast.errors import ConfigError

        with pytest.raises(ConfigError):
            emit_report(config.output_dir, "xml")
