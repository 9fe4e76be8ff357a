"""Experiment orchestration: config parsing, pipelines, and report emission.

A run ingests or generates a trace, windows it, trains the point predictor
and the quantile family, calibrates both risk controls on the calibration
split only, and then scores everything on the held-out test split. All
randomness derives from the single top-level seed through stage-name-keyed
hashing, so identical configs reproduce identical reports.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import admission as admission_mod
from . import data as data_mod
from .admission import ADMISSION_METRICS, AdmissionReport
from .backbone import BackboneParams, train_point_model
from .calibration import (
    BudgetScaleResult,
    QuantileEvaluator,
    RiskBudgetConfig,
    SelectionResult,
    budget_scale_search,
    run_selection,
)
from .errors import ConfigError, EmptySweep, RiskcastError
from .metrics import METRIC_NAMES, PredictionBatch, SafetyReport, safety_report, SUBSET_NAMES

METHOD_POINT = "point"
METHOD_BUDGET_SCALE = "budget_scale"
METHOD_SAFE_QUANTILE = "safe_quantile"
_METHOD_ORDER = (METHOD_POINT, METHOD_BUDGET_SCALE, METHOD_SAFE_QUANTILE)

DEFAULT_EPSILONS = (0.30, 0.35, 0.40, 0.45, 0.50)


def stage_seed(seed: int, stage: str) -> int:
    """Derive one stage's RNG seed from the top-level seed by keyed hashing."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**31)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str  # "csv" | "synthetic"
    path: str | None = None
    schema: dict[str, str] = field(default_factory=dict)
    name: str | None = None
    synthetic: data_mod.SyntheticSpec | None = None

    def to_dict(self) -> dict:
        if self.kind == "csv":
            return {"kind": "csv", "path": self.path, "schema": dict(sorted(self.schema.items())), "name": self.name}
        return {"kind": "synthetic", "spec": self.synthetic.to_dict()}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    history: int = 75
    horizon: int = 15
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    risk: RiskBudgetConfig = field(default_factory=lambda: RiskBudgetConfig(epsilon=0.35))
    backbone: BackboneParams = field(default_factory=BackboneParams)
    baselines: tuple[str, ...] = (METHOD_POINT, METHOD_BUDGET_SCALE)
    admission_b: float = 10.0
    seed: int = 0
    output_dir: str = "runs/experiment"

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "L": self.history,
            "H": self.horizon,
            "split_ratios": list(self.split_ratios),
            "risk": self.risk.to_dict(),
            "backbone": self.backbone.to_dict(),
            "baselines": list(self.baselines),
            "admission_b": self.admission_b,
            "seed": self.seed,
        }


def config_hash(config: ExperimentConfig) -> str:
    """Hash of every semantically meaningful field (output_dir excluded)."""
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ConfigError(f"missing key {key!r} in {context}")
    return mapping[key]


def parse_dataset_config(raw: dict, seed: int) -> DatasetConfig:
    kind = _require(raw, "kind", "dataset")
    if kind == "csv":
        return DatasetConfig(
            kind="csv",
            path=str(_require(raw, "path", "dataset")),
            schema={str(k): str(v) for k, v in (raw.get("schema") or {}).items()},
            name=raw.get("name"),
        )
    if kind == "synthetic":
        noise_raw = raw.get("noise_model", raw.get("noise")) or {"kind": "none"}
        noise = data_mod.noise_from_dict(noise_raw)
        spec = data_mod.SyntheticSpec(
            length=int(_require(raw, "length", "dataset")),
            seed=int(raw["seed"]) if "seed" in raw else stage_seed(seed, "data"),
            base_level=float(_require(raw, "base_level", "dataset")),
            diurnal_amplitude=float(raw.get("diurnal_amplitude", 0.0)),
            handover_period=int(raw.get("handover_period", 15)),
            handover_drop=float(raw.get("handover_drop", 0.0)),
            noise=noise,
            start_timestamp=int(raw.get("start_timestamp", 0)),
        )
        return DatasetConfig(kind="synthetic", synthetic=spec)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    seed = int(raw.get("seed", 0))
    risk_raw = dict(raw.get("risk") or {})
    risk = RiskBudgetConfig(
        epsilon=float(risk_raw.get("epsilon", 0.35)),
        tau_min=float(risk_raw.get("tau_min", 0.15)),
        tau_max=float(risk_raw.get("tau_max", 0.40)),
        delta=float(risk_raw.get("delta", 0.05)),
        grid_size=int(risk_raw.get("M", 5)),
        penalty=None if risk_raw.get("lambda") is None else float(risk_raw["lambda"]),
    )
    backbone_raw = dict(raw.get("backbone") or {})
    backbone_raw.setdefault("seed", stage_seed(seed, "backbone"))
    backbone = BackboneParams(**backbone_raw)
    ratios = raw.get("split_ratios", (0.7, 0.15, 0.15))
    baselines = tuple(raw.get("baselines", [METHOD_POINT, METHOD_BUDGET_SCALE]))
    unknown = set(baselines) - {METHOD_POINT, METHOD_BUDGET_SCALE}
    if unknown:
        raise ConfigError(f"unknown baselines: {sorted(unknown)}")
    return ExperimentConfig(
        dataset=parse_dataset_config(dict(_require(raw, "dataset", "config")), seed),
        history=int(raw.get("L", 75)),
        horizon=int(raw.get("H", 15)),
        split_ratios=(float(ratios[0]), float(ratios[1]), float(ratios[2])),
        risk=risk,
        backbone=backbone,
        baselines=baselines,
        admission_b=float(raw.get("admission_b", 10.0)),
        seed=seed,
        output_dir=str(raw.get("output_dir", "runs/experiment")),
    )


def load_config(
    path: str,
    seed: int | None = None,
    output_dir: str | None = None,
    epsilon: float | None = None,
) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    if seed is not None:
        # Derived stage seeds follow the override; an explicit backbone.seed
        # in the file stays pinned.
        raw = {**raw, "seed": seed}
    config = config_from_dict(raw)
    if output_dir is not None:
        config = replace(config, output_dir=output_dir)
    if epsilon is not None:
        config = replace(config, risk=config.risk.with_epsilon(epsilon))
    return config


def load_trace(config: ExperimentConfig) -> data_mod.Trace:
    ds = config.dataset
    if ds.kind == "csv":
        return data_mod.ingest_csv(ds.path, ds.schema or None, name=ds.name)
    return data_mod.generate_synthetic(ds.synthetic)


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------


@dataclass
class ExperimentBundle:
    config: ExperimentConfig
    selection: SelectionResult
    budget_scale: BudgetScaleResult | None
    safety: dict[str, SafetyReport]
    admission: dict[str, AdmissionReport]
    output_dir: Path


def _calibrate(config: ExperimentConfig, dataset: data_mod.WindowedDataset):
    """Everything that may look at train+calibration data, and nothing else."""
    train, cal = dataset.train, dataset.calibration
    evaluator = QuantileEvaluator(train, cal, config.backbone)
    penalty = config.risk.penalty
    if penalty is None:
        penalty = 1000.0 * float(np.mean(train.Y))
    selection = run_selection(config.risk, evaluator, penalty=penalty)

    point_model = None
    scale_result = None
    if METHOD_POINT in config.baselines or METHOD_BUDGET_SCALE in config.baselines:
        point_model = train_point_model(train, config.backbone)
    if METHOD_BUDGET_SCALE in config.baselines:
        cal_batch = PredictionBatch(point_model.predict(cal.X, cal.layout), cal.Y)
        scale_result = budget_scale_search(cal_batch, config.risk.epsilon)
    return selection, point_model, scale_result, evaluator, penalty


def _test_batches(
    config: ExperimentConfig,
    dataset: data_mod.WindowedDataset,
    selection: SelectionResult,
    point_model,
    scale_result,
) -> dict[str, PredictionBatch]:
    # Built only after calibration is complete: the protocol guard that keeps
    # test data out of every risk-control decision.
    test = dataset.test
    batches: dict[str, PredictionBatch] = {}
    if point_model is not None and METHOD_POINT in config.baselines:
        batches[METHOD_POINT] = PredictionBatch(point_model.predict(test.X, test.layout), test.Y)
    if scale_result is not None:
        point_preds = point_model.predict(test.X, test.layout)
        batches[METHOD_BUDGET_SCALE] = PredictionBatch(point_preds * scale_result.c_star, test.Y)
    batches[METHOD_SAFE_QUANTILE] = PredictionBatch(
        selection.model.predict(test.X, test.layout), test.Y
    )
    return batches


def run_experiment(config: ExperimentConfig) -> ExperimentBundle:
    """Full pipeline; writes the report bundle under config.output_dir."""
    trace = load_trace(config)
    dataset = data_mod.make_windows(trace, config.history, config.horizon, config.split_ratios)
    selection, point_model, scale_result, _, _ = _calibrate(config, dataset)
    batches = _test_batches(config, dataset, selection, point_model, scale_result)

    safety = {m: safety_report(b, with_subsets=True) for m, b in batches.items()}
    adm = {
        m: admission_mod.simulate(b, config.admission_b, with_subsets=True)
        for m, b in batches.items()
    }

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = ExperimentBundle(config, selection, scale_result, safety, adm, out)
    _write_json(out / "manifest.json", {
        "config_hash": config_hash(config),
        "seed": config.seed,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    })
    _write_json(out / "config.json", config.to_dict())
    _write_json(out / "selection.json", {
        "quantile_selection": selection.to_dict(),
        "budget_scale": scale_result.to_dict() if scale_result else None,
    })
    _write_json(out / "reports.json", {
        "methods": {
            m: {"safety": safety[m].to_dict(), "admission": adm[m].to_dict()}
            for m in sorted(safety)
        },
    })
    emit_report(out, "csv")
    emit_report(out, "json")
    return bundle


@dataclass
class FrontierRow:
    method: str
    epsilon: float
    control: float
    over_rate: float
    mae: float
    mpe: float
    p95_pos_err: float

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "epsilon": self.epsilon,
            "control": self.control,
            "over_rate": self.over_rate,
            "mae": self.mae,
            "mpe": self.mpe,
            "p95_pos_err": self.p95_pos_err,
        }


def run_frontier(config: ExperimentConfig, epsilons) -> list[FrontierRow]:
    """Re-calibrate per budget value, reusing trained models across budgets."""
    eps = [float(e) for e in epsilons]
    if not eps:
        raise EmptySweep("no budget values to sweep")
    if any(not 0.0 < e < 1.0 for e in eps):
        raise ValueError("budget values must lie in (0, 1)")
    if sorted(eps) != eps:
        raise ValueError("budget values must be sorted ascending")

    trace = load_trace(config)
    dataset = data_mod.make_windows(trace, config.history, config.horizon, config.split_ratios)
    train, cal, test = dataset.train, dataset.calibration, dataset.test

    evaluator = QuantileEvaluator(train, cal, config.backbone)
    penalty = config.risk.penalty
    if penalty is None:
        penalty = 1000.0 * float(np.mean(train.Y))

    point_model = None
    cal_point = test_point = None
    if METHOD_POINT in config.baselines or METHOD_BUDGET_SCALE in config.baselines:
        point_model = train_point_model(train, config.backbone)
        cal_point = PredictionBatch(point_model.predict(cal.X, cal.layout), cal.Y)
        test_point = point_model.predict(test.X, test.layout)

    rows: list[FrontierRow] = []
    for e in eps:
        risk = config.risk.with_epsilon(e)
        selection = run_selection(risk, evaluator, penalty=penalty)
        if point_model is not None and METHOD_POINT in config.baselines:
            rows.append(_frontier_row(METHOD_POINT, e, 1.0, PredictionBatch(test_point, test.Y)))
        if METHOD_BUDGET_SCALE in config.baselines and cal_point is not None:
            scale = budget_scale_search(cal_point, e)
            rows.append(_frontier_row(
                METHOD_BUDGET_SCALE, e, scale.c_star,
                PredictionBatch(test_point * scale.c_star, test.Y),
            ))
        rows.append(_frontier_row(
            METHOD_SAFE_QUANTILE, e, selection.tau_star,
            PredictionBatch(selection.model.predict(test.X, test.layout), test.Y),
        ))

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "frontier.json", [r.to_dict() for r in rows])
    _write_frontier_csv(out / "frontier.csv", rows)
    return rows


def _frontier_row(method: str, epsilon: float, control: float, batch: PredictionBatch) -> FrontierRow:
    rep = safety_report(batch)
    return FrontierRow(
        method=method,
        epsilon=epsilon,
        control=float(control),
        over_rate=rep.over_rate,
        mae=rep.mae,
        mpe=rep.mpe,
        p95_pos_err=rep.p95_pos_err,
    )


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

_LONG_COLUMNS = ("method", "split", "subset", "metric", "value")
_FRONTIER_COLUMNS = ("method", "epsilon", "control", "over_rate", "mae", "mpe", "p95_pos_err")


def long_rows(bundle_dir: Path) -> list[tuple]:
    """(method, split, subset, metric, value) rows from a saved bundle."""
    with open(bundle_dir / "reports.json", encoding="utf-8") as fh:
        doc = json.load(fh)
    rows: list[tuple] = []
    methods = doc["methods"]
    ordered = [m for m in _METHOD_ORDER if m in methods] + sorted(set(methods) - set(_METHOD_ORDER))
    for method in ordered:
        entry = methods[method]
        safety = SafetyReport.from_dict(entry["safety"])
        adm = AdmissionReport.from_dict(entry["admission"])
        for subset in SUBSET_NAMES:
            sub = safety.subsets.get(subset)
            if sub is not None:
                rows.extend(
                    (method, "test", subset, metric, sub.metric(metric))
                    for metric in METRIC_NAMES
                )
            sub_adm = adm.subsets.get(subset)
            if sub_adm is not None:
                rows.extend(
                    (method, "test", subset, metric, sub_adm.metric(metric))
                    for metric in ADMISSION_METRICS
                )
    return rows


def emit_report(bundle_dir, fmt: str) -> list[Path]:
    """Write the long-format metric table (and frontier, when present)."""
    bundle_dir = Path(bundle_dir)
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown report format {fmt!r}")
    written: list[Path] = []
    rows = long_rows(bundle_dir)
    if fmt == "csv":
        path = bundle_dir / "metrics_long.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(_LONG_COLUMNS)
            for row in rows:
                writer.writerow([*row[:4], repr(float(row[4]))])
    else:
        path = bundle_dir / "metrics_long.json"
        _write_json(path, [dict(zip(_LONG_COLUMNS, row)) for row in rows])
    written.append(path)

    frontier_json = bundle_dir / "frontier.json"
    if frontier_json.exists():
        with open(frontier_json, encoding="utf-8") as fh:
            frontier = json.load(fh)
        if fmt == "csv":
            fpath = bundle_dir / "frontier.csv"
            _write_frontier_csv(fpath, [FrontierRow(**r) for r in frontier])
            written.append(fpath)
        else:
            written.append(frontier_json)
    return written


def _write_frontier_csv(path: Path, rows: list[FrontierRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_FRONTIER_COLUMNS)
        for r in rows:
            d = r.to_dict()
            writer.writerow([d["method"], *[repr(float(d[c])) for c in _FRONTIER_COLUMNS[1:]]])


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Command-line interface
# ---------------------------------------------------------------------------


def _cmd_ingest(args) -> int:
    schema = dict(kv.split("=", 1) for kv in (args.schema or []))
    trace = data_mod.ingest_csv(args.csv, schema or None)
    print(f"trace {trace.name}: {len(trace)} rows, "
          f"aux columns: {', '.join(trace.aux_keys) or 'none'}")
    print(f"throughput Mbps: min {trace.throughput.min():.3f}, "
          f"mean {trace.throughput.mean():.3f}, max {trace.throughput.max():.3f}")
    if args.output:
        data_mod.write_trace_csv(trace, args.output)
        print(f"normalized trace written to {args.output}")
    return 0


def _cmd_synth(args) -> int:
    config = load_config(args.config, seed=args.seed)
    if config.dataset.kind != "synthetic":
        raise ConfigError("synth requires a config with dataset.kind: synthetic")
    trace = data_mod.generate_synthetic(config.dataset.synthetic)
    data_mod.write_trace_csv(trace, args.output)
    print(f"synthetic trace of length {len(trace)} written to {args.output}")
    return 0


def _cmd_run(args) -> int:
    config = load_config(args.config, seed=args.seed, output_dir=args.output, epsilon=args.epsilon)
    bundle = run_experiment(config)
    emit_report(bundle.output_dir, args.format)
    sel = bundle.selection
    print(f"selected quantile {sel.tau_star:.4f} "
          f"(feasible={sel.feasible}, trainings={sel.n_trainings})")
    if bundle.budget_scale is not None:
        print(f"budget-scale factor {bundle.budget_scale.c_star:.3f} "
              f"(feasible={bundle.budget_scale.feasible})")
    for method in _METHOD_ORDER:
        rep = bundle.safety.get(method)
        if rep is not None:
            print(f"{method}: test mae {rep.mae:.3f}, over_rate {rep.over_rate:.3f}, "
                  f"mpe {rep.mpe:.3f}, p95_pos_err {rep.p95_pos_err:.3f}")
    print(f"bundle written to {bundle.output_dir}")
    return 0


def _cmd_frontier(args) -> int:
    config = load_config(args.config, seed=args.seed, output_dir=args.output)
    epsilons = [float(x) for x in args.epsilons.split(",")] if args.epsilons else list(DEFAULT_EPSILONS)
    rows = run_frontier(config, epsilons)
    for row in rows:
        print(f"eps={row.epsilon:.2f} {row.method}: control={row.control:.4f} "
              f"over_rate={row.over_rate:.3f} mae={row.mae:.3f}")
    print(f"frontier written to {config.output_dir}")
    return 0


def _cmd_report(args) -> int:
    for path in emit_report(Path(args.bundle), args.format):
        print(f"wrote {path}")
    return 0


def _cmd_inspect(args) -> int:
    with open(Path(args.bundle) / "selection.json", encoding="utf-8") as fh:
        doc = json.load(fh)
    sel = doc["quantile_selection"]
    print(f"boundary: [{sel['boundary'][0]:.4f}, {sel['boundary'][1]:.4f}]")
    print(f"tau_star: {sel['tau_star']:.4f}  feasible: {sel['feasible']}  "
          f"fallback: {sel['fallback_used']}  trainings: {sel['n_trainings']}")
    print("evaluations (tau, mae, over_rate):")
    for ev in sel["evaluations"]:
        print(f"  {ev['tau']:.4f}  {ev['mae']:.4f}  {ev['over_rate']:.4f}")
    scale = doc.get("budget_scale")
    if scale:
        print(f"budget-scale factor: {scale['c_star']:.3f}  feasible: {scale['feasible']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riskcast",
        description="Risk-budgeted safe throughput forecasting experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a trace CSV and print a summary")
    p.add_argument("--csv", required=True)
    p.add_argument("--schema", nargs="*", metavar="FIELD=COLUMN")
    p.add_argument("--output", default=None, help="write a normalized copy")
    p.set_defaults(func=_cmd_ingest, stage="ingest")

    p = sub.add_parser("synth", help="generate a synthetic trace CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_synth, stage="synth")

    p = sub.add_parser("run", help="run the full experiment pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--output", default=None, help="override the output directory")
    p.add_argument("--epsilon", type=float, default=None, help="override the risk budget")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=_cmd_run, stage="run")

    p = sub.add_parser("frontier", help="sweep the risk budget and tabulate the frontier")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--epsilons", default=None, help="comma-separated budgets, ascending")
    p.set_defaults(func=_cmd_frontier, stage="frontier")

    p = sub.add_parser("report", help="emit metric tables from a saved bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=_cmd_report, stage="report")

    p = sub.add_parser("inspect", help="print a saved selection report")
    p.add_argument("--bundle", required=True)
    p.set_defaults(func=_cmd_inspect, stage="inspect")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RiskcastError as exc:
        print(f"error [{args.stage}]: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error [{args.stage}]: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
