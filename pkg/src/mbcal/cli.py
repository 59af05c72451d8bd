"""Command-line interface: ``mbcal {train,calibrate,evaluate,simulate,export-rules}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

import numpy as np

from . import sim
from .calibrators import (BetaCalibrator, HistogramCalibrator, IsotonicCalibrator, PlattCalibrator,
                          ScalingBinningCalibrator)
from .core import Dataset, make_rng
from .io import ModelFile, Schema, _encode, ingest, load_model, read_table, save_model, save_rules, write_table
from .mbct import MbctConfig, MbctModel, export_rules, fit, solve_min_bin_size
from .metrics import MetricConfig, classify_monotonicity, evaluate, mvce, subgroup_pud_table

METHODS = ("platt", "beta", "histogram", "isotonic", "scaling-binning", "mbct")


def _emit(records, out: Optional[str]) -> None:
    if out is None:
        return
    with open(out, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, default=float) + "\n")


def _print_table(rows, columns) -> None:
    widths = [max(len(c), *(len(_cell(r.get(c))) for r in rows)) for c in columns]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  ".join(_cell(r.get(c)).ljust(w) for c, w in zip(columns, widths)))


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)


def _mbct_config(args) -> MbctConfig:
    return MbctConfig(alpha=args.alpha, e=args.e, max_depth=args.max_depth, max_trees=args.max_trees, r=args.r,
                      p=args.p, seed=args.seed, min_bin_size_override=args.min_bin_size,
                      validation_fraction=args.validation_fraction)


def cmd_train(args) -> int:
    schema = Schema.load(args.schema)
    data = ingest(args.data, schema)
    beta = args.min_bin_size or solve_min_bin_size(data, args.alpha, args.e)
    n_bins = args.bins or max(1, int(data.total_weight // beta))
    print(f"samples {len(data)}  features {data.n_features}  minimum bin size {beta}")
    if args.method == "mbct":
        model = fit(data, _mbct_config(args))
        print(f"initial global MVCE {model.initial_mvce:.6g}")
        for t, (tree, loss) in enumerate(zip(model.trees, model.global_mvce_per_tree)):
            print(f"tree {t}: depth {tree.depth}  leaves {len(tree.leaves())}  global MVCE {loss:.6g}")
        print(f"accepted trees {len(model.trees)}")
    else:
        model = {
            "platt": PlattCalibrator, "beta": BetaCalibrator, "isotonic": IsotonicCalibrator,
        }.get(args.method)
        if model is not None:
            model = model().fit(data)
        elif args.method == "histogram":
            model = HistogramCalibrator(n_bins).fit(data)
        else:
            model = ScalingBinningCalibrator(n_bins).fit(data)
        print(f"method {args.method}" + (f"  bins {n_bins}" if args.method in ("histogram", "scaling-binning") else ""))
    save_model(args.out, ModelFile(model, schema, {"min_bin_size": int(beta), "seed": args.seed}))
    print(f"wrote {args.out}")
    return 0


def _model_inputs(model: ModelFile, path, require_label=True) -> Dataset:
    if model.schema is None:
        raise ValueError("model file has no feature schema")
    return ingest(path, model.schema, require_label=require_label)


def _apply(model: ModelFile, data: Dataset) -> np.ndarray:
    cal = model.calibrator
    if isinstance(cal, MbctModel) and data.n_features != cal.n_features:
        raise ValueError(f"feature schema mismatch: model expects {cal.n_features} features, data has {data.n_features}")
    return cal.apply(data.prediction, data.features)


def cmd_calibrate(args) -> int:
    model = load_model(args.model)
    table = read_table(args.data)
    data = _encode(table, model.schema, args.data, require_label=False)
    h = _apply(model, data)
    write_table(args.out, table.header + [args.column], [row + [repr(float(v))] for row, v in zip(table.rows, h)])
    print(f"calibrated {len(h)} rows -> {args.out}")
    return 0


def _bin_ids(model: ModelFile, data: Dataset):
    cal = model.calibrator
    if hasattr(cal, "bin_ids"):
        return cal.bin_ids(data.prediction, data.features)
    return None


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    data = _model_inputs(model, args.data)
    h = _apply(model, data)
    bin_size = args.bin_size or model.meta.get("min_bin_size") or solve_min_bin_size(data)
    config = MetricConfig(p=args.p, r=args.r, bin_size=bin_size, n_bins=args.bins, seed=args.seed)
    records, rows = [], []
    for source, values in (("original", data.prediction), ("calibrated", h)):
        report = evaluate(data, values, config)
        mono = classify_monotonicity(data.prediction, values).value
        rec = {"type": "metrics", "source": source, "method": model.kind, "bin_size": bin_size,
               **{k: v for k, v in report.as_dict().items() if k != "per_division_pce"}, "monotonicity": mono}
        records.append(dict(rec, per_division_pce=report.per_division_pce))
        rows.append(rec)
    _print_table(rows, ["source", "mvce", "ece", "ece_sweep", "auc", "tce", "monotonicity"])

    curve = []
    for size in args.curve_bin_sizes:
        if data.total_weight >= 2 * size:
            value = mvce(data, h, MetricConfig(p=args.p, r=args.r, bin_size=size, seed=args.seed))
            curve.append({"type": "mvce_curve", "bin_size": size, "mvce": value})
    records += curve
    if curve:
        print("\nMVCE by bin size")
        _print_table(curve, ["bin_size", "mvce"])

    ids = _bin_ids(model, data)
    if ids is not None:
        bins = np.unique(ids)
        chosen = np.sort(make_rng(args.seed).choice(bins, size=min(args.pud_bins, bins.size), replace=False))
        table = subgroup_pud_table(data, h, ids, n_subgroups=args.pud_subgroups, bins=chosen)
        records += [dict(r, type="pud_subgroup") for r in table]
        print("\nPUD of sub-groups")
        _print_table(table, ["bin", "subgroup", "weight", "mean_label", "mean_calibrated", "pud"])
    _emit(records, args.out)
    return 0


def cmd_simulate(args) -> int:
    scenario = sim.SimScenario(args.beta[0], args.beta[1], args.q, args.p)
    metrics = list(sim.METRICS) if args.metric == "all" else [args.metric]
    tce = sim.analytic_tce(scenario)
    reported = sim.REPORTED_TCE.get((scenario.beta_a, scenario.beta_b, scenario.truth_exponent))
    print(f"scenario Beta({scenario.beta_a}, {scenario.beta_b}), q={scenario.truth_exponent}, p={scenario.p}: "
          f"analytic TCE {tce:.6g}" + (f" (reported {reported})" if reported is not None else ""))
    results = sim.sweep_grid(scenario, metrics, args.bins, args.n, args.m, make_rng(args.seed), args.r)
    rows = [r.as_dict() for r in results]
    columns = ["metric", "n", "n_bins", "m", "e_bias_hat", "metric_mean", "tce_analytic"]
    _print_table(rows, columns + (["e_bias_reported"] if reported is not None else []))
    _emit([dict(r, type="e_bias") for r in rows], args.out)
    return 0


def cmd_export_rules(args) -> int:
    model = load_model(args.model)
    if not isinstance(model.calibrator, MbctModel):
        raise ValueError(f"rule export needs an mbct model, got {model.kind!r}")
    rules = export_rules(model.calibrator)
    save_rules(args.out, rules)
    print(f"wrote {len(rules.leaf_rules)} rules ({len(rules.rules) - len(rules.leaf_rules)} fallbacks) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbcal", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a calibrator and write a model file")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--method", choices=METHODS, default="mbct")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--e", type=float, default=0.1)
    p.add_argument("--max-depth", type=int, default=5)
    p.add_argument("--max-trees", type=int, default=8)
    p.add_argument("--r", type=int, default=100)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--bins", type=int, help="bin count for histogram/scaling-binning (default: samples / bin size)")
    p.add_argument("--min-bin-size", type=int, help="override the solved minimum bin size")
    p.add_argument("--validation-fraction", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="append calibrated values to a data file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--column", default="calibrated")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="report calibration metrics of a model on a data file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--r", type=int, default=100)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--bin-size", type=float, help="MVCE bin size (default: the model's minimum bin size)")
    p.add_argument("--bins", type=int, help="ECE bin count (default: samples / bin size)")
    p.add_argument("--curve-bin-sizes", type=float, nargs="*", default=[250, 500, 1000, 2000, 4000, 8000])
    p.add_argument("--pud-bins", type=int, default=5)
    p.add_argument("--pud-subgroups", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON-lines output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="Monte-Carlo metric bias on a Beta scenario")
    p.add_argument("--beta", type=float, nargs=2, default=[0.2, 0.7], metavar=("A", "B"))
    p.add_argument("--q", type=float, default=2.0)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--metric", choices=sim.METRICS + ("all",), default="all")
    p.add_argument("--n", type=int, nargs="+", default=[10_000, 30_000, 100_000])
    p.add_argument("--bins", type=int, nargs="+", default=[32])
    p.add_argument("--m", type=int, default=200)
    p.add_argument("--r", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON-lines output")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("export-rules", help="flatten an mbct model into a rule file")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_rules)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"mbcal: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
