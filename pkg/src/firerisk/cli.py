"""``firerisk`` command line: train, evaluate, validate, explain, zonate, synth.

Exit codes: 0 success, 1 computation failure, 2 usage or input failure.
Every command writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from firerisk import __version__
from firerisk.data import read_samples_csv, write_samples_csv
from firerisk.errors import DataError, FireRiskError, ModelError
from firerisk.forest import ForestParams, load_forest, save_forest, train_forest
from firerisk.geodata import (
    DEFAULT_COEFFICIENTS,
    RasterStack,
    SynthParams,
    classify_risk,
    district_area_table,
    predict_raster,
    quantile_cutoffs,
    save_grid,
    synth_landscape,
    write_area_table,
)
from firerisk.metrics import dumps_report, evaluate
from firerisk.shap import (
    ForceDecomposition,
    beeswarm_records,
    forest_shap_batch,
    rank_importance,
    write_beeswarm_csv,
    write_force_csv,
    write_importance_csv,
)
from firerisk.validation import SplitPlan, dumps_aggregate, holdout_split, run_validation

log = logging.getLogger("firerisk")

DEFAULTS = {
    "input": None,
    "model": None,
    "out_dir": ".",
    "seed": 0,
    "threads": 1,
    "trees": 200,
    "max_depth": 12,
    "mtry": None,
    "min_leaf": 5,
    "bagging": True,
    "threshold": 0.5,
    "cutoffs": "0.3333333333333333,0.6666666666666666",
    "cutoff_mode": "fixed",
    "bins": 10,
    "bootstrap": 1000,
    "level": 0.95,
    "plan": "loro",
    "mode": "retrain",
    "train_years": None,
    "test_years": None,
    "holdout": 0.0,
    "explain_on": "test",
    "sample_id": None,
    "grid_size": 64,
    "samples": 4000,
    "smoothing": 2.0,
    "region_blocks": 2,
    "shift": 0.0,
    "intercept": 0.0,
    "coefficients": None,
}

COMMAND_KEYS = {
    "train": ("input", "out_dir", "seed", "threads", "trees", "max_depth", "mtry", "min_leaf", "bagging", "holdout"),
    "evaluate": ("input", "model", "out_dir", "seed", "threads", "threshold", "bins", "bootstrap", "level", "holdout"),
    "validate": ("input", "out_dir", "seed", "threads", "trees", "max_depth", "mtry", "min_leaf", "bagging",
                 "threshold", "bins", "bootstrap", "level", "plan", "mode", "train_years", "test_years"),
    "explain": ("input", "model", "out_dir", "seed", "threads", "holdout", "explain_on", "sample_id"),
    "zonate": ("input", "model", "out_dir", "threads", "cutoffs", "cutoff_mode"),
    "synth": ("out_dir", "seed", "grid_size", "samples", "smoothing", "region_blocks", "shift", "intercept",
              "coefficients"),
}


# ---------------------------------------------------------------------------
# argument parsing


def _years(text):
    return [int(t) for t in str(text).replace(",", " ").split()]


def _add(p, *flags, **kw):
    p.add_argument(*flags, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="firerisk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"firerisk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    _add(common, "--config", help="JSON file whose keys mirror the long flags")
    _add(common, "--out-dir", dest="out_dir")
    _add(common, "--seed", type=int)
    _add(common, "--threads", type=int)
    _add(common, "-v", "--verbose", action="store_true")

    forest = argparse.ArgumentParser(add_help=False)
    _add(forest, "--trees", type=int)
    _add(forest, "--max-depth", dest="max_depth", type=int)
    _add(forest, "--mtry", type=int)
    _add(forest, "--min-leaf", dest="min_leaf", type=int)
    _add(forest, "--no-bagging", dest="bagging", action="store_false", help="train every tree on all rows")

    scoring = argparse.ArgumentParser(add_help=False)
    _add(scoring, "--threshold", type=float)
    _add(scoring, "--bins", type=int)
    _add(scoring, "--bootstrap", type=int, help="bootstrap resamples for confidence intervals (0 disables)")
    _add(scoring, "--level", type=float)

    p = sub.add_parser("train", parents=[common, forest], help="fit a forest to a samples CSV")
    _add(p, "--input")
    _add(p, "--holdout", type=float, help="hold out this fraction (train on the rest)")

    p = sub.add_parser("evaluate", parents=[common, scoring], help="metric report for a model or a scores file")
    _add(p, "--input", help="samples CSV (with --model) or CSV with label,score columns")
    _add(p, "--model")
    _add(p, "--holdout", type=float)

    p = sub.add_parser("validate", parents=[common, forest, scoring], help="spatial-transfer or temporal-split run")
    _add(p, "--input")
    _add(p, "--plan", help="'loro' (leave one region out) or a JSON plan file")
    _add(p, "--mode", choices=("retrain", "shared"))
    _add(p, "--train-years", dest="train_years", type=_years)
    _add(p, "--test-years", dest="test_years", type=_years)

    p = sub.add_parser("explain", parents=[common], help="SHAP importance, beeswarm and force exports")
    _add(p, "--input")
    _add(p, "--model")
    _add(p, "--holdout", type=float)
    _add(p, "--explain-on", dest="explain_on", choices=("test", "train", "all"))
    _add(p, "--sample-id", dest="sample_id")

    p = sub.add_parser("zonate", parents=[common], help="probability and risk-class rasters plus district areas")
    _add(p, "--input", help="directory of <feature>.asc layers (optional district.asc)")
    _add(p, "--model")
    _add(p, "--cutoffs", help="'c1,c2' probabilities, or quantiles with --cutoff-mode quantile")
    _add(p, "--cutoff-mode", dest="cutoff_mode", choices=("fixed", "quantile"))

    p = sub.add_parser("synth", parents=[common], help="write a synthetic landscape and sample table")
    _add(p, "--grid-size", dest="grid_size", type=int)
    _add(p, "--samples", type=int)
    _add(p, "--smoothing", type=float)
    _add(p, "--region-blocks", dest="region_blocks", type=int)
    _add(p, "--shift", type=float)
    _add(p, "--intercept", type=float)
    _add(p, "--coefficients", help="overrides as 'name=value,...' (unnamed features keep their defaults)")
    return parser


def effective_config(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by flags."""
    cfg = {k: DEFAULTS[k] for k in COMMAND_KEYS[command]}
    given = vars(ns)
    if "config" in given:
        with open(given["config"], encoding="utf-8") as fh:
            try:
                from_file = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"config file {given['config']!r} is not valid JSON: {exc}") from None
        for key, value in from_file.items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise DataError(f"config key {key!r} does not apply to '{command}'")
            if key in ("train_years", "test_years") and value is not None and not isinstance(value, list):
                value = _years(value)
            cfg[key] = value
    for key, value in given.items():
        if key in cfg:
            cfg[key] = value
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _require_file(path, what):
    if path is None:
        raise DataError(f"--{what} is required")
    if not os.path.exists(path):
        raise DataError(f"{what} path does not exist: {path}")
    return path


def _digest(path) -> str:
    h = hashlib.sha256()
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            h.update(name.encode())
            h.update(_digest(os.path.join(path, name)).encode())
        return h.hexdigest()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _forest_params(cfg) -> ForestParams:
    return ForestParams(
        n_trees=cfg["trees"], max_depth=cfg["max_depth"], min_samples_leaf=cfg["min_leaf"],
        mtry=cfg["mtry"], bootstrap=bool(cfg["bagging"]), seed=cfg["seed"],
    )


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


class Run:
    """Collects manifest fields while a command executes."""

    def __init__(self, command, cfg):
        self.command = command
        self.cfg = cfg
        self.out_dir = cfg["out_dir"]
        os.makedirs(self.out_dir, exist_ok=True)
        self.inputs = {}
        self.outputs = []
        self.seeds = {"seed": cfg.get("seed")}
        self.dropped = {}
        self.extra = {}
        self.started = time.perf_counter()

    def input(self, path):
        self.inputs[os.path.basename(os.path.normpath(path))] = _digest(path)
        return path

    def output(self, name):
        self.outputs.append(name)
        return os.path.join(self.out_dir, name)

    def finish(self):
        manifest = {
            "tool": "firerisk",
            "version": __version__,
            "command": self.command,
            "config": self.cfg,
            "inputs": self.inputs,
            "seeds": self.seeds,
            "dropped": self.dropped,
            "outputs": sorted(self.outputs + ["manifest.json"]),
            **self.extra,
            "timing": {"seconds": round(time.perf_counter() - self.started, 3)},
        }
        _write_text(os.path.join(self.out_dir, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_samples(run, cfg):
    return read_samples_csv(run.input(_require_file(cfg["input"], "input")))


def _load_model(run, cfg):
    return load_forest(run.input(_require_file(cfg["model"], "model")))


def _check_schema(model, data):
    if model.schema.names != data.schema.names:
        raise DataError(f"schema mismatch: model features {list(model.schema.names)} "
                        f"vs data features {list(data.schema.names)}")


def _split_side(data, cfg, side):
    if not cfg.get("holdout"):
        return data
    split = holdout_split(data, cfg["holdout"], cfg["seed"])
    return {"train": split.train, "test": split.test, "all": data}[side]


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg) -> int:
    run = Run("train", cfg)
    data = _split_side(_load_samples(run, cfg), cfg, "train")
    forest = train_forest(data, _forest_params(cfg), threads=cfg["threads"])
    save_forest(forest, run.output("forest.json"))
    run.extra["n_train"] = len(data)
    run.finish()
    log.info("trained %d trees on %d samples", len(forest.trees), len(data))
    return 0


def _read_scores(path):
    labels, scores = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"label", "score"} <= set(reader.fieldnames):
            raise DataError("scores file needs 'label' and 'score' columns", 1)
        for rowno, row in enumerate(reader, start=2):
            try:
                labels.append(int(row["label"]))
                scores.append(float(row["score"]))
            except ValueError:
                raise DataError("non-numeric label or score", rowno) from None
    return np.array(labels), np.array(scores)


def cmd_evaluate(cfg) -> int:
    run = Run("evaluate", cfg)
    if cfg["model"] is not None:
        model = _load_model(run, cfg)
        data = _split_side(_load_samples(run, cfg), cfg, "test")
        _check_schema(model, data)
        labels, scores = data.y, model.predict_proba(data.X, threads=cfg["threads"])
    else:
        labels, scores = _read_scores(run.input(_require_file(cfg["input"], "input")))
    report = evaluate(labels, scores, threshold=cfg["threshold"], n_bins=cfg["bins"], B=cfg["bootstrap"],
                      level=cfg["level"], seed=cfg["seed"], threads=cfg["threads"])
    for w in report.warnings:
        log.warning(w)
    _write_text(run.output("report.txt"), dumps_report(report))
    run.extra["warnings"] = report.warnings
    run.finish()
    return 0


def _plan(cfg, data, run) -> SplitPlan:
    if cfg["train_years"] or cfg["test_years"]:
        if not (cfg["train_years"] and cfg["test_years"]):
            raise DataError("--train-years and --test-years must be given together")
        return SplitPlan.temporal(cfg["train_years"], cfg["test_years"])
    if cfg["plan"] == "loro":
        return SplitPlan.leave_one_region_out(s.region_id for s in data)
    with open(run.input(_require_file(cfg["plan"], "plan")), encoding="utf-8") as fh:
        try:
            return SplitPlan.from_dict(json.load(fh), data)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"invalid plan file: {exc}") from None


def cmd_validate(cfg) -> int:
    run = Run("validate", cfg)
    data = _load_samples(run, cfg)
    plan = _plan(cfg, data, run)
    result = run_validation(data, plan, _forest_params(cfg), mode=cfg["mode"], threshold=cfg["threshold"],
                            n_bins=cfg["bins"], B=cfg["bootstrap"], level=cfg["level"], threads=cfg["threads"])
    for f in result.folds:
        _write_text(run.output(f"fold_{f.fold_id}.txt"), dumps_report(f.report))
    _write_text(run.output("aggregate.txt"), dumps_aggregate(result.aggregate))
    run.seeds["folds"] = {f.fold_id: f.seed for f in result.folds}
    run.dropped = result.dropped
    run.extra["plan"] = plan.to_dict()
    run.extra["fold_sizes"] = result.fold_sizes
    run.finish()
    return 0


def cmd_explain(cfg) -> int:
    run = Run("explain", cfg)
    model = _load_model(run, cfg)
    data = _split_side(_load_samples(run, cfg), cfg, cfg["explain_on"])
    _check_schema(model, data)
    if len(data) == 0:
        raise DataError("nothing to explain: the selected split is empty")
    base, phi, pred = forest_shap_batch(model, data.X, threads=cfg["threads"])
    gap = float(np.max(np.abs(base + phi.sum(axis=1) - pred)))
    if gap > 1e-9:
        raise ModelError(f"efficiency check failed: max |base + sum(phi) - prediction| = {gap:.3e}")
    names = list(model.schema.names)

    with open(run.output("importance.csv"), "w", newline="", encoding="utf-8") as fh:
        write_importance_csv(rank_importance(names, np.abs(phi).mean(axis=0)), fh)
    with open(run.output("beeswarm.csv"), "w", newline="", encoding="utf-8") as fh:
        write_beeswarm_csv(beeswarm_records(data, phi), fh)

    ids = data.ids
    target = cfg["sample_id"] if cfg["sample_id"] is not None else ids[0]
    if target not in ids:
        raise DataError(f"sample id {target!r} is not in the explained split")
    i = ids.index(target)
    items = [(n, float(v)) for n, v in zip(names, phi[i]) if v != 0.0]
    items.sort(key=lambda kv: (-abs(kv[1]), kv[0]))
    with open(run.output("force.csv"), "w", newline="", encoding="utf-8") as fh:
        write_force_csv(ForceDecomposition(float(base), float(pred[i]), items), fh)

    run.extra["efficiency_max_gap"] = gap
    run.extra["n_explained"] = len(data)
    run.extra["force_sample_id"] = target
    run.finish()
    return 0


def cmd_zonate(cfg) -> int:
    run = Run("zonate", cfg)
    model = _load_model(run, cfg)
    stack = RasterStack.from_dir(run.input(_require_file(cfg["input"], "input")), names=list(model.schema.names))
    prob = predict_raster(model, stack, threads=cfg["threads"])
    try:
        values = tuple(float(c) for c in str(cfg["cutoffs"]).split(","))
    except ValueError:
        raise DataError(f"--cutoffs must be two comma-separated numbers, got {cfg['cutoffs']!r}") from None
    if len(values) != 2:
        raise DataError(f"--cutoffs needs exactly two values, got {cfg['cutoffs']!r}")
    cutoffs = quantile_cutoffs(prob, values) if cfg["cutoff_mode"] == "quantile" else values
    rm = classify_risk(prob, cutoffs)
    save_grid(prob, run.output("probability.asc"))
    save_grid(rm.classes, run.output("classes.asc"))
    if stack.district is not None:
        with open(run.output("district_areas.csv"), "w", newline="", encoding="utf-8") as fh:
            write_area_table(district_area_table(rm, stack.district), fh)
    else:
        log.warning("no district.asc in the stack; skipping the area table")
    run.extra["cutoffs"] = list(rm.cutoffs)
    run.finish()
    return 0


def _coefficients(overrides):
    coef = dict(DEFAULT_COEFFICIENTS)
    if overrides is None:
        return tuple(coef.items())
    if isinstance(overrides, str):
        pairs = []
        for item in filter(None, (t.strip() for t in overrides.split(","))):
            name, sep, value = item.partition("=")
            if not sep:
                raise DataError(f"coefficient override {item!r} is not of the form name=value")
            pairs.append((name.strip(), value))
        overrides = dict(pairs)
    for name, value in overrides.items():
        if name not in coef:
            raise DataError(f"unknown synthetic feature {name!r}; known: {list(coef)}")
        try:
            coef[name] = float(value)
        except (TypeError, ValueError):
            raise DataError(f"coefficient for {name!r} is not a number: {value!r}") from None
    return tuple(coef.items())


def cmd_synth(cfg) -> int:
    run = Run("synth", cfg)
    params = SynthParams(
        size=cfg["grid_size"], smoothing=cfg["smoothing"], coefficients=_coefficients(cfg["coefficients"]),
        intercept=cfg["intercept"], seed=cfg["seed"], n_samples=cfg["samples"],
        region_blocks=cfg["region_blocks"], shift=cfg["shift"],
    )
    stack, truth, samples = synth_landscape(params)
    stack_dir = os.path.join(run.out_dir, "stack")
    for p in stack.to_dir(stack_dir):
        run.outputs.append(os.path.relpath(p, run.out_dir))
    save_grid(truth, run.output("truth.asc"))
    with open(run.output("samples.csv"), "w", newline="", encoding="utf-8") as fh:
        write_samples_csv(samples, fh)
    run.extra["coefficients"] = dict(params.coefficients)
    run.finish()
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "validate": cmd_validate,
    "explain": cmd_explain,
    "zonate": cmd_zonate,
    "synth": cmd_synth,
}


def _error_record(exc, code):
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except FireRiskError as exc:
        return _error_record(exc, exc.exit_code)
    except OSError as exc:
        return _error_record(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
