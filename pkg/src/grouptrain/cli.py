"""Experiment runner.

Subcommands: generate, train, sweep, analyze, ablate, val-study. Every run
reads one config file, writes into a fresh output directory (report.json
plus CSV tables and checkpoints), and is deterministic: re-running with the
same config and data reproduces the report except for its "timing" block.
Exit codes: 0 success, 1 usage or config error, 2 runtime failure (partial
outputs are removed).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .analysis import enrichment_table, error_set_stats, evaluate_groups, replace_error_set, track_cvar_composition
from .config import ParsedConfig, parse_config
from .data import Dataset, GroupId, generate_synthetic, load_csv, save_csv
from .errors import ConfigError, InputError
from .reports import (
    config_from_dict,
    config_to_dict,
    error_set_stats_to_dict,
    fingerprint,
    group_metrics_to_dict,
    read_error_set_csv,
    read_loss_snapshots_csv,
    read_report,
    save_model,
    write_composition_csv,
    write_enrichment_csv,
    write_error_set_csv,
    write_history_csv,
    write_loss_snapshots_csv,
    write_report,
    write_study_csv,
    write_sweep_csv,
)
from .trainers import CRITERIA, JTT, JTT_DYNAMIC, WORST_GROUP, train, train_upweighted
from .tuning import Grid, grid_sweep, validation_size_study

_DATA_COMMANDS = ("train", "sweep", "analyze", "ablate", "val-study")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grouptrain",
        description="Run group-robustness training experiments from a config file.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("generate", "generate synthetic train/val/test CSV datasets"),
        ("train", "train one model and report its group metrics"),
        ("sweep", "grid-sweep hyperparameters with early stopping"),
        ("analyze", "error-set and top-loss-set diagnostics for a finished run"),
        ("ablate", "retrain with a manipulated error set and compare"),
        ("val-study", "tune on shrunken validation sets and compare"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="path to the config file")
        sp.add_argument("--out", required=True, help="output directory (created fresh)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config's seed")
        sp.add_argument("--data", default=None,
                        help="directory holding train.csv/val.csv/test.csv")
    return parser


class _OutputDir:
    """Stages all writes in a sibling directory and renames it into place on
    success, so failed runs leave no partial outputs behind."""

    def __init__(self, out: str):
        self.final = Path(out)
        if self.final.exists() and any(self.final.iterdir()):
            raise InputError(f"output directory {out!r} already exists and is not empty")
        self.staging = self.final.parent / (self.final.name + ".partial")
        if self.staging.exists():
            shutil.rmtree(self.staging)
        self.staging.mkdir(parents=True)

    def path(self, name: str) -> Path:
        return self.staging / name

    def finalize(self):
        if self.final.exists():
            self.final.rmdir()
        self.staging.rename(self.final)

    def abort(self):
        shutil.rmtree(self.staging, ignore_errors=True)


def _require_data(args) -> Path:
    if not args.data:
        raise InputError(f"--data is required for the {args.command} command")
    data = Path(args.data)
    if not data.is_dir():
        raise InputError(f"data directory {args.data!r} does not exist")
    return data


def _load_datasets(data_dir: Path) -> tuple[Dataset, Dataset, Dataset]:
    out = []
    for split in ("train", "val", "test"):
        path = data_dir / f"{split}.csv"
        if not path.exists():
            raise InputError(f"missing dataset file {path}")
        out.append(load_csv(path, name=f"{data_dir.name}/{split}"))
    return tuple(out)


def _dataset_block(datasets: dict[str, Dataset]) -> dict:
    block = {}
    for split, ds in datasets.items():
        entry = {"examples": len(ds), "features": ds.n_features,
                 "annotated": ds.has_group_annotations, "fingerprint": fingerprint(ds)}
        if ds.has_group_annotations:
            entry["groups"] = [
                {"attribute": g.attribute, "label": g.label,
                 "count": int(((ds.attributes == g.attribute) & (ds.labels == g.label)).sum())}
                for g in ds.groups_present()
            ]
        block[split] = entry
    return block


def _metrics_block(result, val: Dataset, test: Dataset) -> dict:
    block = {}
    for criterion in CRITERIA:
        ckpt = result.checkpoints[criterion]
        block[criterion] = {
            "selected_epoch": ckpt.epoch,
            "val": group_metrics_to_dict(evaluate_groups(ckpt.model, val)),
            "test": group_metrics_to_dict(evaluate_groups(ckpt.model, test)),
        }
    block["final"] = {
        "val": group_metrics_to_dict(evaluate_groups(result.model, val)),
        "test": group_metrics_to_dict(evaluate_groups(result.model, test)),
    }
    return block


def _selection_to_dict(m) -> dict:
    return {
        "selected_epoch": m.selected_epoch,
        "val_worst_group": m.val_worst_group,
        "val_average": m.val_average,
        "test_worst_group": m.test_worst_group,
        "test_average": m.test_average,
    }


# ---------------------------------------------------------------------------
# Command handlers. Each returns the report body (everything but the shared
# artifact/command/warnings/timing keys).

def _cmd_generate(parsed: ParsedConfig, args, out: _OutputDir) -> dict:
    gen = parsed.require("generate")
    seed = args.seed if args.seed is not None else gen.seed
    train_ds, val_ds, test_ds = generate_synthetic(gen.spec, seed)
    datasets = {"train": train_ds, "val": val_ds, "test": test_ds}
    for split, ds in datasets.items():
        save_csv(ds, out.path(f"{split}.csv"))
    spec_dict = {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in vars(gen.spec).items()}
    return {
        "effective_config": {"generate": {**spec_dict, "seed": seed}},
        "datasets": _dataset_block(datasets),
        "results": {"names": {split: ds.name for split, ds in datasets.items()}},
        "outputs": {split: f"{split}.csv" for split in datasets},
    }


def _train_diagnostics(result, train_ds: Dataset, out: _OutputDir) -> dict:
    """Error-set composition diagnostics, available when the stored training
    data carries group annotations."""
    error_set = result.aux.get("error_set")
    if error_set is None or not train_ds.has_group_annotations:
        return {}
    table = enrichment_table(error_set, train_ds)
    write_enrichment_csv(out.path("enrichment.csv"), table)
    per_group = [error_set_stats_to_dict(error_set_stats(error_set, train_ds, row.group))
                 for row in table.rows]
    return {
        "error_set_size": len(error_set),
        "error_set_source_epoch": error_set.source_epoch,
        "enrichment": [
            {"attribute": r.group.attribute, "label": r.group.label, "count": r.count,
             "empirical_rate": r.empirical_rate, "error_count": r.error_count,
             "error_set_share": r.error_set_share, "enrichment": r.enrichment}
            for r in table.rows
        ],
        "error_set_stats": per_group,
    }


def _cmd_train(parsed: ParsedConfig, args, out: _OutputDir) -> dict:
    cfg = parsed.require("train")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    data_dir = _require_data(args)
    train_ds, val_ds, test_ds = _load_datasets(data_dir)
    result = train(train_ds, val_ds, cfg)

    outputs = {"history": "history.csv", "model_final": "model_final.txt",
               "model_best_worst_group": "model_best_worst_group.txt",
               "model_best_average": "model_best_average.txt"}
    write_history_csv(out.path("history.csv"), result.history)
    save_model(result.model, out.path("model_final.txt"))
    save_model(result.checkpoints[WORST_GROUP].model, out.path("model_best_worst_group.txt"))
    save_model(result.checkpoints["average"].model, out.path("model_best_average.txt"))

    results: dict = {"metrics": _metrics_block(result, val_ds, test_ds)}
    if "identification_model" in result.aux:
        save_model(result.aux["identification_model"], out.path("model_identification.txt"))
        outputs["model_identification"] = "model_identification.txt"
    if "error_set" in result.aux:
        write_error_set_csv(out.path("error_set.csv"), result.aux["error_set"])
        outputs["error_set"] = "error_set.csv"
        results["refresh_epochs"] = result.aux.get("refresh_epochs", [])
        results["refresh_sizes"] = result.aux.get("refresh_sizes", [])
    if "loss_snapshots" in result.aux:
        write_loss_snapshots_csv(out.path("cvar_losses.csv"), result.aux["loss_snapshots"])
        outputs["loss_snapshots"] = "cvar_losses.csv"
    if "group_weights" in result.aux:
        results["group_weights"] = [
            {"attribute": g.attribute, "label": g.label, "weight": w}
            for g, w in sorted(result.aux["group_weights"].items())
        ]
    if "minority_set" in result.aux:
        results["minority_set_size"] = len(result.aux["minority_set"])
    diagnostics = _train_diagnostics(result, train_ds, out)
    if diagnostics:
        results["diagnostics"] = diagnostics
        outputs["enrichment"] = "enrichment.csv"

    return {
        "effective_config": {"train": config_to_dict(cfg)},
        "datasets": _dataset_block({"train": train_ds, "val": val_ds, "test": test_ds}),
        "results": results,
        "outputs": outputs,
    }


def _grid_or_single(parsed: ParsedConfig, cfg) -> Grid:
    if parsed.grid is not None:
        return Grid(cfg, parsed.grid.axes)
    return Grid(cfg, {})


def _cmd_sweep(parsed: ParsedConfig, args, out: _OutputDir) -> dict:
    cfg = parsed.require("train")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    grid = _grid_or_single(parsed, cfg)
    criterion = parsed.sweep.criterion
    data_dir = _require_data(args)
    train_ds, val_ds, test_ds = _load_datasets(data_dir)
    sweep = grid_sweep(grid, train_ds, val_ds, test_ds, criterion=criterion)
    write_sweep_csv(out.path("sweep.csv"), sweep)
    bw, ba = sweep.rows[sweep.best_by_worst_group], sweep.rows[sweep.best_by_average]
    results = {
        "criterion": criterion,
        "n_configs": len(sweep.rows),
        "best_by_worst_group": {
            "index": sweep.best_by_worst_group,
            "config": config_to_dict(bw.config),
            "metrics": _selection_to_dict(bw.by_criterion[WORST_GROUP]),
        },
        "best_by_average": {
            "index": sweep.best_by_average,
            "config": config_to_dict(ba.config),
            "metrics": _selection_to_dict(ba.by_criterion["average"]),
        },
    }
    return {
        "effective_config": {"train": config_to_dict(cfg),
                             "grid": {k: list(v) for k, v in grid.axes.items()},
                             "sweep": {"criterion": criterion}},
        "datasets": _dataset_block({"train": train_ds, "val": val_ds, "test": test_ds}),
        "results": results,
        "outputs": {"sweep": "sweep.csv"},
    }


def _worst_test_group_from_report(report: dict) -> GroupId:
    try:
        pair = report["results"]["metrics"][WORST_GROUP]["test"]["worst_group"]
        return GroupId(int(pair[0]), int(pair[1]))
    except (KeyError, IndexError, TypeError):
        raise InputError("reference report lacks worst-group test metrics") from None


def _cmd_analyze(parsed: ParsedConfig, args, out: _OutputDir) -> dict:
    spec = parsed.require("analyze")
    run_dir = Path(spec.run)
    run_report = read_report(run_dir / "report.json")
    reference = read_report(spec.erm_report)
    worst = _worst_test_group_from_report(reference)
    data_dir = _require_data(args)
    train_ds, _, _ = _load_datasets(data_dir)
    if not train_ds.has_group_annotations:
        raise InputError("analyze needs a group-annotated stored training set")

    results: dict = {"worst_group": list(worst),
                     "analyzed_run": str(run_dir),
                     "analyzed_algorithm": run_report["effective_config"]["train"]["algorithm"]}
    outputs: dict = {}
    error_set_file = run_dir / "error_set.csv"
    if error_set_file.exists():
        error_set = read_error_set_csv(error_set_file)
        table = enrichment_table(error_set, train_ds)
        write_enrichment_csv(out.path("enrichment.csv"), table)
        outputs["enrichment"] = "enrichment.csv"
        results["error_set_stats"] = error_set_stats_to_dict(
            error_set_stats(error_set, train_ds, worst))
        results["enrichment"] = [
            {"attribute": r.group.attribute, "label": r.group.label,
             "enrichment": r.enrichment, "error_set_share": r.error_set_share}
            for r in table.rows
        ]
    snapshots_file = run_dir / "cvar_losses.csv"
    if snapshots_file.exists():
        snapshots = read_loss_snapshots_csv(snapshots_file)
        alpha = run_report["effective_config"]["train"]["alpha"]
        points = track_cvar_composition(snapshots, alpha, train_ds, worst)
        write_composition_csv(out.path("composition.csv"), points)
        outputs["composition"] = "composition.csv"
        results["composition"] = {
            "alpha": alpha,
            "epochs": len(points),
            "precision_min": min(p.precision for p in points),
            "precision_max": max(p.precision for p in points),
            "recall_min": min(p.recall for p in points),
            "recall_max": max(p.recall for p in points),
        }
    if not outputs:
        raise InputError(f"run {run_dir} has neither an error set nor loss snapshots")
    return {
        "effective_config": {"analyze": {"run": spec.run, "erm_report": spec.erm_report}},
        "datasets": _dataset_block({"train": train_ds}),
        "results": results,
        "outputs": outputs,
    }


def _cmd_ablate(parsed: ParsedConfig, args, out: _OutputDir) -> dict:
    spec = parsed.require("ablate")
    seed = args.seed if args.seed is not None else spec.seed
    run_dir = Path(spec.run)
    run_report = read_report(run_dir / "report.json")
    cfg = config_from_dict(run_report["effective_config"]["train"])
    if cfg.algorithm not in (JTT, JTT_DYNAMIC):
        raise InputError("ablate needs a run of the two-stage trainer")
    error_set_file = run_dir / "error_set.csv"
    if not error_set_file.exists():
        raise InputError(f"run {run_dir} has no error_set.csv")
    original_set = read_error_set_csv(error_set_file)
    data_dir = _require_data(args)
    train_ds, val_ds, test_ds = _load_datasets(data_dir)
    modified_set = replace_error_set(original_set, train_ds, spec.mode,
                                     group=spec.group, seed=seed)
    result = train_upweighted(train_ds, val_ds, cfg, modified_set)
    write_error_set_csv(out.path("error_set_modified.csv"), modified_set)
    write_history_csv(out.path("history.csv"), result.history)
    save_model(result.checkpoints[WORST_GROUP].model, out.path("model_best_worst_group.txt"))

    original_wg = run_report["results"]["metrics"][WORST_GROUP]["test"]["worst_group_accuracy"]
    modified = _metrics_block(result, val_ds, test_ds)
    modified_wg = modified[WORST_GROUP]["test"]["worst_group_accuracy"]
    results = {
        "mode": spec.mode,
        "group": list(spec.group) if spec.group is not None else None,
        "seed": seed,
        "original_error_set_size": len(original_set),
        "modified_error_set_size": len(modified_set),
        "original_test_worst_group_accuracy": original_wg,
        "modified_test_worst_group_accuracy": modified_wg,
        "delta": modified_wg - original_wg,
        "modified_metrics": modified,
    }
    return {
        "effective_config": {"ablate": {"run": spec.run, "mode": spec.mode,
                                        "group": list(spec.group) if spec.group else None,
                                        "seed": seed},
                             "train": config_to_dict(cfg)},
        "datasets": _dataset_block({"train": train_ds, "val": val_ds, "test": test_ds}),
        "results": results,
        "outputs": {"error_set_modified": "error_set_modified.csv",
                    "history": "history.csv",
                    "model_best_worst_group": "model_best_worst_group.txt"},
    }


def _cmd_val_study(parsed: ParsedConfig, args, out: _OutputDir) -> dict:
    cfg = parsed.require("train")
    study = parsed.require("study")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    grid = _grid_or_single(parsed, cfg)
    data_dir = _require_data(args)
    train_ds, val_ds, test_ds = _load_datasets(data_dir)
    results = validation_size_study(study.fractions, grid, train_ds, val_ds, test_ds,
                                    study.seeds)
    write_study_csv(out.path("study.csv"), results)
    return {
        "effective_config": {"train": config_to_dict(cfg),
                             "grid": {k: list(v) for k, v in grid.axes.items()},
                             "study": {"fractions": list(study.fractions),
                                       "seeds": list(study.seeds)}},
        "datasets": _dataset_block({"train": train_ds, "val": val_ds, "test": test_ds}),
        "results": {"rows": [
            {"fraction": r.fraction,
             "median_test_worst_group": r.median_test_worst_group,
             "per_seed": list(r.per_seed_test_worst_group)}
            for r in results
        ]},
        "outputs": {"study": "study.csv"},
    }


_HANDLERS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "analyze": _cmd_analyze,
    "ablate": _cmd_ablate,
    "val-study": _cmd_val_study,
}


def _error_block(kind: str, exc: Exception) -> None:
    block = {"error": {"kind": kind, "type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(block, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        code = e.code if isinstance(e.code, int) else 0
        return 0 if code == 0 else 1

    try:
        parsed = parse_config(args.config)
    except ConfigError as e:
        _error_block("config", e)
        return 1

    out = None
    try:
        out = _OutputDir(args.out)
        started = datetime.now(timezone.utc)
        t0 = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            report = _HANDLERS[args.command](parsed, args, out)
        report["warnings"] = [str(w.message) for w in caught]
        report["artifact"] = {"name": "grouptrain", "version": __version__}
        report["command"] = args.command
        report["timing"] = {"started_utc": started.isoformat(),
                            "wall_seconds": round(time.perf_counter() - t0, 3)}
        write_report(out.path("report.json"), report)
        out.finalize()
        return 0
    except ConfigError as e:
        if out is not None:
            out.abort()
        _error_block("config", e)
        return 1
    except Exception as e:
        if out is not None:
            out.abort()
        _error_block("runtime", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
