"""Hyperparameter grid sweeps with worst-group-validation selection,
early stopping, and the validation-set-size study.

Every run in a sweep records its metrics under both early-stopping criteria
(worst-group and average validation accuracy), so one sweep supports both
"tuned for worst-group" and "tuned for average" comparisons.
"""

from __future__ import annotations

import dataclasses
import itertools
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .analysis import evaluate_groups
from .data import Dataset, subsample_validation
from .errors import InputError
from .trainers import AVERAGE, CRITERIA, WORST_GROUP, EpochMetrics, TrainConfig, train


@dataclass(frozen=True, eq=False)
class Grid:
    """A base config plus per-field value lists, enumerated as the Cartesian
    product with axes sorted by field name (last-sorted axis fastest)."""

    base: TrainConfig
    axes: dict[str, tuple]

    def __post_init__(self):
        valid = {f.name for f in dataclasses.fields(TrainConfig)}
        for key, values in self.axes.items():
            if key not in valid:
                raise InputError(f"grid axis {key!r} is not a TrainConfig field")
            if len(tuple(values)) == 0:
                raise InputError(f"grid axis {key!r} has no values")
        object.__setattr__(self, "axes", {k: tuple(v) for k, v in self.axes.items()})

    def configs(self) -> list[TrainConfig]:
        if not self.axes:
            return [self.base]
        names = sorted(self.axes)
        out = []
        for combo in itertools.product(*(self.axes[n] for n in names)):
            out.append(dataclasses.replace(self.base, **dict(zip(names, combo))))
        return out

    def __len__(self) -> int:
        n = 1
        for values in self.axes.values():
            n *= len(values)
        return n


@dataclass(frozen=True)
class SelectionMetrics:
    """Metrics of one run at the epoch chosen by one stopping criterion."""

    selected_epoch: int
    val_worst_group: float
    val_average: float
    test_worst_group: float
    test_average: float


@dataclass(frozen=True, eq=False)
class SweepRow:
    config: TrainConfig
    by_criterion: dict[str, SelectionMetrics]


@dataclass(eq=False)
class SweepResult:
    """One row per grid point (enumeration order), with the argmax row index
    under each criterion (ties resolve to the earliest row)."""

    criterion: str
    rows: list[SweepRow]
    best_by_worst_group: int
    best_by_average: int

    def best_row(self, criterion: str | None = None) -> SweepRow:
        criterion = criterion or self.criterion
        idx = self.best_by_worst_group if criterion == WORST_GROUP else self.best_by_average
        return self.rows[idx]

    def selected(self, criterion: str | None = None) -> SelectionMetrics:
        criterion = criterion or self.criterion
        return self.best_row(criterion).by_criterion[criterion]


def early_stop(history: Sequence, criterion: str) -> int:
    """Epoch index maximizing the criterion (ties go to the earliest epoch).

    `history` holds per-epoch EpochMetrics, or plain floats of the criterion
    itself.
    """
    if criterion not in CRITERIA:
        raise InputError(f"unknown criterion {criterion!r}")
    if len(history) == 0:
        raise InputError("early_stop needs a non-empty history")
    values = [
        float(h.val_worst_group if criterion == WORST_GROUP else h.val_average)
        if isinstance(h, EpochMetrics) else float(h)
        for h in history
    ]
    return int(np.argmax(values))


def _evaluate_config(cfg: TrainConfig, train_data: Dataset, val: Dataset,
                     test: Dataset) -> SweepRow:
    result = train(train_data, val, cfg)
    by_criterion = {}
    for criterion in CRITERIA:
        ckpt = result.checkpoints[criterion]
        entry = result.history[ckpt.epoch]
        test_metrics = evaluate_groups(ckpt.model, test)
        by_criterion[criterion] = SelectionMetrics(
            selected_epoch=ckpt.epoch,
            val_worst_group=entry.val_worst_group,
            val_average=entry.val_average,
            test_worst_group=test_metrics.worst_group_accuracy,
            test_average=test_metrics.average_accuracy,
        )
    return SweepRow(cfg, by_criterion)


def _worker(args) -> SweepRow:
    return _evaluate_config(*args)


def grid_sweep(grid: Grid, train_data: Dataset, val: Dataset, test: Dataset,
               criterion: str = WORST_GROUP, n_jobs: int = 1) -> SweepResult:
    """Train every grid point, early-stop each run under both criteria, and
    pick the best row per criterion by its validation metric.

    Grid points are independent; n_jobs > 1 fans them out to worker
    processes and reassembles rows in enumeration order, so parallelism
    never changes the result.
    """
    if criterion not in CRITERIA:
        raise InputError(f"unknown criterion {criterion!r}")
    configs = grid.configs()
    if not configs:
        raise InputError("empty grid")
    if any(c.epochs < 1 for c in configs):
        raise InputError("sweeps need epochs >= 1")
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(_worker, [(c, train_data, val, test) for c in configs]))
    else:
        rows = [_evaluate_config(c, train_data, val, test) for c in configs]
    best_wg = int(np.argmax([r.by_criterion[WORST_GROUP].val_worst_group for r in rows]))
    best_avg = int(np.argmax([r.by_criterion[AVERAGE].val_average for r in rows]))
    return SweepResult(criterion, rows, best_wg, best_avg)


@dataclass(frozen=True)
class FractionResult:
    fraction: float
    per_seed_test_worst_group: tuple[float, ...]
    median_test_worst_group: float


def validation_size_study(fractions: Sequence[float], grid: Grid, train_data: Dataset,
                          val: Dataset, test: Dataset, seeds: Sequence[int],
                          n_jobs: int = 1) -> list[FractionResult]:
    """For each fraction and seed, subsample the validation set, tune on the
    reduced set by worst-group accuracy, and evaluate the selected model on
    the full test set; report per-seed values and their median."""
    if any(not (0.0 < f <= 1.0) for f in fractions):
        raise InputError("fractions must lie in (0, 1]")
    if not seeds:
        raise InputError("at least one subsampling seed required")
    out = []
    for fraction in fractions:
        per_seed = []
        for seed in seeds:
            reduced = subsample_validation(val, fraction, seed)
            sweep = grid_sweep(grid, train_data, reduced, test,
                               criterion=WORST_GROUP, n_jobs=n_jobs)
            per_seed.append(sweep.selected().test_worst_group)
        out.append(FractionResult(float(fraction), tuple(per_seed),
                                  float(statistics.median(per_seed))))
    return out
