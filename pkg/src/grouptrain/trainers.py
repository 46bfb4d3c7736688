"""The six training algorithms: plain ERM, two-stage error-set upweighting
(static and dynamically refreshed), per-batch top-loss reweighting (CVaR),
biased-pair reweighting (LfF), online worst-group reweighting (group DRO),
and ground-truth minority upsampling.

Seeding discipline
------------------
A single master seed in TrainConfig fans out to named PCG64 streams via
``SeedSequence(seed, spawn_key=(stream,))``:

* stream 0: initialization of the main model (the one a run returns),
* stream 1: per-epoch shuffling of the main training loop,
* streams 2/3: initialization/shuffling of the identification stage.

Because the final model of the two-stage trainers uses the same streams as
plain ERM, the exact reduction identities hold bit-for-bit under a shared
seed: upweight_factor=1 or an empty error set reduces the two-stage trainers
to ERM, alpha=1 reduces the CVaR trainer to ERM, a single group reduces
group DRO to ERM, gce_q=0 reduces LfF to ERM, and refresh_every=None (or
any period >= epochs) reduces the dynamic variant to the static one.

Trainers other than group DRO and minority upsampling never read training
group annotations: they operate on a stripped view of their input.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple

import numpy as np

from .analysis import GroupMetrics, evaluate_groups
from .data import Dataset, strip_group_annotations
from .errors import ConfigError, InputError, TrainingWarning
from .models import (
    CROSS_ENTROPY,
    GCE,
    PROB_EPS,
    Architecture,
    LossSpec,
    Model,
    forward_batch,
    fresh_optimizer,
    grad,
    init_model,
    loss_values,
    predict,
    sgd_step,
)

ERM = "erm"
JTT = "jtt"
JTT_DYNAMIC = "jtt-dynamic"
CVAR = "cvar"
LFF = "lff"
GROUP_DRO = "group-dro"
UPSAMPLE_MINORITY = "upsample-minority"
ALGORITHMS = (ERM, JTT, JTT_DYNAMIC, CVAR, LFF, GROUP_DRO, UPSAMPLE_MINORITY)

WORST_GROUP = "worst-group"
AVERAGE = "average"
CRITERIA = (WORST_GROUP, AVERAGE)

_MAIN_INIT, _MAIN_SHUFFLE, _ID_INIT, _ID_SHUFFLE = 0, 1, 2, 3


def _seedseq(seed: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(stream,))


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(_seedseq(seed, stream)))


@dataclass(frozen=True)
class TrainConfig:
    """Algorithm selector plus every hyperparameter.

    Only the fields relevant to the selected algorithm are consulted during
    training, but all of them are echoed into run reports. refresh_every=None
    means the error set is never refreshed (the static two-stage algorithm).
    """

    algorithm: str
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    momentum: float = 0.9
    l2: float = 0.0
    hidden: tuple[int, ...] = ()
    id_epochs: int | None = None
    upweight_factor: int | None = None
    refresh_every: int | None = None
    alpha: float | None = None
    gce_q: float | None = None
    group_step_size: float = 0.01

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm: unknown value {self.algorithm!r}")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate: must be > 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum: must lie in [0, 1)")
        if self.l2 < 0:
            raise ConfigError("l2: must be >= 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden: widths must be positive")
        if self.algorithm in (JTT, JTT_DYNAMIC):
            if self.id_epochs is None or self.id_epochs < 0:
                raise ConfigError("id_epochs: required (>= 0) for the two-stage algorithms")
        if self.algorithm in (JTT, JTT_DYNAMIC, UPSAMPLE_MINORITY):
            if self.upweight_factor is None or self.upweight_factor < 1:
                raise ConfigError("upweight_factor: required integer >= 1")
        if self.refresh_every is not None and self.refresh_every < 1:
            raise ConfigError("refresh_every: must be >= 1 (or omitted for never)")
        if self.algorithm == CVAR:
            if self.alpha is None or not (0.0 < self.alpha <= 1.0):
                raise ConfigError("alpha: required in (0, 1] for the CVaR trainer")
        if self.algorithm == LFF:
            if self.gce_q is None or not (0.0 <= self.gce_q < 1.0):
                raise ConfigError("gce_q: required in [0, 1) for the LfF trainer")
        if self.group_step_size < 0:
            raise ConfigError("group_step_size: must be >= 0")


@dataclass(frozen=True, eq=False)
class ErrorSet:
    """Sorted unique indices of training examples to upweight, plus the
    number of identification epochs that produced them (-1 when the set was
    not derived from a model)."""

    indices: np.ndarray
    source_epoch: int = -1

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64).ravel())
        if len(idx) and idx[0] < 0:
            raise InputError("error-set indices must be non-negative")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ErrorSet):
            return NotImplemented
        return (self.source_epoch == other.source_epoch
                and np.array_equal(self.indices, other.indices))

    __hash__ = None  # type: ignore[assignment]

    def member_mask(self, n: int) -> np.ndarray:
        mask = np.zeros(n, dtype=bool)
        mask[self.indices] = True
        return mask


class EpochMetrics(NamedTuple):
    train_loss: float
    val_worst_group: float
    val_average: float


@dataclass(frozen=True)
class Checkpoint:
    epoch: int  # -1 means the pre-training initialization
    model: Model
    metric: float


@dataclass(eq=False)
class TrainResult:
    """Final model, per-epoch history, algorithm-specific extras, and the
    best-so-far checkpoints per early-stopping criterion."""

    model: Model
    history: list[EpochMetrics]
    aux: dict[str, Any]
    checkpoints: dict[str, Checkpoint]

    def best(self, criterion: str = WORST_GROUP) -> Checkpoint:
        if criterion not in CRITERIA:
            raise InputError(f"unknown criterion {criterion!r}")
        return self.checkpoints[criterion]


class _Tracker:
    """History plus best-so-far checkpoints (strictly-greater updates, so
    ties resolve to the earliest epoch)."""

    def __init__(self, initial: Model):
        self.history: list[EpochMetrics] = []
        self.best = {c: Checkpoint(-1, initial, float("-inf")) for c in CRITERIA}

    def record(self, epoch: int, train_loss: float, model: Model, metrics: GroupMetrics):
        entry = EpochMetrics(train_loss, metrics.worst_group_accuracy, metrics.average_accuracy)
        self.history.append(entry)
        for criterion, value in ((WORST_GROUP, entry.val_worst_group),
                                 (AVERAGE, entry.val_average)):
            if value > self.best[criterion].metric:
                self.best[criterion] = Checkpoint(epoch, model, value)


def _n_classes(train: Dataset, val: Dataset) -> int:
    return max(2, int(max(train.labels.max(), val.labels.max())) + 1)


def _check_inputs(train: Dataset, val: Dataset):
    if len(train) == 0:
        raise InputError("training set is empty")
    if not val.has_group_annotations:
        raise InputError("validation set needs group annotations for worst-group tracking")


def _weighted_sgd(train: Dataset, val: Dataset, cfg: TrainConfig, *, epochs: int,
                  loss_spec: LossSpec, weight_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                  init_stream: int, shuffle_stream: int,
                  snapshot_fn: Callable[[int, Model], None] | None = None,
                  refresh_fn: Callable[[int, Model], Dataset | None] | None = None,
                  ) -> tuple[Model, _Tracker]:
    """Minibatch SGD over `train` with per-batch example weights.

    Per epoch the example order is one seeded permutation; batches are its
    consecutive slices (the last may be short). The recorded train loss is
    the mean over batches of the weighted batch objective.
    """
    _check_inputs(train, val)
    arch = Architecture(train.n_features, cfg.hidden, _n_classes(train, val))
    model = init_model(arch, _seedseq(cfg.seed, init_stream))
    opt = fresh_optimizer(model, cfg.learning_rate, cfg.momentum, cfg.l2)
    shuffle = _rng(cfg.seed, shuffle_stream)
    tracker = _Tracker(model)
    data = train
    for epoch in range(epochs):
        order = shuffle.permutation(len(data))
        objective, n_batches = 0.0, 0
        for start in range(0, len(data), cfg.batch_size):
            bidx = order[start:start + cfg.batch_size]
            xb, yb = data.features[bidx], data.labels[bidx]
            losses = loss_values(forward_batch(model, xb), yb, loss_spec)
            w = weight_fn(losses, bidx)
            model, opt = sgd_step(model, grad(model, xb, yb, w, loss_spec), opt)
            objective += float(w @ losses)
            n_batches += 1
        tracker.record(epoch, objective / n_batches, model, evaluate_groups(model, val))
        if snapshot_fn is not None:
            snapshot_fn(epoch, model)
        if refresh_fn is not None:
            refreshed = refresh_fn(epoch, model)
            if refreshed is not None:
                data = refreshed
    return model, tracker


def _uniform(losses: np.ndarray, _idx: np.ndarray) -> np.ndarray:
    return np.full(len(losses), 1.0 / len(losses))


def _require(cfg: TrainConfig, algorithm: str):
    if cfg.algorithm != algorithm:
        raise InputError(f"config selects {cfg.algorithm!r}, trainer expects {algorithm!r}")


# ---------------------------------------------------------------------------
# Plain ERM

def train_erm(train: Dataset, val: Dataset, cfg: TrainConfig) -> TrainResult:
    """Minibatch SGD on the mean cross-entropy."""
    _require(cfg, ERM)
    base = strip_group_annotations(train)
    model, tracker = _weighted_sgd(
        base, val, cfg, epochs=cfg.epochs, loss_spec=LossSpec(CROSS_ENTROPY),
        weight_fn=_uniform, init_stream=_MAIN_INIT, shuffle_stream=_MAIN_SHUFFLE)
    return TrainResult(model, tracker.history, {}, tracker.best)


# ---------------------------------------------------------------------------
# Error-set machinery and the two-stage trainers

def compute_error_set(model: Model, train: Dataset, source_epoch: int = 0) -> ErrorSet:
    """Indices of training examples the model misclassifies (argmax ties go
    to the lowest label index)."""
    wrong = predict(model, train.features) != train.labels
    return ErrorSet(np.flatnonzero(wrong), source_epoch)


def build_upsampled(train: Dataset, error_set: ErrorSet, upweight_factor: int) -> Dataset:
    """Original examples in order, followed by (upweight_factor - 1) full
    copies of the error-set examples in index order. A factor of 1 or an
    empty set returns the input unchanged."""
    if upweight_factor < 1:
        raise InputError("upweight_factor must be >= 1")
    if upweight_factor == 1 or len(error_set) == 0:
        return train
    if error_set.indices[-1] >= len(train):
        raise InputError("error-set index out of range for this dataset")
    idx = np.concatenate([np.arange(len(train))]
                         + [error_set.indices] * (upweight_factor - 1))
    return train.subset(idx, name=f"{train.name}-upsampled")


def train_upweighted(train: Dataset, val: Dataset, cfg: TrainConfig,
                     error_set: ErrorSet, refresh_every: int | None = None) -> TrainResult:
    """The upweighting stage alone: ERM on the upsampled dataset, optionally
    recomputing the error set from the current model every `refresh_every`
    epochs. Useful directly for error-set manipulation experiments."""
    base = strip_group_annotations(train)
    if len(error_set) == 0:
        warnings.warn("error set is empty; upweighted training degenerates to ERM",
                      TrainingWarning, stacklevel=2)
    upsampled = build_upsampled(base, error_set, cfg.upweight_factor)
    refresh_epochs: list[int] = []
    refresh_sizes: list[int] = []

    def refresh(epoch: int, model: Model) -> Dataset | None:
        done = epoch + 1
        if refresh_every is None or done >= cfg.epochs or done % refresh_every:
            return None
        new_set = compute_error_set(model, base, source_epoch=done)
        refresh_epochs.append(done)
        refresh_sizes.append(len(new_set))
        return build_upsampled(base, new_set, cfg.upweight_factor)

    model, tracker = _weighted_sgd(
        upsampled, val, cfg, epochs=cfg.epochs, loss_spec=LossSpec(CROSS_ENTROPY),
        weight_fn=_uniform, init_stream=_MAIN_INIT, shuffle_stream=_MAIN_SHUFFLE,
        refresh_fn=refresh)
    aux = {"error_set": error_set, "refresh_epochs": refresh_epochs,
           "refresh_sizes": refresh_sizes}
    return TrainResult(model, tracker.history, aux, tracker.best)


def _two_stage(train: Dataset, val: Dataset, cfg: TrainConfig,
               refresh_every: int | None) -> TrainResult:
    base = strip_group_annotations(train)
    id_model, id_tracker = _weighted_sgd(
        base, val, cfg, epochs=cfg.id_epochs, loss_spec=LossSpec(CROSS_ENTROPY),
        weight_fn=_uniform, init_stream=_ID_INIT, shuffle_stream=_ID_SHUFFLE)
    error_set = compute_error_set(id_model, base, source_epoch=cfg.id_epochs)
    result = train_upweighted(base, val, cfg, error_set, refresh_every=refresh_every)
    result.aux["identification_model"] = id_model
    result.aux["identification_history"] = id_tracker.history
    return result


def train_jtt(train: Dataset, val: Dataset, cfg: TrainConfig) -> TrainResult:
    """Two-stage training: fit an identification model for id_epochs, collect
    its misclassified examples once, then retrain from scratch on the
    upsampled data."""
    _require(cfg, JTT)
    return _two_stage(train, val, cfg, refresh_every=None)


def train_jtt_dynamic(train: Dataset, val: Dataset, cfg: TrainConfig) -> TrainResult:
    """The two-stage trainer with the error set recomputed from the current
    final model every refresh_every epochs (None never refreshes and matches
    the static variant exactly)."""
    _require(cfg, JTT_DYNAMIC)
    return _two_stage(train, val, cfg, refresh_every=cfg.refresh_every)


# ---------------------------------------------------------------------------
# CVaR: per-batch top-loss reweighting

def cvar_batch_weights(losses: np.ndarray, alpha: float) -> np.ndarray:
    """The loss-maximizing batch distribution under the cap 1/(alpha*B).

    The floor(alpha*B) highest losses (ties by lower index) receive the cap
    and the next entry takes the leftover mass, so the weights sum to 1 and
    the weighted sum equals the batch CVaR at level alpha. When alpha*B < 1
    the cap exceeds 1 and all mass lands on the single highest loss.
    """
    losses = np.asarray(losses, dtype=np.float64).ravel()
    b = len(losses)
    if b < 1:
        raise InputError("cvar_batch_weights needs at least one loss")
    if not (0.0 < alpha <= 1.0):
        raise InputError("alpha must lie in (0, 1]")
    cap = 1.0 / (alpha * b)
    k = min(b, int(alpha * b))
    order = np.lexsort((np.arange(b), -losses))
    weights = np.zeros(b)
    weights[order[:k]] = cap
    remainder = 1.0 - k * cap
    if k < b and remainder > 0.0:
        weights[order[k]] = remainder
    return weights


def train_cvar(train: Dataset, val: Dataset, cfg: TrainConfig) -> TrainResult:
    """Each minibatch step reweights examples by the capped top-loss
    distribution at level alpha before the gradient step. Per-example
    cross-entropy over the full training set is snapshotted every epoch for
    composition tracking."""
    _require(cfg, CVAR)
    base = strip_group_annotations(train)
    snapshots: list[np.ndarray] = []
    spec = LossSpec(CROSS_ENTROPY)

    def snap(_epoch: int, model: Model):
        snapshots.append(loss_values(forward_batch(model, base.features), base.labels, spec))

    model, tracker = _weighted_sgd(
        base, val, cfg, epochs=cfg.epochs, loss_spec=spec,
        weight_fn=lambda losses, _idx: cvar_batch_weights(losses, cfg.alpha),
        init_stream=_MAIN_INIT, shuffle_stream=_MAIN_SHUFFLE, snapshot_fn=snap)
    aux = {"loss_snapshots": np.asarray(snapshots), "alpha": cfg.alpha}
    return TrainResult(model, tracker.history, aux, tracker.best)


# ---------------------------------------------------------------------------
# LfF: a deliberately biased model reweights the main model's examples

def lff_weight(p_bias, p_main):
    """log(p_bias) / (log(p_bias) + log(p_main)), probabilities clamped away
    from 0 and 1. Scalar or elementwise on arrays; W(a, b) + W(b, a) = 1."""
    pb = np.clip(np.asarray(p_bias, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    pm = np.clip(np.asarray(p_main, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    lb, lm = np.log(pb), np.log(pm)
    return lb / (lb + lm)


def train_lff(train: Dataset, val: Dataset, cfg: TrainConfig) -> TrainResult:
    """Interleaved updates of a bias model (generalized cross-entropy, which
    gradient-weights examples by p^q and so favours easy ones) and the main
    model (cross-entropy with per-example weights from `lff_weight`, using
    the pre-step probabilities of both models, normalized to sum 1).

    Both models start from the identical seeded initialization, so gce_q=0
    reduces the whole procedure to ERM exactly.
    """
    _require(cfg, LFF)
    base = strip_group_annotations(train)
    _check_inputs(base, val)
    arch = Architecture(base.n_features, cfg.hidden, _n_classes(base, val))
    model_b = model_m = init_model(arch, _seedseq(cfg.seed, _MAIN_INIT))
    opt_b = fresh_optimizer(model_b, cfg.learning_rate, cfg.momentum, cfg.l2)
    opt_m = fresh_optimizer(model_m, cfg.learning_rate, cfg.momentum, cfg.l2)
    gce = LossSpec(GCE, cfg.gce_q)
    ce = LossSpec(CROSS_ENTROPY)
    shuffle = _rng(cfg.seed, _MAIN_SHUFFLE)
    tracker = _Tracker(model_m)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(base))
        objective, n_batches = 0.0, 0
        for start in range(0, len(base), cfg.batch_size):
            bidx = order[start:start + cfg.batch_size]
            xb, yb = base.features[bidx], base.labels[bidx]
            rows = np.arange(len(yb))
            probs_b = forward_batch(model_b, xb)
            probs_m = forward_batch(model_m, xb)
            raw = lff_weight(probs_b[rows, yb], probs_m[rows, yb])
            w_main = raw / raw.sum()
            w_bias = np.full(len(yb), 1.0 / len(yb))
            grad_b = grad(model_b, xb, yb, w_bias, gce)
            grad_m = grad(model_m, xb, yb, w_main, ce)
            model_b, opt_b = sgd_step(model_b, grad_b, opt_b)
            model_m, opt_m = sgd_step(model_m, grad_m, opt_m)
            objective += float(w_main @ loss_values(probs_m, yb, ce))
            n_batches += 1
        tracker.record(epoch, objective / max(n_batches, 1), model_m,
                       evaluate_groups(model_m, val))
    return TrainResult(model_m, tracker.history, {"bias_model": model_b}, tracker.best)


# ---------------------------------------------------------------------------
# Group DRO: online exponentiated-gradient reweighting of group losses

def group_dro_update(group_losses: np.ndarray, weights: np.ndarray,
                     step_size: float) -> np.ndarray:
    """One exponentiated-gradient ascent step on the group-weight simplex:
    w_g <- w_g * exp(step_size * loss_g), renormalized. Groups absent from
    the batch contribute loss 0 and keep their weight (up to renorm)."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    gl = np.asarray(group_losses, dtype=np.float64).ravel()
    if len(w) != len(gl):
        raise InputError("group_losses and weights must have equal length")
    if np.any(w < 0):
        raise InputError("weights must be non-negative")
    if not np.all(np.isfinite(gl)):
        raise InputError("group losses must be finite")
    out = w * np.exp(step_size * gl)
    return out / out.sum()


def train_group_dro(train: Dataset, val: Dataset, cfg: TrainConfig) -> TrainResult:
    """Oracle trainer with training group annotations: per batch, group mean
    losses update the adversarial group weights, then the model steps on the
    weight-averaged group losses."""
    _require(cfg, GROUP_DRO)
    if not train.has_group_annotations:
        raise InputError("group-dro needs training group annotations")
    groups = train.groups_present()
    lookup = {g: i for i, g in enumerate(groups)}
    codes = np.asarray([lookup[g] for g in train.group_ids()], dtype=np.int64)
    n_groups = len(groups)
    state = {"w": np.full(n_groups, 1.0 / n_groups)}

    def weight_fn(losses: np.ndarray, bidx: np.ndarray) -> np.ndarray:
        batch_codes = codes[bidx]
        counts = np.bincount(batch_codes, minlength=n_groups)
        sums = np.bincount(batch_codes, weights=losses, minlength=n_groups)
        means = np.divide(sums, counts, out=np.zeros(n_groups), where=counts > 0)
        state["w"] = group_dro_update(means, state["w"], cfg.group_step_size)
        return state["w"][batch_codes] / counts[batch_codes]

    model, tracker = _weighted_sgd(
        train, val, cfg, epochs=cfg.epochs, loss_spec=LossSpec(CROSS_ENTROPY),
        weight_fn=weight_fn, init_stream=_MAIN_INIT, shuffle_stream=_MAIN_SHUFFLE)
    aux = {"group_weights": {g: float(state["w"][i]) for i, g in enumerate(groups)}}
    return TrainResult(model, tracker.history, aux, tracker.best)


# ---------------------------------------------------------------------------
# Ground-truth minority upsampling

def train_upsample_minority(train: Dataset, val: Dataset, cfg: TrainConfig) -> TrainResult:
    """Duplicates every example whose attribute disagrees with its label
    upweight_factor times, then runs plain ERM. Binary labels/attributes
    only."""
    _require(cfg, UPSAMPLE_MINORITY)
    if not train.has_group_annotations:
        raise InputError("upsample-minority needs training group annotations")
    for arr, what in ((train.attributes, "attributes"), (train.labels, "labels")):
        if len(np.setdiff1d(np.unique(arr), [0, 1])):
            raise InputError(f"upsample-minority requires binary {what}")
    minority = ErrorSet(np.flatnonzero(train.attributes != train.labels), source_epoch=-1)
    upsampled = build_upsampled(strip_group_annotations(train), minority, cfg.upweight_factor)
    model, tracker = _weighted_sgd(
        upsampled, val, cfg, epochs=cfg.epochs, loss_spec=LossSpec(CROSS_ENTROPY),
        weight_fn=_uniform, init_stream=_MAIN_INIT, shuffle_stream=_MAIN_SHUFFLE)
    return TrainResult(model, tracker.history, {"minority_set": minority}, tracker.best)


# ---------------------------------------------------------------------------

_TRAINERS = {
    ERM: train_erm,
    JTT: train_jtt,
    JTT_DYNAMIC: train_jtt_dynamic,
    CVAR: train_cvar,
    LFF: train_lff,
    GROUP_DRO: train_group_dro,
    UPSAMPLE_MINORITY: train_upsample_minority,
}


def train(train_data: Dataset, val: Dataset, cfg: TrainConfig) -> TrainResult:
    """Dispatch to the trainer selected by cfg.algorithm."""
    return _TRAINERS[cfg.algorithm](train_data, val, cfg)
