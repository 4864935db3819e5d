"""Deterministic MLP training loop with per-epoch calibration logging.

Everything here is a pure function of (config, seed): parameter init draws
from the xorshift64* stream documented in ``rng``, the per-epoch shuffle is
seeded by (shuffle_seed, epoch), and all arithmetic is float64 numpy with a
fixed operation order, so a re-run reproduces every logged value bit for
bit.

``run_experiment`` executes a grid of (loss, seed) cells into
content-addressed directories, each holding a per-epoch CSV (one row per
split per epoch), final validation and test logit dumps for post-hoc
calibration, and a JSON cell summary; a MANIFEST plus an aggregate
mean/std summary sit at the root.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import (
    ExperimentConfig,
    LossSpec,
    canonical_json,
    cell_key,
    config_to_dict,
)
from .datasets import Dataset, gen_gaussian_blobs, load_csv_dataset, split
from .losses import (
    ABLATION_OVERRIDES,
    BASELINE_LOSSES,
    PROB_EPS,
    AdaptiveTargetStore,
    LossBatchResult,
    NonFiniteLogitError,
    SocratesConfig,
    UnknownVariantError,
    ablation_config,
    baseline_loss,
    dynamic_uncertainty_penalty,
    sat_loss_grad,
    socrates_loss_forward,
    socrates_loss_grad,
    softmax_stable,
)
from .metrics import (
    PredictionLog,
    accuracy,
    ada_ece,
    cw_ece,
    ece,
    mce,
    unknown_top1_freq,
)
from .rng import Xorshift64Star, derive_seed

ACTIVATIONS = ("relu", "tanh")

# salts separating the per-seed random streams of one training cell
_INIT_SALT = 101
_SHUFFLE_SALT = 202


class BadArchitectureError(ValueError):
    """Model spec that cannot be built (zero width, no hidden layer)."""


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or parameters; carries where it happened."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


@dataclass
class MlpModel:
    weights: list
    biases: list
    activation: str

    @property
    def layer_sizes(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)


def init_mlp(layer_sizes, activation: str = "relu", seed: int = 0) -> MlpModel:
    """Glorot-uniform MLP: weights ~ U(-a, a) with a = sqrt(6/(in+out)),
    biases zero, drawn layer by layer from one xorshift64* stream."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 3:
        raise BadArchitectureError("need input, at least one hidden, and output layer")
    if any(s <= 0 for s in sizes):
        raise BadArchitectureError(f"zero-width layer in {sizes}")
    if activation not in ACTIVATIONS:
        raise BadArchitectureError(f"activation must be one of {ACTIVATIONS}")
    stream = Xorshift64Star(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(
            stream.uniform(-bound, bound, fan_in * fan_out).reshape(fan_in, fan_out)
        )
        biases.append(np.zeros(fan_out, dtype=np.float64))
    return MlpModel(weights=weights, biases=biases, activation=activation)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_deriv(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    # h is the already computed activation; tanh' reuses it
    return (z > 0.0).astype(np.float64) if kind == "relu" else 1.0 - h * h


def mlp_forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    logits, _, _ = _forward_cached(model, x)
    return logits


def _forward_cached(model: MlpModel, x: np.ndarray):
    """Forward pass keeping per-layer inputs and hidden pre-activations."""
    h = np.asarray(x, dtype=np.float64)
    inputs = []
    pres = []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ w + b
        if i == last:
            return z, inputs, pres
        pres.append(z)
        h = _activate(z, model.activation)
    raise AssertionError("unreachable")


def mlp_backward(model: MlpModel, inputs, pres, grad_logits: np.ndarray):
    """Gradients of a scalar loss wrt every weight and bias.

    ``inputs``/``pres`` come from ``_forward_cached`` on the same batch.
    """
    n_layers = len(model.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    g = np.asarray(grad_logits, dtype=np.float64)
    for i in range(n_layers - 1, -1, -1):
        grad_w[i] = inputs[i].T @ g
        grad_b[i] = g.sum(axis=0)
        if i > 0:
            h = _activate(pres[i - 1], model.activation)
            g = (g @ model.weights[i].T) * _activate_deriv(
                pres[i - 1], h, model.activation
            )
    return grad_w, grad_b


@dataclass
class OptimizerState:
    """Classical-momentum SGD: v <- momentum*v - lr*(g + wd*theta); theta += v."""

    base_lr: float
    momentum: float
    weight_decay: float
    halve_every: int = 25
    vel_w: list = field(default_factory=list)
    vel_b: list = field(default_factory=list)


def make_optimizer(
    model: MlpModel,
    base_lr: float = 0.1,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    halve_every: int = 25,
) -> OptimizerState:
    # 0 is allowed here (freeze-the-model sanity checks); experiment
    # configs require a positive rate
    if base_lr < 0.0:
        raise ValueError("base_lr must be >= 0")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if weight_decay < 0.0:
        raise ValueError("weight_decay must be >= 0")
    if halve_every < 1:
        raise ValueError("halve_every must be >= 1")
    return OptimizerState(
        base_lr=base_lr,
        momentum=momentum,
        weight_decay=weight_decay,
        halve_every=halve_every,
        vel_w=[np.zeros_like(w) for w in model.weights],
        vel_b=[np.zeros_like(b) for b in model.biases],
    )


def lr_at(epoch: int, base_lr: float, halve_every: int = 25) -> float:
    """Step schedule: the learning rate halves every ``halve_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * 0.5 ** (epoch // halve_every)


def sgd_step(model: MlpModel, grad_w, grad_b, opt: OptimizerState, lr: float) -> None:
    for p, g, v in zip(model.weights, grad_w, opt.vel_w):
        v[:] = opt.momentum * v - lr * (g + opt.weight_decay * p)
        p += v
    for p, g, v in zip(model.biases, grad_b, opt.vel_b):
        v[:] = opt.momentum * v - lr * (g + opt.weight_decay * p)
        p += v


class LossEvaluator:
    """One loss wired for one training run.

    Owns the adaptive-target store where the loss has one, decides whether
    the model carries the extra unknown-class output, and exposes the two
    calls the loop needs: a stateful ``train_batch`` and a stateless
    ``eval_loss`` for held-out splits (targets pinned at 1, beta taken live
    from the predictions being scored).
    """

    def __init__(
        self,
        name: str,
        n_store: int,
        gamma: float = 2.0,
        alpha: float = 0.99,
        start_epoch: int = 0,
        beta_variant: str = "exclude_gt",
        beta_fixed_value: float = 0.25,
        unknown_class: bool | None = None,
    ):
        resolved = "soc" if name == "socrates" else name
        self.name = resolved
        self.gamma = float(gamma)
        if resolved in ABLATION_OVERRIDES:
            self.kind = "socrates"
            base = SocratesConfig(
                gamma=gamma,
                alpha=alpha,
                start_epoch=start_epoch,
                beta_variant=beta_variant,
                beta_fixed_value=beta_fixed_value,
            )
            self.cfg = ablation_config(resolved, base)
        elif resolved == "sat":
            self.kind = "sat"
            self.cfg = SocratesConfig(
                gamma=0.0,
                alpha=alpha,
                start_epoch=start_epoch,
                beta_variant="disabled",
                drop_focal_gt=True,
                drop_focal_idk=True,
            )
        elif resolved in BASELINE_LOSSES:
            self.kind = "baseline"
            self.cfg = None
        else:
            raise UnknownVariantError(f"unknown loss name: {name!r}")

        if unknown_class is None:
            self.has_unknown = self.kind != "baseline"
        else:
            self.has_unknown = bool(unknown_class)
        if self.kind != "baseline" and not self.has_unknown:
            raise UnknownVariantError(
                f"loss {name!r} requires the unknown-class head"
            )

        needs_store = self.kind == "sat" or (
            self.kind == "socrates" and not self.cfg.drop_adaptive_target
        )
        self.store = AdaptiveTargetStore(n_store) if needs_store else None

    def output_dim(self, n_classes: int) -> int:
        return n_classes + 1 if self.has_unknown else n_classes

    def train_batch(self, logits, labels, sample_ids, epoch: int) -> LossBatchResult:
        if self.kind == "socrates":
            return socrates_loss_grad(
                logits, labels, sample_ids, self.store, epoch, self.cfg
            )
        if self.kind == "sat":
            return sat_loss_grad(logits, labels, sample_ids, self.store, epoch, self.cfg)
        loss, grad = baseline_loss(self.name, logits, labels, gamma=self.gamma)
        n = np.asarray(labels).shape[0]
        return LossBatchResult(
            loss=loss,
            grad_logits=grad,
            per_sample_beta=np.zeros(n, dtype=np.float64),
            per_sample_target=np.ones(n, dtype=np.float64),
        )

    def eval_loss(self, logits, labels):
        """(loss, per-sample beta, per-sample target) with no state advance."""
        n = np.asarray(labels).shape[0]
        if self.kind == "baseline":
            loss, _ = baseline_loss(self.name, logits, labels, gamma=self.gamma)
            return loss, np.zeros(n, dtype=np.float64), np.ones(n, dtype=np.float64)
        probs = np.clip(softmax_stable(np.asarray(logits, dtype=np.float64)), PROB_EPS, 1.0)
        beta = dynamic_uncertainty_penalty(
            probs, labels, self.cfg.beta_variant, self.cfg.beta_fixed_value
        )
        targets = np.ones(n, dtype=np.float64)
        loss = socrates_loss_forward(
            probs,
            labels,
            targets,
            beta,
            self.cfg.gamma,
            drop_focal_gt=self.cfg.drop_focal_gt,
            drop_focal_idk=self.cfg.drop_focal_idk,
        )
        return loss, beta, targets


EPOCH_CSV_FIELDS = (
    "epoch",
    "split",
    "loss",
    "accuracy",
    "ece",
    "ada_ece",
    "cw_ece",
    "mce",
    "mean_beta",
    "mean_target",
    "idk_top1_freq",
    "mean_conf_gt_correct",
    "mean_conf_gt_wrong",
    "mean_conf_idk_correct",
    "mean_conf_idk_wrong",
)


@dataclass(frozen=True)
class EpochRecord:
    """One split's statistics at one epoch.

    For the train split, ``loss``/``mean_beta``/``mean_target`` are running
    means over the minibatches of the epoch (the quantities actually used
    for the updates, so they track Fig-1-style curves); everything else is
    computed in one pass over the split with the end-of-epoch parameters.
    Confidence means over an empty group (e.g. no wrong predictions) log 0.
    """

    epoch: int
    split: str
    loss: float
    accuracy: float
    ece: float
    ada_ece: float
    cw_ece: float
    mce: float
    mean_beta: float
    mean_target: float
    idk_top1_freq: float
    mean_conf_gt_correct: float
    mean_conf_gt_wrong: float
    mean_conf_idk_correct: float
    mean_conf_idk_wrong: float

    def csv_row(self) -> str:
        parts = []
        for name in EPOCH_CSV_FIELDS:
            value = getattr(self, name)
            parts.append(value if isinstance(value, str) else repr(value))
        return ",".join(str(p) for p in parts)


def _group_mean(values: np.ndarray, mask: np.ndarray) -> float:
    # empty groups log 0.0 so every record field stays a finite rate
    return float(values[mask].mean()) if mask.any() else 0.0


def _record_from_logits(
    logits: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    split_name: str,
    epoch: int,
    n_bins: int,
    loss: float,
    mean_beta: float,
    mean_target: float,
) -> EpochRecord:
    probs = softmax_stable(logits)
    log = PredictionLog(probs, labels, n_classes)
    rows = np.arange(len(log))
    gt_conf = probs[rows, log.labels]
    idk_conf = probs[:, -1] if log.has_unknown else np.zeros(len(log))
    wrong = ~log.correct
    return EpochRecord(
        epoch=epoch,
        split=split_name,
        # plain floats throughout: repr() of a numpy scalar is not CSV-safe
        loss=float(loss),
        accuracy=accuracy(log),
        ece=ece(log, n_bins),
        ada_ece=ada_ece(log, n_bins),
        cw_ece=cw_ece(log, n_bins),
        mce=mce(log, n_bins),
        mean_beta=float(mean_beta),
        mean_target=float(mean_target),
        idk_top1_freq=unknown_top1_freq(log),
        mean_conf_gt_correct=_group_mean(gt_conf, log.correct),
        mean_conf_gt_wrong=_group_mean(gt_conf, wrong),
        mean_conf_idk_correct=_group_mean(idk_conf, log.correct),
        mean_conf_idk_wrong=_group_mean(idk_conf, wrong),
    )


def evaluate_split(
    model: MlpModel,
    evaluator: LossEvaluator,
    dataset: Dataset,
    split_name: str,
    epoch: int,
    n_bins: int = 15,
) -> EpochRecord:
    """Stateless record for a held-out split at the current parameters."""
    logits = mlp_forward(model, dataset.features)
    loss, beta, targets = evaluator.eval_loss(logits, dataset.labels)
    return _record_from_logits(
        logits,
        dataset.labels,
        dataset.class_count,
        split_name,
        epoch,
        n_bins,
        loss,
        float(beta.mean()),
        float(targets.mean()),
    )


def train_epoch(
    model: MlpModel,
    opt: OptimizerState,
    train_set: Dataset,
    evaluator: LossEvaluator,
    epoch: int,
    batch_size: int,
    shuffle_seed: int,
    val_set: Dataset | None = None,
    n_bins: int = 15,
):
    """One pass over the training split; returns (train record, val record).

    The shuffle is a pure function of (shuffle_seed, epoch). Each batch:
    forward, loss (beta and adaptive-target update happen inside the loss),
    backward, SGD step at the scheduled learning rate. A non-finite loss or
    parameter raises TrainingDivergedError naming the epoch and batch.
    """
    n = len(train_set)
    if n == 0:
        raise ValueError("empty training split")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.asarray(
        Xorshift64Star(derive_seed(shuffle_seed, epoch)).permutation(n), dtype=np.int64
    )
    lr = lr_at(epoch, opt.base_lr, opt.halve_every)
    loss_sum = 0.0
    beta_sum = 0.0
    target_sum = 0.0
    for batch_idx, start in enumerate(range(0, n, batch_size)):
        idx = order[start : start + batch_size]
        logits, inputs, pres = _forward_cached(model, train_set.features[idx])
        try:
            result = evaluator.train_batch(
                logits, train_set.labels[idx], train_set.sample_ids[idx], epoch
            )
        except NonFiniteLogitError as exc:
            # blown-up weights surface as inf logits one batch later
            raise TrainingDivergedError(str(exc), epoch, batch_idx) from exc
        if not np.isfinite(result.loss):
            raise TrainingDivergedError("non-finite training loss", epoch, batch_idx)
        grad_w, grad_b = mlp_backward(model, inputs, pres, result.grad_logits)
        sgd_step(model, grad_w, grad_b, opt, lr)
        for p in model.weights:
            if not np.all(np.isfinite(p)):
                raise TrainingDivergedError(
                    "non-finite parameters after update", epoch, batch_idx
                )
        m = idx.shape[0]
        loss_sum += result.loss * m
        beta_sum += float(result.per_sample_beta.sum())
        target_sum += float(result.per_sample_target.sum())

    logits = mlp_forward(model, train_set.features)
    try:
        train_record = _record_from_logits(
            logits,
            train_set.labels,
            train_set.class_count,
            "train",
            epoch,
            n_bins,
            loss_sum / n,
            beta_sum / n,
            target_sum / n,
        )
    except NonFiniteLogitError as exc:
        # finite but astronomically large weights can still overflow the
        # full-split forward; charge it to the last parameter update
        raise TrainingDivergedError(str(exc), epoch, batch_idx) from exc
    if val_set is None:
        return train_record, None
    return train_record, evaluate_split(model, evaluator, val_set, "val", epoch, n_bins)


def resolve_dataset(spec) -> tuple[Dataset, Dataset, Dataset]:
    """Materialize a DatasetSpec and cut it into (train, val, test)."""
    if spec.kind == "blobs":
        full = gen_gaussian_blobs(
            spec.classes,
            spec.dim,
            spec.n_per_class,
            spec.separation,
            spec.label_noise,
            spec.seed,
        )
    else:
        full = load_csv_dataset(spec.path)
    return split(full, spec.split, spec.split_seed)


def _write_logits_csv(path, dataset: Dataset, logits: np.ndarray) -> None:
    k = logits.shape[1]
    header = "sample_id,label," + ",".join(f"logit_{j}" for j in range(k))
    lines = [header]
    for i in range(logits.shape[0]):
        row = [str(int(dataset.sample_ids[i])), str(int(dataset.labels[i]))]
        row.extend(repr(float(v)) for v in logits[i])
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


_SUMMARY_METRICS = ("loss", "accuracy", "error_rate", "ece", "ada_ece", "cw_ece", "mce")


def _final_metrics(record: EpochRecord) -> dict:
    out = {name: getattr(record, name) for name in _SUMMARY_METRICS if name != "error_rate"}
    out["error_rate"] = 1.0 - record.accuracy
    return out


def run_cell(
    cfg: ExperimentConfig,
    loss: LossSpec,
    seed: int,
    cell_dir: str,
    label: str | None = None,
) -> dict:
    """Train one (loss, seed) cell into ``cell_dir``; returns its summary.

    Writes epochs.csv (train and val rows per epoch plus one final test
    row), val_logits.csv / test_logits.csv at the final parameters, and
    cell.json with status and final-epoch metrics.
    """
    os.makedirs(cell_dir, exist_ok=True)
    train_set, val_set, test_set = resolve_dataset(cfg.dataset)
    evaluator = LossEvaluator(
        loss.name,
        n_store=int(train_set.sample_ids.max()) + 1,
        gamma=loss.gamma,
        alpha=loss.alpha,
        start_epoch=loss.start_epoch,
        beta_variant=loss.beta_variant,
        beta_fixed_value=loss.beta_fixed_value,
        unknown_class=loss.unknown_class,
    )
    sizes = (
        [train_set.features.shape[1]]
        + list(cfg.model.hidden)
        + [evaluator.output_dim(train_set.class_count)]
    )
    model = init_mlp(sizes, cfg.model.activation, derive_seed(seed, _INIT_SALT))
    opt = make_optimizer(
        model,
        base_lr=cfg.optimizer.base_lr,
        momentum=cfg.optimizer.momentum,
        weight_decay=cfg.optimizer.weight_decay,
        halve_every=cfg.optimizer.halve_every,
    )
    shuffle_seed = derive_seed(seed, _SHUFFLE_SALT)

    records = []
    error = None
    try:
        for epoch in range(cfg.epochs):
            train_rec, val_rec = train_epoch(
                model,
                opt,
                train_set,
                evaluator,
                epoch,
                cfg.batch_size,
                shuffle_seed,
                val_set=val_set,
                n_bins=cfg.n_bins,
            )
            records.append(train_rec)
            records.append(val_rec)
        test_rec = evaluate_split(
            model, evaluator, test_set, "test", cfg.epochs - 1, cfg.n_bins
        )
        records.append(test_rec)
    except TrainingDivergedError as exc:
        error = str(exc)

    with open(os.path.join(cell_dir, "epochs.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(EPOCH_CSV_FIELDS) + "\n")
        for rec in records:
            fh.write(rec.csv_row() + "\n")

    summary = {
        "key": os.path.basename(cell_dir),
        "seed": seed,
        "loss_name": loss.name,
        "label": label or loss.name,
        "status": "failed" if error else "done",
        "error": error,
        "config": json.loads(
            canonical_json(
                {
                    "dataset": dataclasses.asdict(cfg.dataset),
                    "model": dataclasses.asdict(cfg.model),
                    "loss": dataclasses.asdict(loss),
                    "optimizer": dataclasses.asdict(cfg.optimizer),
                    "epochs": cfg.epochs,
                    "batch_size": cfg.batch_size,
                    "n_bins": cfg.n_bins,
                    "seed": seed,
                }
            )
        ),
    }
    if error is None:
        val_final = records[-2]
        summary["final"] = {
            "val": _final_metrics(val_final),
            "test": _final_metrics(test_rec),
        }
        _write_logits_csv(
            os.path.join(cell_dir, "val_logits.csv"),
            val_set,
            mlp_forward(model, val_set.features),
        )
        _write_logits_csv(
            os.path.join(cell_dir, "test_logits.csv"),
            test_set,
            mlp_forward(model, test_set.features),
        )
    with open(os.path.join(cell_dir, "cell.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if error is not None:
        raise TrainingDivergedError(error, -1, -1)
    return summary


def _cell_payload(args):
    cfg, loss, seed, cell_dir, label = args
    try:
        return run_cell(cfg, loss, seed, cell_dir, label)
    except TrainingDivergedError:
        with open(os.path.join(cell_dir, "cell.json"), "r", encoding="utf-8") as fh:
            return json.load(fh)


def _mean_std(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


def summarize_cells(cell_summaries) -> dict:
    """Aggregate finished cells into {label: {split.metric: {mean, std}}}."""
    groups: dict = {}
    for cell in cell_summaries:
        if cell["status"] != "done":
            continue
        groups.setdefault(cell.get("label", cell["loss_name"]), []).append(cell)
    out = {}
    for name, cells in groups.items():
        entry = {"seeds": sorted(c["seed"] for c in cells)}
        for split_name in ("val", "test"):
            for metric in _SUMMARY_METRICS:
                values = [c["final"][split_name][metric] for c in cells]
                entry[f"{split_name}.{metric}"] = _mean_std(values)
        out[name] = entry
    return out


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str,
    loss_specs=None,
    labels=None,
    resume: bool = False,
    jobs: int = 1,
    on_cell=None,
) -> dict:
    """Execute all (loss, seed) cells under ``out_dir`` and aggregate.

    ``loss_specs`` is a list of LossSpec (default: the config's own loss);
    ``labels`` names each spec in reports (default: its loss name, which is
    ambiguous for hyperparameter sweeps). Cells land in cells/<content-hash>/;
    with ``resume`` any cell whose cell.json says "done" is skipped. Failures
    are recorded in the MANIFEST and do not stop other cells. Returns the
    manifest dict.
    """
    if loss_specs is None:
        loss_specs = [cfg.loss]
    if labels is None:
        labels = [loss.name for loss in loss_specs]
    if len(labels) != len(loss_specs):
        raise ValueError("labels must pair one-to-one with loss_specs")
    os.makedirs(os.path.join(out_dir, "cells"), exist_ok=True)

    grid = []
    for loss, label in zip(loss_specs, labels):
        for seed in cfg.seeds:
            key = cell_key(cfg, loss, seed)
            grid.append((loss, label, seed, key, os.path.join(out_dir, "cells", key)))

    pending = []
    summaries = {}
    for loss, label, seed, key, cell_dir in grid:
        marker = os.path.join(cell_dir, "cell.json")
        if resume and os.path.exists(marker):
            with open(marker, "r", encoding="utf-8") as fh:
                previous = json.load(fh)
            if previous.get("status") == "done":
                summaries[key] = previous
                if on_cell:
                    on_cell(previous, True)
                continue
        pending.append((loss, label, seed, key, cell_dir))

    if jobs > 1 and len(pending) > 1:
        payloads = [
            (cfg, loss, seed, cell_dir, label)
            for loss, label, seed, key, cell_dir in pending
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (loss, label, seed, key, cell_dir), result in zip(
                pending, pool.map(_cell_payload, payloads)
            ):
                summaries[key] = result
                if on_cell:
                    on_cell(result, False)
    else:
        for loss, label, seed, key, cell_dir in pending:
            result = _cell_payload((cfg, loss, seed, cell_dir, label))
            summaries[key] = result
            if on_cell:
                on_cell(result, False)

    ordered = [summaries[key] for _, _, _, key, _ in grid]
    manifest = {
        "config": config_to_dict(cfg),
        "losses": [loss.name for loss in loss_specs],
        "labels": list(labels),
        "seeds": list(cfg.seeds),
        "cells": [
            {
                "key": key,
                "dir": os.path.join("cells", key),
                "loss_name": loss.name,
                "label": label,
                "seed": seed,
                "status": summaries[key]["status"],
                "error": summaries[key].get("error"),
            }
            for loss, label, seed, key, _ in grid
        ],
    }
    with open(os.path.join(out_dir, "MANIFEST.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summarize_cells(ordered), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
