"""Mini-batch SGD with worst-case perturbation injection."""

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model as mdl
from .dataio import one_hot, split
from .numcore import InvalidParameterError, make_rng
from .perturb import PerturbSpec, worst_case_epsilon

log = logging.getLogger(__name__)

EVAL_CHUNK = 2000

# decay convention -> divisor applied with the batch size (None: no rescaling)
DECAY_DIVISORS = {"batch_sum_half": 2, "batch_sum": 1, "mean": None}


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 10
    batch_size: int = 100
    seed: int = 0
    spec: Optional[PerturbSpec] = None
    weight_decay: float = 0.0
    max_norm: Optional[float] = None
    momentum: float = 0.5
    # How weight_decay is weighed against the data loss:
    #   "batch_sum_half": (weight_decay / 2) * sum(W^2) + minibatch-summed loss
    #   "batch_sum": weight_decay * sum(W^2) + minibatch-summed loss
    #   "mean": weight_decay * sum(W^2) + mean loss
    decay_normalization: str = "batch_sum_half"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidParameterError("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be at least 1")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidParameterError("momentum must lie in [0, 1)")
        if self.decay_normalization not in DECAY_DIVISORS:
            raise InvalidParameterError(
                f"unknown decay_normalization {self.decay_normalization!r}")

    @property
    def mean_decay(self):
        """Decay coefficient applied on top of the mean minibatch loss."""
        divisor = DECAY_DIVISORS[self.decay_normalization]
        return self.weight_decay / (1 if divisor is None else divisor * self.batch_size)


def perturb_batch(model, x, t, spec):
    """Inputs moved by their worst-case perturbation (unchanged without a spec)."""
    if spec is None:
        return x
    grad = mdl.backprop(model, x, t).grad_input
    return x + worst_case_epsilon(grad, spec)


def sgd_epoch(model, data, cfg, rng, velocity=None):
    """One shuffled pass of momentum SGD on ``L(x + eps)``.

    ``eps`` is recomputed per example from the current parameters and held
    constant during the parameter step. ``velocity`` (a list of arrays
    matching ``model.parameters()``) is updated in place when supplied so
    momentum carries across epochs.

    Returns the updated copy of the model and the mean per-example loss at
    the perturbed inputs.
    """
    model = model.copy()
    params = model.parameters()
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    order = rng.permutation(len(data))
    targets = one_hot(data.labels, data.num_classes)
    total, count = 0.0, 0
    for step, start in enumerate(range(0, len(order), cfg.batch_size)):
        rows = order[start:start + cfg.batch_size]
        x, t = data.inputs[rows], targets[rows]
        x_adv = perturb_batch(model, x, t, cfg.spec)
        bundle = mdl.backprop(model, x_adv, t, cfg.mean_decay)
        if not np.isfinite(bundle.loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        grads = [g for pair in bundle.grad_params for g in pair]
        for p, v, g in zip(params, velocity, grads):
            v *= cfg.momentum
            v -= cfg.learning_rate * g
            p += v
        if cfg.max_norm is not None:
            for layer in model.layers[:-1]:
                norms = np.sqrt(np.sum(layer.weight ** 2, axis=1))
                over = norms > cfg.max_norm
                layer.weight[over] *= (cfg.max_norm / norms[over])[:, None]
        total += float(bundle.losses.sum())
        count += len(rows)
    return model, total / max(count, 1)


def _chunks(n):
    for start in range(0, n, EVAL_CHUNK):
        yield slice(start, min(start + EVAL_CHUNK, n))


def evaluate_error(model, data):
    """Fraction of rows whose argmax prediction differs from the label."""
    if len(data) == 0:
        return 0.0
    wrong = 0
    for sl in _chunks(len(data)):
        wrong += int(np.sum(mdl.predict(model, data.inputs[sl]) != data.labels[sl]))
    return wrong / len(data)


def dataset_loss(model, data, spec=None):
    """Mean cross entropy over ``data`` at the (optionally perturbed) inputs."""
    targets = one_hot(data.labels, data.num_classes)
    total = 0.0
    for sl in _chunks(len(data)):
        x = perturb_batch(model, data.inputs[sl], targets[sl], spec)
        total += float(mdl.example_losses(mdl.forward(model, x), targets[sl]).sum())
    return total / len(data)


def mean_input_grad_norm(model, data):
    targets = one_hot(data.labels, data.num_classes)
    total = 0.0
    for sl in _chunks(len(data)):
        g = mdl.input_gradient(model, data.inputs[sl], targets[sl])
        total += float(np.sqrt(np.sum(g * g, axis=1)).sum())
    return total / len(data)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_error: float
    mean_input_grad_norm: float


def train(model, data, cfg, val=None, epochs=None, history=None, rng=None,
          velocity=None):
    """Run ``epochs`` (default ``cfg.epochs``) SGD epochs with shared momentum.

    Appends one :class:`EpochRecord` per epoch to ``history`` when given;
    validation metrics use ``val`` or, if absent, the training data.
    """
    rng = make_rng(cfg.seed) if rng is None else rng
    velocity = [np.zeros_like(p) for p in model.parameters()] if velocity is None else velocity
    epochs = cfg.epochs if epochs is None else epochs
    monitor = val if val is not None and len(val) else data
    for _ in range(epochs):
        model, loss = sgd_epoch(model, data, cfg, rng, velocity)
        if history is not None:
            rec = EpochRecord(len(history) + 1, loss, evaluate_error(model, monitor),
                              mean_input_grad_norm(model, monitor))
            history.append(rec)
            log.info("epoch %d loss %.5f val_error %.4f", rec.epoch, loss, rec.val_error)
    return model


@dataclass
class TwoStageResult:
    model: mdl.MlpModel
    stage1_loss: float
    stopped_early: bool  # held-out loss reached stage1_loss before the cap
    stage2_epochs: int
    history: list = field(default_factory=list)


def train_two_stage(model, full, n_first, cfg, max_stage2_epochs=None, val=None):
    """Train on the first ``n_first`` rows, then on everything.

    Stage 1 runs ``cfg.epochs`` epochs and records the training loss
    ``L*`` on its rows. Stage 2 continues on all rows until the mean loss
    over rows ``n_first:`` drops to ``L*`` (checked after each epoch) or
    ``max_stage2_epochs`` (default ``2 * cfg.epochs``) is reached. Losses
    are measured at the perturbed inputs when ``cfg.spec`` is set.
    """
    if not 0 < n_first < len(full):
        raise InvalidParameterError(
            f"n_first={n_first} must leave a non-empty held-out slice of {len(full)} rows")
    first, rest = split(full, n_first)
    cap = 2 * cfg.epochs if max_stage2_epochs is None else max_stage2_epochs
    rng = make_rng(cfg.seed)
    velocity = [np.zeros_like(p) for p in model.parameters()]
    history = []
    model = train(model, first, cfg, val=val, history=history, rng=rng,
                  velocity=velocity)
    target = dataset_loss(model, first, cfg.spec)
    log.info("stage 1 done: training loss %.5f", target)
    for epoch in range(1, cap + 1):
        model = train(model, full, cfg, val=val, epochs=1, history=history,
                      rng=rng, velocity=velocity)
        if dataset_loss(model, rest, cfg.spec) <= target:
            return TwoStageResult(model, target, True, epoch, history)
    return TwoStageResult(model, target, False, cap, history)


def write_history_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_error", "mean_input_grad_norm"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_error),
                        repr(r.mean_input_grad_norm)])
