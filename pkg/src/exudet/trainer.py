"""Training loop, evaluation, dropout sweep, and the gradient-check harness.

Everything here is deterministic given (config, seed, dataset): batch order,
weight init, dropout masks and therefore every logged number.  Training
accuracy is measured on the same train-mode forward passes used for learning,
so with dropout active it reflects the noisy masked network (the quantity the
overfitting gap compares), while validation metrics always come from clean
eval-mode passes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dataio import batch_iter
from .errors import ConfigError, DataError, StateError, TrainingError
from .layers import (
    BatchNorm2d,
    Conv2d,
    Dropout,
    Linear,
    MaxPool2d,
    ReLU,
    softmax_cross_entropy,
)
from .metrics import MetricsReport, confusion, report
from .model import Model, ModelSpec, build_model, save_checkpoint

EPOCH_LOG_HEADER = ["epoch", "train_loss", "train_acc",
                    "val_precision", "val_recall", "val_f1", "val_acc"]
SWEEP_HEADER = ["rate", "train_acc", "val_acc", "overfit_degree", "f1"]


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 40
    learning_rate: float = 0.02
    momentum: float = 0.9
    dropout_rate: float = 0.0
    use_batchnorm: bool = True
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be single or double, got {self.precision!r}")


class SGDMomentum:
    """Classic momentum: v <- mu*v + g; w <- w - lr*v, per learnable tensor."""

    def __init__(self, named_params: Sequence, learning_rate: float, momentum: float = 0.9):
        self.named_params = list(named_params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {path: np.zeros_like(p.data) for path, p in self.named_params}

    def step(self):
        for path, p in self.named_params:
            v = self.velocity[path]
            if v.shape != p.grad.shape:
                raise StateError(
                    f"velocity for {path} has shape {v.shape}, gradient is {p.grad.shape}")
            v *= self.momentum
            v += p.grad
            p.data -= self.learning_rate * v


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val: MetricsReport


def evaluate(model: Model, items: Sequence, batch_size: int = 32) -> MetricsReport:
    """Score a split in eval mode; the model's mode is restored afterward.

    Predictions are per-sample argmax over the logits; exact ties resolve to
    class 0.  Parameters and running statistics are never touched.
    """
    if not len(items):
        raise DataError("cannot evaluate an empty split")
    was_training = model.training
    model.eval()
    try:
        preds, truth = [], []
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            x = np.stack([item.chw for item in chunk]).astype(model.dtype, copy=False)
            logits = model.forward(x)
            preds.extend(int(p) for p in logits.argmax(axis=1))
            truth.extend(item.label for item in chunk)
    finally:
        if was_training:
            model.train()
    return report(confusion(preds, truth))


def fit(model: Model, train_items: Sequence, val_items: Sequence,
        config: TrainConfig, *, best_checkpoint: Optional[str] = None,
        progress: Optional[Callable] = None):
    """Run the full training loop; returns (model, per-epoch logs).

    Each epoch iterates seeded shuffled batches, takes an SGD-momentum step
    per batch, then scores the validation split in eval mode.  When
    ``best_checkpoint`` is given, the model state with the highest validation
    F1 so far is saved there (earliest epoch wins ties).  A non-finite batch
    loss aborts with the offending epoch/batch in the exception.
    """
    if not len(train_items) or not len(val_items):
        raise DataError("fit needs non-empty train and validation splits")
    optimizer = SGDMomentum(list(model.parameters()),
                            config.learning_rate, config.momentum)
    logs = []
    best_f1 = -1.0
    for epoch in range(1, config.epochs + 1):
        model.train()
        loss_sum = 0.0
        correct = 0
        seen = 0
        batches = batch_iter(train_items, config.batch_size,
                             seed=config.seed, epoch=epoch, dtype=model.dtype)
        for batch_index, (x, y) in enumerate(batches):
            logits = model.forward(x)
            loss, dlogits = softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise TrainingError(epoch, batch_index, loss)
            model.backward(dlogits)
            optimizer.step()
            loss_sum += loss * len(y)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(y)
        val = evaluate(model, val_items, config.batch_size)
        log = EpochLog(epoch=epoch, train_loss=loss_sum / seen,
                       train_acc=correct / seen, val=val)
        logs.append(log)
        if progress is not None:
            progress(f"epoch {epoch:3d}  loss {log.train_loss:.4f}  "
                     f"train_acc {log.train_acc:.4f}  val_f1 {val.f1:.4f}")
        if best_checkpoint is not None and val.f1 > best_f1:
            best_f1 = val.f1
            save_checkpoint(model, best_checkpoint, seed=config.seed)
    model.eval()
    return model, logs


def write_epoch_log(logs: Sequence, dest: str) -> None:
    """CSV with one row per epoch; floats use shortest-round-trip repr so a
    rerun with the same seed produces byte-identical files."""
    with open(dest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPOCH_LOG_HEADER)
        for log in logs:
            writer.writerow([
                log.epoch,
                repr(float(log.train_loss)),
                repr(float(log.train_acc)),
                repr(float(log.val.precision)),
                repr(float(log.val.recall)),
                repr(float(log.val.f1)),
                repr(float(log.val.accuracy)),
            ])


# --- dropout sweep -------------------------------------------------------------


@dataclass
class SweepRow:
    rate: float
    train_acc: Optional[float] = None   # fractions; None on a failed run
    val_acc: Optional[float] = None
    f1: Optional[float] = None
    error: Optional[str] = None

    def percent_cells(self) -> list:
        """Render [rate, train, val, degree, f1] with percentages at two decimals.

        The degree cell is computed from the already-rounded train/val cells,
        so the printed row is internally consistent: degree == train - val.
        """
        if self.error is not None:
            return [f"{self.rate:g}", "", "", "", ""]
        t = round(self.train_acc * 100, 2)
        v = round(self.val_acc * 100, 2)
        return [f"{self.rate:g}", f"{t:.2f}", f"{v:.2f}", f"{t - v:.2f}",
                f"{self.f1 * 100:.2f}"]


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def write_csv(self, dest: str) -> None:
        with open(dest, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SWEEP_HEADER)
            for row in self.rows:
                writer.writerow(row.percent_cells())


def sweep_dropout(spec: ModelSpec, config: TrainConfig, train_items: Sequence,
                  val_items: Sequence, rates: Sequence,
                  progress: Optional[Callable] = None) -> SweepResult:
    """Train one model per dropout rate from the same seed and tabulate
    rate, train/val accuracy, overfitting degree and F1 (final epoch each).

    A failed run (non-finite loss) is recorded with its message and empty
    metric cells; the remaining rates still run.
    """
    rates = [float(r) for r in rates]
    if not rates:
        raise ConfigError("sweep needs at least one dropout rate")
    if any(not 0 <= r < 1 for r in rates):
        raise ConfigError(f"rates must lie in [0, 1), got {rates}")
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ConfigError(f"rates must be strictly increasing, got {rates}")

    result = SweepResult()
    for rate in rates:
        run_spec = ModelSpec(**{**spec.to_dict(), "dropout_rate": rate})
        run_config = TrainConfig(**{**config.__dict__, "dropout_rate": rate})
        net = build_model(run_spec, seed=run_config.seed, precision=run_config.precision)
        if progress is not None:
            progress(f"sweep: dropout {rate:g}")
        try:
            _, logs = fit(net, train_items, val_items, run_config)
        except TrainingError as exc:
            result.rows.append(SweepRow(rate=rate, error=str(exc)))
            continue
        last = logs[-1]
        result.rows.append(SweepRow(rate=rate, train_acc=last.train_acc,
                                    val_acc=last.val.accuracy, f1=last.val.f1))
    return result


# --- gradient checking ----------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def format_lines(self) -> list:
        lines = [f"{e.name:<12} {'OK' if e.passed else 'FAIL'}  "
                 f"max rel err {e.max_rel_err:.3e}" for e in self.entries]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} "
                     f"(tolerance {self.tolerance:g})")
        return lines


def _relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _probe_positions(rng: np.random.Generator, size: int, count: int = 20) -> np.ndarray:
    return rng.choice(size, size=min(count, size), replace=False)


def _fd_max_error(loss_fn: Callable, tensors_with_grads: Sequence,
                  rng: np.random.Generator, step: float) -> float:
    """Central-difference check: each (array, analytic grad) pair is probed at
    up to 20 random coordinates; returns the worst relative error seen."""
    worst = 0.0
    for arr, analytic in tensors_with_grads:
        flat = arr.reshape(-1)
        aflat = analytic.reshape(-1)
        for pos in _probe_positions(rng, flat.size):
            orig = flat[pos]
            flat[pos] = orig + step
            fp = loss_fn()
            flat[pos] = orig - step
            fm = loss_fn()
            flat[pos] = orig
            numeric = (fp - fm) / (2 * step)
            worst = max(worst, _relative_error(float(aflat[pos]), numeric))
    return worst


def _projection_loss(layer, x: np.ndarray, r: np.ndarray) -> Callable:
    def loss_fn() -> float:
        return float((layer.forward(x) * r).sum())
    return loss_fn


def _check_conv(rng, step):
    layer = Conv2d(3, 4, 3, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 3, 8, 8))
    r = rng.standard_normal((2, 4, 6, 6))
    loss_fn = _projection_loss(layer, x, r)
    loss_fn()
    dx = layer.backward(r)
    pairs = [(x, dx), (layer.weight.data, layer.weight.grad.copy()),
             (layer.bias.data, layer.bias.grad.copy())]
    return _fd_max_error(loss_fn, pairs, rng, step)


def _check_batchnorm(rng, step):
    layer = BatchNorm2d(3, dtype=np.float64)
    x = rng.standard_normal((4, 3, 5, 5))
    r = rng.standard_normal((4, 3, 5, 5))
    loss_fn = _projection_loss(layer, x, r)
    loss_fn()
    dx = layer.backward(r)
    pairs = [(x, dx), (layer.gamma.data, layer.gamma.grad.copy()),
             (layer.beta.data, layer.beta.grad.copy())]
    return _fd_max_error(loss_fn, pairs, rng, step)


def _check_relu(rng, step):
    layer = ReLU()
    x = rng.standard_normal((5, 9))
    # redraw anything sitting near the kink so +-step never crosses zero
    near = np.abs(x) < 1e-3
    while near.any():
        x[near] = rng.standard_normal(int(near.sum()))
        near = np.abs(x) < 1e-3
    r = rng.standard_normal(x.shape)
    loss_fn = _projection_loss(layer, x, r)
    loss_fn()
    dx = layer.backward(r)
    return _fd_max_error(loss_fn, [(x, dx)], rng, step)


def _check_maxpool(rng, step):
    layer = MaxPool2d(2)
    # distinct, well-separated values keep every argmax stable under +-step
    values = np.linspace(-1.0, 1.0, 2 * 3 * 8 * 8)
    rng.shuffle(values)
    x = values.reshape(2, 3, 8, 8)
    r = rng.standard_normal((2, 3, 4, 4))
    loss_fn = _projection_loss(layer, x, r)
    loss_fn()
    dx = layer.backward(r)
    return _fd_max_error(loss_fn, [(x, dx)], rng, step)


def _check_linear(rng, step):
    layer = Linear(6, 5, rng=rng, dtype=np.float64)
    x = rng.standard_normal((4, 6))
    r = rng.standard_normal((4, 5))
    loss_fn = _projection_loss(layer, x, r)
    loss_fn()
    dx = layer.backward(r)
    pairs = [(x, dx), (layer.weight.data, layer.weight.grad.copy()),
             (layer.bias.data, layer.bias.grad.copy())]
    return _fd_max_error(loss_fn, pairs, rng, step)


def _check_dropout(rng, step):
    layer = Dropout(0.5, rng=np.random.default_rng(rng.integers(2 ** 32)))
    x = rng.standard_normal((6, 10))
    r = rng.standard_normal((6, 10))
    loss_fn = _projection_loss(layer, x, r)
    loss_fn()          # draws the mask ...
    layer.frozen = True  # ... which every probe forward now reuses
    dx = layer.backward(r)
    return _fd_max_error(loss_fn, [(x, dx)], rng, step)


def _check_softmax_ce(rng, step):
    logits = rng.standard_normal((8, 4))
    labels = rng.integers(0, 4, size=8)

    def loss_fn() -> float:
        return softmax_cross_entropy(logits, labels)[0]

    _, grad = softmax_cross_entropy(logits, labels)
    return _fd_max_error(loss_fn, [(logits, grad)], rng, step)


def _check_model(rng, step):
    spec = ModelSpec(input_shape=(3, 16, 16), dropout_rate=0.0)
    net = build_model(spec, seed=int(rng.integers(2 ** 32)), precision="double")
    net.train()
    x = rng.standard_normal((8, 3, 16, 16))
    labels = rng.integers(0, 2, size=8)

    def loss_fn() -> float:
        return softmax_cross_entropy(net.forward(x), labels)[0]

    loss, dlogits = softmax_cross_entropy(net.forward(x), labels)
    net.backward(dlogits)
    named = list(net.parameters())
    sizes = np.array([p.data.size for _, p in named])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat_pos in _probe_positions(rng, total):
        which = int(np.searchsorted(offsets, flat_pos, side="right") - 1)
        local = int(flat_pos - offsets[which])
        _, param = named[which]
        data, grad = param.data.reshape(-1), param.grad.reshape(-1)
        orig = data[local]
        data[local] = orig + step
        fp = loss_fn()
        data[local] = orig - step
        fm = loss_fn()
        data[local] = orig
        worst = max(worst, _relative_error(float(grad[local]), (fp - fm) / (2 * step)))
    return worst


def grad_check(seed: int = 0, tolerance: float = 1e-4,
               step: float = 1e-5) -> GradCheckReport:
    """Compare every backward pass against central differences.

    Each layer (and a shrunken end-to-end model) is probed at random
    coordinates in double precision; an entry passes when its worst relative
    error |analytic - numeric| / max(|a|, |n|, 1e-8) stays below tolerance.
    """
    checks = [
        ("conv", _check_conv),
        ("batchnorm", _check_batchnorm),
        ("relu", _check_relu),
        ("maxpool", _check_maxpool),
        ("linear", _check_linear),
        ("dropout", _check_dropout),
        ("softmax_ce", _check_softmax_ce),
        ("model", _check_model),
    ]
    entries = []
    for index, (name, fn) in enumerate(checks):
        rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
        err = fn(rng, step)
        entries.append(GradCheckEntry(name=name, max_rel_err=err, passed=err < tolerance))
    return GradCheckReport(entries=entries, tolerance=tolerance)
